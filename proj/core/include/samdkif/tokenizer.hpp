#pragma once

// Byte-level tokenizer. Ids 0..255 are raw bytes; four specials follow.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "samdkif/dataformat.hpp"

namespace samdkif {

inline constexpr int kBos = 256;
inline constexpr int kEos = 257;
inline constexpr int kPad = 258;
inline constexpr int kSep = 259;
inline constexpr int kByteVocab = 260;

std::vector<int> encode_bytes(std::string_view text);

/// Inverse of encode_bytes; special tokens are dropped.
std::string decode(std::span<const int> ids);

/// A training view of one example:
///   sequence = BOS context SEP query SEP answer EOS
///   ids      = sequence[0 .. n-1)
///   targets  = sequence[1 .. n)
///   mask[t]  = 1 where targets[t] belongs to the answer or the closing EOS.
struct EncodedExample {
  std::vector<int> ids;
  std::vector<int> targets;
  std::vector<std::uint8_t> mask;
  std::size_t prompt_length = 0;  // BOS .. second SEP inclusive

  std::size_t answer_tokens() const;
};

/// BOS context SEP query SEP
std::vector<int> encode_prompt(const InstructionExample& example);

EncodedExample encode_example(const InstructionExample& example);

/// Length of the full sequence (prompt + answer + EOS).
std::size_t encoded_length(const InstructionExample& example);

}  // namespace samdkif
