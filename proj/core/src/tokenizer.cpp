#include "samdkif/tokenizer.hpp"

#include <algorithm>

namespace samdkif {

std::vector<int> encode_bytes(std::string_view text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (const char c : text) {
    ids.push_back(static_cast<int>(static_cast<unsigned char>(c)));
  }
  return ids;
}

std::string decode(std::span<const int> ids) {
  std::string out;
  out.reserve(ids.size());
  for (const int id : ids) {
    if (id >= 0 && id < 256) {
      out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    }
  }
  return out;
}

std::size_t EncodedExample::answer_tokens() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

std::vector<int> encode_prompt(const InstructionExample& example) {
  std::vector<int> ids;
  ids.reserve(example.context.size() + example.query.size() + 3);
  ids.push_back(kBos);
  for (const char c : example.context) {
    ids.push_back(static_cast<int>(static_cast<unsigned char>(c)));
  }
  ids.push_back(kSep);
  for (const char c : example.query) {
    ids.push_back(static_cast<int>(static_cast<unsigned char>(c)));
  }
  ids.push_back(kSep);
  return ids;
}

std::size_t encoded_length(const InstructionExample& example) {
  return example.context.size() + example.query.size() + example.answer.size() + 4;
}

EncodedExample encode_example(const InstructionExample& example) {
  std::vector<int> seq = encode_prompt(example);
  const std::size_t prompt = seq.size();
  for (const char c : example.answer) {
    seq.push_back(static_cast<int>(static_cast<unsigned char>(c)));
  }
  seq.push_back(kEos);

  EncodedExample out;
  out.prompt_length = prompt;
  out.ids.assign(seq.begin(), seq.end() - 1);
  out.targets.assign(seq.begin() + 1, seq.end());
  out.mask.assign(out.ids.size(), 0);
  // targets[t] = seq[t + 1]; the answer starts at seq[prompt].
  for (std::size_t t = prompt - 1; t < out.ids.size(); ++t) {
    out.mask[t] = 1;
  }
  return out;
}

}  // namespace samdkif
