#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <utility>

namespace samdkif {

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ffn = 256;
  std::size_t vocab_size = 260;
  std::size_t max_seq_len = 256;
  bool tied_head = false;

  /// Throws ContractError on a zero count or d_model % n_heads != 0.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

/// The adapted projections of one layer, in the canonical order used for
/// naming, iteration and tie-breaking.
enum class Target : std::size_t { kQ = 0, kK, kV, kF1, kF2, kO };

inline constexpr std::size_t kTargetCount = 6;
inline constexpr std::array<Target, kTargetCount> kTargets = {Target::kQ,  Target::kK,  Target::kV,
                                                              Target::kF1, Target::kF2, Target::kO};

std::string_view target_name(Target target);
Target parse_target(std::string_view name);

/// (rows, cols) of the weight a target adapts: x[.. x rows] * W[rows x cols].
std::pair<std::size_t, std::size_t> target_shape(const ModelConfig& config, Target target);

}  // namespace samdkif
