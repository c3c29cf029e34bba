#pragma once

// Low-rank skill adapters in SVD form, W = W0 + U diag(lambda) V, and the
// weighted sets of them that the forward pass consumes.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "samdkif/checkpoint.hpp"
#include "samdkif/model_config.hpp"
#include "samdkif/rng.hpp"
#include "samdkif/tensor.hpp"

namespace samdkif {

template <typename T>
struct AdapterTriplet {
  Tensor<T> U;       // d1 x r
  Tensor<T> lambda;  // r
  Tensor<T> V;       // r x d2
  std::vector<std::uint8_t> alive;

  std::size_t rank() const { return lambda.size(); }
  std::size_t alive_count() const;

  /// Dense U diag(lambda) V, computed without recording.
  Tensor<T> delta() const;

  /// Forces lambda to exactly zero at pruned positions.
  void enforce_mask();
};

template <typename T>
class SkillAdapter {
 public:
  /// U, V ~ N(0, init_sd^2), lambda = 0, everything alive.
  static SkillAdapter init(std::string skill_id, const ModelConfig& config, std::size_t rank,
                           Rng& rng, double init_sd = 0.02);

  std::string skill_id;
  ModelConfig config;
  double dropout_p = 0.0;
  std::vector<AdapterTriplet<T>> triplets;  // index layer * 6 + target

  std::size_t n_triplets() const { return triplets.size(); }
  AdapterTriplet<T>& triplet(std::size_t layer, Target target);
  const AdapterTriplet<T>& triplet(std::size_t layer, Target target) const;

  std::size_t alive_count() const;
  std::size_t parameter_count() const;
  std::vector<Tensor<T>> parameters() const;
  void set_requires_grad(bool flag);

  /// Deep copy with fresh storage.
  SkillAdapter clone() const;

  /// Tensor names: "<skill>/L<layer>/<target>/<U|lambda|V|alive>".
  static std::string tensor_name(const std::string& skill_id, std::size_t layer, Target target,
                                 const std::string& factor);
  Checkpoint to_checkpoint() const;
  static SkillAdapter from_checkpoint(const Checkpoint& checkpoint);
};

/// A weighted collection of skills attached to one forward pass. Each weight
/// is a scalar tensor so a router can receive gradients through it.
template <typename T>
struct AdapterSet {
  struct Entry {
    const SkillAdapter<T>* skill = nullptr;
    Tensor<T> weight;
  };

  std::vector<Entry> entries;

  static AdapterSet single(const SkillAdapter<T>& skill, T weight = T(1));

  bool empty() const { return entries.empty(); }

  /// sum_i w_i * ((drop(x) U_i) * lambda_i) V_i for one (layer, target).
  /// Dropout with each skill's dropout_p is applied only when dropout_rng
  /// is non-null.
  Tensor<T> apply(std::size_t layer, Target target, const Tensor<T>& x,
                  Rng* dropout_rng = nullptr) const;
};

}  // namespace samdkif
