#pragma once

// Skill router: temperature softmax over K frozen skills, trained per
// downstream task.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "samdkif/adapter.hpp"
#include "samdkif/dataformat.hpp"
#include "samdkif/model.hpp"

namespace samdkif {

template <typename T>
struct SkillLibrary {
  ModelConfig config;
  std::vector<SkillAdapter<T>> skills;

  /// Throws LibraryError if the list is empty or any adapter disagrees with
  /// `config` in layer count or factor shapes.
  static SkillLibrary make(const ModelConfig& config, std::vector<SkillAdapter<T>> skills);
  void validate() const;

  std::size_t size() const { return skills.size(); }
  std::size_t feature_dim() const { return config.n_layers * kTargetCount; }
  std::vector<std::string> ids() const;
};

/// [K x F] Frobenius norms of every (layer, target) delta.
template <typename T>
Tensor<T> skill_features(const SkillLibrary<T>& library);

enum class RouterMode { kStatic, kFeature };

std::string router_mode_name(RouterMode mode);
RouterMode parse_router_mode(const std::string& name);

template <typename T>
struct RouterParams {
  RouterMode mode = RouterMode::kStatic;
  Tensor<T> A;       // [K x F], feature mode
  Tensor<T> logits;  // [K], static mode
  Tensor<T> b;       // [K]
  double tau = 1.0;
  std::vector<std::string> skill_ids;

  static RouterParams init(RouterMode mode, std::vector<std::string> skill_ids,
                           std::size_t feature_dim, Rng& rng, double init_sd = 0.01,
                           double tau = 1.0);
  /// All-zero parameters: the uniform router.
  static RouterParams uniform(RouterMode mode, std::vector<std::string> skill_ids,
                              std::size_t feature_dim, double tau = 1.0);

  std::size_t k() const { return b.size(); }
  std::vector<Tensor<T>> trainable() const;
  std::size_t trainable_count() const;
  void set_requires_grad(bool flag);
  RouterParams clone() const;

  Checkpoint to_checkpoint(const ModelConfig& config) const;
  static RouterParams from_checkpoint(const Checkpoint& checkpoint);
};

template <typename T>
struct RouterOutput {
  Tensor<T> E;  // raw logits
  Tensor<T> R;  // softmax(E / tau)
};

/// features is only read in feature mode.
template <typename T>
RouterOutput<T> gate(const RouterParams<T>& params, const Tensor<T>& features);

/// Attaches every skill with weight R_i (R is read with select(), so
/// gradients flow back into the router).
template <typename T>
AdapterSet<T> routed_delta(const SkillLibrary<T>& library, const Tensor<T>& R);

template <typename T>
struct AdaptationLoss {
  Tensor<T> total;
  Tensor<T> task;  // mean per-example answer NLL of the routed model
  Tensor<T> reg;   // sum of squared A rows (feature) or logits (static)
};

template <typename T>
AdaptationLoss<T> adaptation_loss(const TransformerWeights<T>& weights,
                                  const SkillLibrary<T>& library, const RouterParams<T>& params,
                                  const Tensor<T>& features, std::span<const EncodedExample> batch,
                                  double gamma1);

struct RouterTrainConfig {
  RouterMode mode = RouterMode::kStatic;
  double tau = 1.0;
  double gamma1 = 0.01;
  double lr = 0.05;
  std::size_t steps = 500;
  std::size_t batch_size = 32;
  std::size_t full_batch_limit = 256;
  double init_sd = 0.01;
  std::uint64_t seed = 1;

  void validate() const;
};

struct RouterLogRow {
  std::size_t step = 0;
  double task_loss = 0.0;
  double reg = 0.0;
  double entropy = 0.0;
  std::size_t argmax = 0;
};

template <typename T>
struct RouterTrainResult {
  RouterParams<T> params;
  std::vector<RouterLogRow> log;
};

/// Gradient descent on L_task + gamma1 * L_r over the adaptation set.
template <typename T>
RouterTrainResult<T> adapt_normal(const TransformerWeights<T>& weights,
                                  const SkillLibrary<T>& library, const Dataset& adaptation,
                                  const RouterTrainConfig& cfg);

/// Shannon entropy (nats) and argmax of a probability vector.
double entropy(std::span<const double> p);
std::size_t argmax(std::span<const double> p);

template <typename T>
std::vector<double> to_doubles(const Tensor<T>& t);

void write_router_log_csv(const std::string& path, const std::vector<RouterLogRow>& log);

}  // namespace samdkif
