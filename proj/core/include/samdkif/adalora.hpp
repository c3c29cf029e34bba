#pragma once

// Skill training: SVD-form adapters with an orthogonality penalty and
// importance-driven pruning of singular values under a shrinking budget.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "samdkif/adapter.hpp"
#include "samdkif/dataformat.hpp"
#include "samdkif/model.hpp"

namespace samdkif {

struct SkillTrainConfig {
  std::size_t r_init = 6;
  std::size_t r_target = 2;
  double gamma = 0.5;
  std::size_t t0 = 200;
  std::size_t t1 = 1000;
  std::size_t total_steps = 1200;
  double lr = 0.01;
  std::size_t batch_size = 16;
  double dropout_p = 0.1;
  std::uint64_t seed = 1;
  std::size_t prune_interval = 10;
  bool importance_ema = false;
  double ema_beta = 0.85;
  std::string optimizer = "adam";  // "adam" or "sgd"
  double init_sd = 0.02;
  std::string divergence_checkpoint;  // where the last good adapter goes on divergence

  /// Throws ContractError naming the offending field.
  void validate() const;
};

/// ||U^T U - I||_F^2 + ||V V^T - I||_F^2 (V is stored r x d2, so its rows
/// are the right singular vectors).
template <typename T>
Tensor<T> ortho_penalty(const Tensor<T>& U, const Tensor<T>& V);

template <typename T>
struct SkillLoss {
  Tensor<T> total;
  Tensor<T> task;   // mean over the batch of per-example answer NLL
  Tensor<T> ortho;  // summed over every triplet
};

template <typename T>
SkillLoss<T> skill_loss(const TransformerWeights<T>& weights, const SkillAdapter<T>& skill,
                        std::span<const EncodedExample> batch, double gamma,
                        const ForwardOptions& options = {});

/// lambda, U, V -= lr * grad with gradients of pruned lambdas masked out.
/// Throws DivergenceError on a non-finite gradient.
template <typename T>
void sgd_step(SkillAdapter<T>& skill, double lr);

/// scores[triplet][p]; pruned positions hold -infinity.
struct ImportanceState {
  std::vector<std::vector<double>> scores;
};

/// S = |lambda_p g| + mean_q |U_qp g| + mean_q |V_pq g| from the gradients
/// currently stored on the adapter.
template <typename T>
ImportanceState importance_scores(const SkillAdapter<T>& skill);

/// Exponential smoothing of scores, dead entries stay at -infinity.
void smooth_importance(ImportanceState& running, const ImportanceState& fresh, double beta);

/// Cubic schedule from r_init * n_triplets at t0 down to r_target * n_triplets
/// at t1, clamped outside [t0, t1].
std::size_t budget(std::size_t t, const SkillTrainConfig& cfg, std::size_t n_triplets);

/// Keeps the global top-b alive entries by score, ties broken by (layer,
/// target order, p); the rest are marked dead with lambda = 0.
template <typename T>
void prune(SkillAdapter<T>& skill, const ImportanceState& scores, std::size_t b);

/// Whether step t (1-based) is a pruning step.
bool is_prune_step(std::size_t t, const SkillTrainConfig& cfg);

struct SkillLogRow {
  std::size_t step = 0;
  double task_loss = 0.0;
  double ortho_penalty = 0.0;
  std::size_t alive_count = 0;
  std::size_t budget = 0;  // budget applied by the most recent prune
};

template <typename T>
struct SkillTrainResult {
  SkillAdapter<T> skill;
  std::vector<SkillLogRow> log;
};

/// Trains one skill adapter on a frozen base. The base is never written.
template <typename T>
SkillTrainResult<T> train_skill(const TransformerWeights<T>& weights, const std::string& skill_id,
                                const Dataset& dataset, const SkillTrainConfig& cfg);

void write_skill_log_csv(const std::string& path, const std::vector<SkillLogRow>& log);

}  // namespace samdkif
