#include "samdkif/adalora.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "samdkif/errors.hpp"
#include "samdkif/optim.hpp"

namespace samdkif {

void SkillTrainConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ContractError("skill config: " + field + " " + why);
  };
  if (r_init == 0) fail("r_init", "must be >= 1");
  if (r_target > r_init) fail("r_target", "must not exceed r_init");
  if (gamma < 0) fail("gamma", "must be >= 0");
  if (!(t0 < t1)) fail("t0", "must be < t1");
  if (t1 > total_steps) fail("t1", "must be <= total_steps");
  if (lr < 0) fail("lr", "must be >= 0");
  if (batch_size == 0) fail("batch_size", "must be >= 1");
  if (dropout_p < 0 || dropout_p >= 1) fail("dropout_p", "must lie in [0, 1)");
  if (prune_interval == 0) fail("prune_interval", "must be >= 1");
  if (ema_beta < 0 || ema_beta >= 1) fail("ema_beta", "must lie in [0, 1)");
  if (optimizer != "adam" && optimizer != "sgd") fail("optimizer", "must be adam or sgd");
}

template <typename T>
Tensor<T> ortho_penalty(const Tensor<T>& U, const Tensor<T>& V) {
  const std::size_t r = U.cols();
  if (V.rows() != r) {
    throw ShapeError("ortho_penalty: U " + shape_string(U.shape()) + " and V " +
                     shape_string(V.shape()) + " disagree on rank");
  }
  const Tensor<T> eye = Tensor<T>::identity(r);
  const Tensor<T> gu = sub(matmul(transpose(U), U), eye);
  const Tensor<T> gv = sub(matmul(V, transpose(V)), eye);
  return add(sum_squares(gu), sum_squares(gv));
}

template <typename T>
SkillLoss<T> skill_loss(const TransformerWeights<T>& weights, const SkillAdapter<T>& skill,
                        std::span<const EncodedExample> batch, double gamma,
                        const ForwardOptions& options) {
  if (batch.empty()) {
    throw ContractError("skill_loss: empty batch");
  }
  const AdapterSet<T> set = AdapterSet<T>::single(skill);
  std::vector<Tensor<T>> terms;
  terms.reserve(batch.size());
  for (const auto& ex : batch) {
    terms.push_back(nll_loss(forward(weights, &set, std::span<const int>(ex.ids), options), ex));
  }
  SkillLoss<T> out;
  out.task = scale(add_n(terms), T(1) / static_cast<T>(batch.size()));
  std::vector<Tensor<T>> pens;
  for (const auto& tr : skill.triplets) {
    pens.push_back(ortho_penalty(tr.U, tr.V));
  }
  out.ortho = add_n(pens);
  out.total = gamma == 0.0 ? out.task : add(out.task, scale(out.ortho, static_cast<T>(gamma)));
  return out;
}

namespace {

template <typename T>
void mask_dead_gradients(SkillAdapter<T>& skill) {
  for (auto& tr : skill.triplets) {
    if (!tr.lambda.has_grad()) {
      continue;
    }
    auto g = tr.lambda.grad();
    for (std::size_t p = 0; p < tr.alive.size(); ++p) {
      if (!tr.alive[p]) {
        g[p] = T(0);
      }
    }
  }
}

}  // namespace

template <typename T>
void sgd_step(SkillAdapter<T>& skill, double lr) {
  mask_dead_gradients(skill);
  gradient_step(skill.parameters(), lr);
  for (auto& tr : skill.triplets) {
    tr.enforce_mask();
  }
}

template <typename T>
ImportanceState importance_scores(const SkillAdapter<T>& skill) {
  ImportanceState state;
  for (const auto& tr : skill.triplets) {
    const std::size_t r = tr.rank(), d1 = tr.U.rows(), d2 = tr.V.cols();
    std::vector<double> s(r, 0.0);
    const auto gl = tr.lambda.grad();
    const auto gu = tr.U.grad();
    const auto gv = tr.V.grad();
    for (std::size_t p = 0; p < r; ++p) {
      if (!tr.alive[p]) {
        s[p] = -std::numeric_limits<double>::infinity();
        continue;
      }
      double lam = 0.0, u = 0.0, v = 0.0;
      if (!gl.empty()) {
        lam = std::abs(static_cast<double>(tr.lambda[p]) * gl[p]);
      }
      if (!gu.empty()) {
        for (std::size_t q = 0; q < d1; ++q) {
          u += std::abs(static_cast<double>(tr.U[q * r + p]) * gu[q * r + p]);
        }
      }
      if (!gv.empty()) {
        for (std::size_t q = 0; q < d2; ++q) {
          v += std::abs(static_cast<double>(tr.V[p * d2 + q]) * gv[p * d2 + q]);
        }
      }
      s[p] = lam + u / static_cast<double>(d1) + v / static_cast<double>(d2);
    }
    state.scores.push_back(std::move(s));
  }
  return state;
}

void smooth_importance(ImportanceState& running, const ImportanceState& fresh, double beta) {
  if (running.scores.empty()) {
    running = fresh;
    return;
  }
  for (std::size_t j = 0; j < fresh.scores.size(); ++j) {
    for (std::size_t p = 0; p < fresh.scores[j].size(); ++p) {
      const double f = fresh.scores[j][p];
      double& r = running.scores[j][p];
      r = std::isinf(f) ? f : beta * r + (1.0 - beta) * f;
    }
  }
}

std::size_t budget(std::size_t t, const SkillTrainConfig& cfg, std::size_t n_triplets) {
  const std::size_t b_init = cfg.r_init * n_triplets;
  const std::size_t b_final = cfg.r_target * n_triplets;
  if (t <= cfg.t0) {
    return b_init;
  }
  if (t >= cfg.t1) {
    return b_final;
  }
  const double frac = 1.0 - static_cast<double>(t - cfg.t0) / static_cast<double>(cfg.t1 - cfg.t0);
  return b_final +
         static_cast<std::size_t>(std::floor(static_cast<double>(b_init - b_final) * frac * frac * frac));
}

bool is_prune_step(std::size_t t, const SkillTrainConfig& cfg) {
  return t >= cfg.t0 && t <= cfg.t1 && ((t - cfg.t0) % cfg.prune_interval == 0 || t == cfg.t1);
}

template <typename T>
void prune(SkillAdapter<T>& skill, const ImportanceState& scores, std::size_t b) {
  struct Entry {
    double score;
    std::size_t triplet;
    std::size_t p;
  };
  std::vector<Entry> alive;
  for (std::size_t j = 0; j < skill.triplets.size(); ++j) {
    const auto& tr = skill.triplets[j];
    if (scores.scores.size() <= j || scores.scores[j].size() != tr.rank()) {
      throw ShapeError("prune: importance scores do not match the adapter layout");
    }
    for (std::size_t p = 0; p < tr.rank(); ++p) {
      if (tr.alive[p]) {
        alive.push_back({scores.scores[j][p], j, p});
      }
    }
  }
  if (b >= alive.size()) {
    return;
  }
  // Entries are generated in (layer, target, p) order, so a stable sort on
  // the score alone yields the documented tie-break.
  std::stable_sort(alive.begin(), alive.end(),
                   [](const Entry& x, const Entry& y) { return x.score > y.score; });
  for (std::size_t i = b; i < alive.size(); ++i) {
    auto& tr = skill.triplets[alive[i].triplet];
    tr.alive[alive[i].p] = 0;
    tr.lambda[alive[i].p] = T(0);
  }
}

template <typename T>
SkillTrainResult<T> train_skill(const TransformerWeights<T>& weights, const std::string& skill_id,
                                const Dataset& dataset, const SkillTrainConfig& cfg) {
  cfg.validate();
  if (dataset.empty() && cfg.total_steps > 0) {
    throw ContractError("train_skill: empty dataset for skill '" + skill_id + "'");
  }
  Rng root(cfg.seed);
  Rng init_rng = root.fork(1);
  Rng batch_rng = root.fork(2);
  Rng drop_rng = root.fork(3);

  SkillTrainResult<T> result{
      SkillAdapter<T>::init(skill_id, weights.config, cfg.r_init, init_rng, cfg.init_sd), {}};
  SkillAdapter<T>& skill = result.skill;
  skill.dropout_p = cfg.dropout_p;
  skill.set_requires_grad(true);

  std::vector<EncodedExample> encoded;
  encoded.reserve(dataset.size());
  for (const auto& ex : dataset) {
    encoded.push_back(encode_example(ex));
  }

  const std::vector<Tensor<T>> params = skill.parameters();
  Adam<T> adam(params, cfg.lr);
  ImportanceState running;
  SkillAdapter<T> last_good = skill.clone();
  const ForwardOptions options{cfg.dropout_p > 0.0, &drop_rng};
  // Budget of the most recent prune; b_init until the first one.
  std::size_t enforced = budget(0, cfg, skill.n_triplets());

  for (std::size_t t = 1; t <= cfg.total_steps; ++t) {
    std::vector<EncodedExample> batch;
    batch.reserve(cfg.batch_size);
    for (std::size_t i = 0; i < cfg.batch_size; ++i) {
      batch.push_back(encoded[static_cast<std::size_t>(batch_rng.below(encoded.size()))]);
    }
    for (auto p : params) {
      p.zero_grad();
    }
    Tape<T> tape;
    SkillLoss<T> loss;
    {
      TapeScope<T> scope(tape);
      loss = skill_loss(weights, skill, std::span<const EncodedExample>(batch), cfg.gamma, options);
    }
    const double value = static_cast<double>(loss.total.item());
    try {
      if (!std::isfinite(value)) {
        throw DivergenceError("train_skill(" + skill_id + "): loss became non-finite at step " +
                              std::to_string(t));
      }
      tape.backward(loss.total);
      mask_dead_gradients(skill);
      check_finite_grads(params, "train_skill");
    } catch (const DivergenceError& e) {
      if (!cfg.divergence_checkpoint.empty()) {
        last_good.to_checkpoint().save(cfg.divergence_checkpoint);
        throw DivergenceError(std::string(e.what()) + "; last good adapter saved to " +
                              cfg.divergence_checkpoint);
      }
      throw;
    }

    const ImportanceState fresh = importance_scores(skill);
    if (cfg.importance_ema) {
      smooth_importance(running, fresh, cfg.ema_beta);
    }
    if (cfg.optimizer == "sgd") {
      gradient_step(params, cfg.lr);
    } else {
      adam.step();
    }
    for (auto& tr : skill.triplets) {
      tr.enforce_mask();
    }
    if (is_prune_step(t, cfg)) {
      enforced = budget(t, cfg, skill.n_triplets());
      prune(skill, cfg.importance_ema ? running : fresh, enforced);
    }
    result.log.push_back({t, static_cast<double>(loss.task.item()),
                          static_cast<double>(loss.ortho.item()), skill.alive_count(), enforced});
    if (t % cfg.prune_interval == 0) {
      last_good = skill.clone();
    }
  }
  skill.set_requires_grad(false);
  for (auto p : params) {
    p.storage().grad.clear();
  }
  return result;
}

void write_skill_log_csv(const std::string& path, const std::vector<SkillLogRow>& log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw FormatError("cannot open '" + path + "' for writing");
  }
  out << "step,task_loss,ortho_penalty,alive_count,budget\n";
  out.precision(9);
  for (const auto& row : log) {
    out << row.step << ',' << row.task_loss << ',' << row.ortho_penalty << ',' << row.alive_count
        << ',' << row.budget << '\n';
  }
}

#define SAMDKIF_INSTANTIATE(T)                                                                   \
  template Tensor<T> ortho_penalty<T>(const Tensor<T>&, const Tensor<T>&);                       \
  template SkillLoss<T> skill_loss<T>(const TransformerWeights<T>&, const SkillAdapter<T>&,      \
                                      std::span<const EncodedExample>, double,                   \
                                      const ForwardOptions&);                                    \
  template void sgd_step<T>(SkillAdapter<T>&, double);                                           \
  template ImportanceState importance_scores<T>(const SkillAdapter<T>&);                         \
  template void prune<T>(SkillAdapter<T>&, const ImportanceState&, std::size_t);                 \
  template SkillTrainResult<T> train_skill<T>(const TransformerWeights<T>&, const std::string&,  \
                                              const Dataset&, const SkillTrainConfig&);

SAMDKIF_INSTANTIATE(float)
SAMDKIF_INSTANTIATE(double)

#undef SAMDKIF_INSTANTIATE

}  // namespace samdkif
