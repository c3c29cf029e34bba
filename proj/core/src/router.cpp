#include "samdkif/router.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "samdkif/errors.hpp"
#include "samdkif/optim.hpp"

namespace samdkif {

template <typename T>
SkillLibrary<T> SkillLibrary<T>::make(const ModelConfig& config, std::vector<SkillAdapter<T>> skills) {
  SkillLibrary lib{config, std::move(skills)};
  lib.validate();
  return lib;
}

template <typename T>
void SkillLibrary<T>::validate() const {
  if (skills.empty()) {
    throw LibraryError("skill library is empty");
  }
  for (const auto& s : skills) {
    if (s.triplets.size() != config.n_layers * kTargetCount) {
      throw LibraryError("skill '" + s.skill_id + "' has " + std::to_string(s.triplets.size()) +
                         " triplets, expected " + std::to_string(config.n_layers * kTargetCount));
    }
    for (std::size_t l = 0; l < config.n_layers; ++l) {
      for (const Target t : kTargets) {
        const auto& tr = s.triplet(l, t);
        const auto [d1, d2] = target_shape(config, t);
        if (tr.U.rows() != d1 || tr.V.cols() != d2 || tr.U.cols() != tr.rank() ||
            tr.V.rows() != tr.rank()) {
          throw LibraryError("skill '" + s.skill_id + "' layer " + std::to_string(l) + " target " +
                             std::string(target_name(t)) + " does not fit the base model");
        }
      }
    }
  }
}

template <typename T>
std::vector<std::string> SkillLibrary<T>::ids() const {
  std::vector<std::string> out;
  for (const auto& s : skills) {
    out.push_back(s.skill_id);
  }
  return out;
}

template <typename T>
Tensor<T> skill_features(const SkillLibrary<T>& lib) {
  lib.validate();
  const std::size_t K = lib.size(), F = lib.feature_dim();
  Tensor<T> out(Shape{K, F});
  for (std::size_t i = 0; i < K; ++i) {
    for (std::size_t j = 0; j < F; ++j) {
      const Tensor<T> d = lib.skills[i].triplets[j].delta();
      double ss = 0.0;
      for (const T v : d.data()) {
        ss += static_cast<double>(v) * static_cast<double>(v);
      }
      out[i * F + j] = static_cast<T>(std::sqrt(ss));
    }
  }
  return out;
}

std::string router_mode_name(RouterMode mode) {
  return mode == RouterMode::kStatic ? "static" : "feature";
}

RouterMode parse_router_mode(const std::string& name) {
  if (name == "static") {
    return RouterMode::kStatic;
  }
  if (name == "feature") {
    return RouterMode::kFeature;
  }
  throw ContractError("unknown router mode '" + name + "'");
}

template <typename T>
RouterParams<T> RouterParams<T>::init(RouterMode mode, std::vector<std::string> skill_ids,
                                      std::size_t feature_dim, Rng& rng, double init_sd,
                                      double tau) {
  if (skill_ids.empty()) {
    throw ContractError("router needs at least one skill");
  }
  if (!(tau > 0.0)) {
    throw ContractError("router temperature must be > 0");
  }
  RouterParams p;
  p.mode = mode;
  p.tau = tau;
  const std::size_t K = skill_ids.size();
  if (mode == RouterMode::kFeature) {
    p.A = Tensor<T>::randn(Shape{K, feature_dim}, rng, init_sd);
  } else {
    p.logits = Tensor<T>::randn(Shape{K}, rng, init_sd);
  }
  p.b = Tensor<T>::randn(Shape{K}, rng, init_sd);
  p.skill_ids = std::move(skill_ids);
  return p;
}

template <typename T>
RouterParams<T> RouterParams<T>::uniform(RouterMode mode, std::vector<std::string> skill_ids,
                                         std::size_t feature_dim, double tau) {
  Rng unused(0);
  return init(mode, std::move(skill_ids), feature_dim, unused, 0.0, tau);
}

template <typename T>
std::vector<Tensor<T>> RouterParams<T>::trainable() const {
  return mode == RouterMode::kFeature ? std::vector<Tensor<T>>{A, b}
                                      : std::vector<Tensor<T>>{logits, b};
}

template <typename T>
std::size_t RouterParams<T>::trainable_count() const {
  std::size_t n = 0;
  for (const auto& t : trainable()) {
    n += t.size();
  }
  return n;
}

template <typename T>
void RouterParams<T>::set_requires_grad(bool flag) {
  for (auto t : trainable()) {
    t.set_requires_grad(flag);
  }
}

template <typename T>
RouterParams<T> RouterParams<T>::clone() const {
  RouterParams out = *this;
  if (mode == RouterMode::kFeature) {
    out.A = A.clone();
  } else {
    out.logits = logits.clone();
  }
  out.b = b.clone();
  return out;
}

template <typename T>
Checkpoint RouterParams<T>::to_checkpoint(const ModelConfig& config) const {
  Checkpoint ck("router", config);
  nlohmann::ordered_json meta;
  meta["mode"] = router_mode_name(mode);
  meta["K"] = k();
  meta["skill_ids"] = skill_ids;
  meta["tau"] = tau;
  ck.meta = meta.dump();
  if (mode == RouterMode::kFeature) {
    ck.put("A", A);
  } else {
    ck.put("logits", logits);
  }
  ck.put("b", b);
  ck.put("tau", Tensor<T>::vector({static_cast<T>(tau)}));
  return ck;
}

template <typename T>
RouterParams<T> RouterParams<T>::from_checkpoint(const Checkpoint& ck) {
  if (ck.kind != "router") {
    throw FormatError("expected a router checkpoint, found kind '" + ck.kind + "'");
  }
  RouterParams p;
  try {
    const auto meta = nlohmann::json::parse(ck.meta);
    p.mode = parse_router_mode(meta.at("mode").get<std::string>());
    p.skill_ids = meta.at("skill_ids").get<std::vector<std::string>>();
    p.tau = meta.at("tau").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("router checkpoint meta: ") + e.what());
  }
  if (p.mode == RouterMode::kFeature) {
    p.A = ck.get<T>("A");
  } else {
    p.logits = ck.get<T>("logits");
  }
  p.b = ck.get<T>("b");
  if (p.b.size() != p.skill_ids.size()) {
    throw FormatError("router checkpoint: K mismatch between skill ids and b");
  }
  return p;
}

template <typename T>
RouterOutput<T> gate(const RouterParams<T>& params, const Tensor<T>& features) {
  RouterOutput<T> out;
  if (params.mode == RouterMode::kFeature) {
    if (features.shape() != params.A.shape()) {
      throw ShapeError("gate: features " + shape_string(features.shape()) + " vs A " +
                       shape_string(params.A.shape()));
    }
    const Tensor<T> ones = Tensor<T>::ones(Shape{features.cols(), 1});
    const Tensor<T> rowdot = transpose(matmul(mul(params.A, features), ones));  // 1 x K
    out.E = add(rowdot, params.b);
  } else {
    out.E = add(params.logits, params.b);
  }
  out.R = softmax_rows(scale(out.E, static_cast<T>(1.0 / params.tau)));
  return out;
}

template <typename T>
AdapterSet<T> routed_delta(const SkillLibrary<T>& lib, const Tensor<T>& R) {
  if (R.size() != lib.size()) {
    throw ShapeError("routed_delta: R has " + std::to_string(R.size()) + " entries for " +
                     std::to_string(lib.size()) + " skills");
  }
  AdapterSet<T> set;
  for (std::size_t i = 0; i < lib.size(); ++i) {
    set.entries.push_back({&lib.skills[i], select(R, i)});
  }
  return set;
}

template <typename T>
AdaptationLoss<T> adaptation_loss(const TransformerWeights<T>& weights, const SkillLibrary<T>& lib,
                                  const RouterParams<T>& params, const Tensor<T>& features,
                                  std::span<const EncodedExample> batch, double gamma1) {
  if (batch.empty()) {
    throw ContractError("adaptation_loss: empty batch");
  }
  const RouterOutput<T> g = gate(params, features);
  const AdapterSet<T> set = routed_delta(lib, g.R);
  std::vector<Tensor<T>> terms;
  for (const auto& ex : batch) {
    terms.push_back(nll_loss(forward(weights, &set, std::span<const int>(ex.ids)), ex));
  }
  AdaptationLoss<T> out;
  out.task = scale(add_n(terms), T(1) / static_cast<T>(batch.size()));
  out.reg = sum_squares(params.mode == RouterMode::kFeature ? params.A : params.logits);
  out.total = gamma1 == 0.0 ? out.task : add(out.task, scale(out.reg, static_cast<T>(gamma1)));
  return out;
}

void RouterTrainConfig::validate() const {
  if (!(tau > 0.0)) throw ContractError("router config: tau must be > 0");
  if (gamma1 < 0.0) throw ContractError("router config: gamma1 must be >= 0");
  if (lr < 0.0) throw ContractError("router config: lr must be >= 0");
  if (batch_size == 0) throw ContractError("router config: batch_size must be >= 1");
}

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (const double x : p) {
    if (x > 0.0) {
      h -= x * std::log(x);
    }
  }
  return h;
}

std::size_t argmax(std::span<const double> p) {
  return static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
}

template <typename T>
std::vector<double> to_doubles(const Tensor<T>& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

template <typename T>
RouterTrainResult<T> adapt_normal(const TransformerWeights<T>& weights, const SkillLibrary<T>& lib,
                                  const Dataset& adaptation, const RouterTrainConfig& cfg) {
  cfg.validate();
  lib.validate();
  if (adaptation.empty()) {
    throw ContractError("adapt_normal: empty adaptation set");
  }
  Rng root(cfg.seed);
  Rng init_rng = root.fork(1);
  Rng batch_rng = root.fork(2);
  const Tensor<T> features =
      cfg.mode == RouterMode::kFeature ? skill_features(lib) : Tensor<T>();
  RouterTrainResult<T> result{
      RouterParams<T>::init(cfg.mode, lib.ids(), lib.feature_dim(), init_rng, cfg.init_sd, cfg.tau),
      {}};
  RouterParams<T>& params = result.params;
  params.set_requires_grad(true);
  const std::vector<Tensor<T>> trainable = params.trainable();

  std::vector<EncodedExample> encoded;
  for (const auto& ex : adaptation) {
    encoded.push_back(encode_example(ex));
  }
  const bool full = encoded.size() <= cfg.full_batch_limit;

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    std::vector<EncodedExample> sampled;
    if (!full) {
      for (std::size_t i = 0; i < cfg.batch_size; ++i) {
        sampled.push_back(encoded[static_cast<std::size_t>(batch_rng.below(encoded.size()))]);
      }
    }
    const std::span<const EncodedExample> batch =
        full ? std::span<const EncodedExample>(encoded) : std::span<const EncodedExample>(sampled);
    for (auto p : trainable) {
      p.zero_grad();
    }
    Tape<T> tape;
    AdaptationLoss<T> loss;
    RouterOutput<T> g;
    {
      TapeScope<T> scope(tape);
      loss = adaptation_loss(weights, lib, params, features, batch, cfg.gamma1);
    }
    const double value = static_cast<double>(loss.total.item());
    if (!std::isfinite(value)) {
      throw DivergenceError("adapt_normal: loss became non-finite at step " + std::to_string(step));
    }
    tape.backward(loss.total);
    {
      NoGradScope<T> no_grad;
      g = gate(params, features);
    }
    const std::vector<double> R = to_doubles(g.R);
    result.log.push_back({step, static_cast<double>(loss.task.item()),
                          static_cast<double>(loss.reg.item()), entropy(R), argmax(R)});
    gradient_step(trainable, cfg.lr);
  }
  params.set_requires_grad(false);
  for (auto p : trainable) {
    p.storage().grad.clear();
  }
  return result;
}

void write_router_log_csv(const std::string& path, const std::vector<RouterLogRow>& log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw FormatError("cannot open '" + path + "' for writing");
  }
  out << "step,L_task,L_r,entropy,argmax\n";
  out.precision(9);
  for (const auto& r : log) {
    out << r.step << ',' << r.task_loss << ',' << r.reg << ',' << r.entropy << ',' << r.argmax
        << '\n';
  }
}

#define SAMDKIF_INSTANTIATE(T)                                                                   \
  template struct SkillLibrary<T>;                                                               \
  template Tensor<T> skill_features<T>(const SkillLibrary<T>&);                                  \
  template struct RouterParams<T>;                                                               \
  template RouterOutput<T> gate<T>(const RouterParams<T>&, const Tensor<T>&);                    \
  template AdapterSet<T> routed_delta<T>(const SkillLibrary<T>&, const Tensor<T>&);              \
  template AdaptationLoss<T> adaptation_loss<T>(                                                 \
      const TransformerWeights<T>&, const SkillLibrary<T>&, const RouterParams<T>&,              \
      const Tensor<T>&, std::span<const EncodedExample>, double);                                \
  template RouterTrainResult<T> adapt_normal<T>(const TransformerWeights<T>&,                    \
                                                const SkillLibrary<T>&, const Dataset&,          \
                                                const RouterTrainConfig&);                       \
  template std::vector<double> to_doubles<T>(const Tensor<T>&);

SAMDKIF_INSTANTIATE(float)
SAMDKIF_INSTANTIATE(double)

#undef SAMDKIF_INSTANTIATE

}  // namespace samdkif
