#include "samdkif/adapter.hpp"

#include <algorithm>

#include "json.hpp"
#include "samdkif/errors.hpp"

namespace samdkif {

template <typename T>
std::size_t AdapterTriplet<T>::alive_count() const {
  return static_cast<std::size_t>(std::count(alive.begin(), alive.end(), std::uint8_t{1}));
}

template <typename T>
Tensor<T> AdapterTriplet<T>::delta() const {
  const std::size_t d1 = U.rows(), r = rank(), d2 = V.cols();
  Tensor<T> out(Shape{d1, d2});
  std::vector<T> scaled(d1 * r);
  for (std::size_t i = 0; i < d1; ++i) {
    for (std::size_t p = 0; p < r; ++p) {
      scaled[i * r + p] = U[i * r + p] * lambda[p];
    }
  }
  kernels::gemm_nn(scaled.data(), V.data().data(), out.data().data(), d1, r, d2);
  return out;
}

template <typename T>
void AdapterTriplet<T>::enforce_mask() {
  for (std::size_t p = 0; p < alive.size(); ++p) {
    if (!alive[p]) {
      lambda[p] = T(0);
    }
  }
}

template <typename T>
SkillAdapter<T> SkillAdapter<T>::init(std::string skill_id, const ModelConfig& config,
                                      std::size_t rank, Rng& rng, double init_sd) {
  config.validate();
  if (rank == 0) {
    throw ContractError("adapter rank must be >= 1");
  }
  SkillAdapter out;
  out.skill_id = std::move(skill_id);
  out.config = config;
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    for (const Target t : kTargets) {
      const auto [d1, d2] = target_shape(config, t);
      if (rank > std::min(d1, d2)) {
        throw ContractError("adapter rank " + std::to_string(rank) + " exceeds min(d1, d2)");
      }
      AdapterTriplet<T> tr;
      tr.U = Tensor<T>::randn(Shape{d1, rank}, rng, init_sd);
      tr.lambda = Tensor<T>::zeros(Shape{rank});
      tr.V = Tensor<T>::randn(Shape{rank, d2}, rng, init_sd);
      tr.alive.assign(rank, 1);
      out.triplets.push_back(std::move(tr));
    }
  }
  return out;
}

template <typename T>
AdapterTriplet<T>& SkillAdapter<T>::triplet(std::size_t layer, Target target) {
  return triplets.at(layer * kTargetCount + static_cast<std::size_t>(target));
}

template <typename T>
const AdapterTriplet<T>& SkillAdapter<T>::triplet(std::size_t layer, Target target) const {
  return triplets.at(layer * kTargetCount + static_cast<std::size_t>(target));
}

template <typename T>
std::size_t SkillAdapter<T>::alive_count() const {
  std::size_t n = 0;
  for (const auto& t : triplets) {
    n += t.alive_count();
  }
  return n;
}

template <typename T>
std::size_t SkillAdapter<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : triplets) {
    n += t.U.size() + t.lambda.size() + t.V.size();
  }
  return n;
}

template <typename T>
std::vector<Tensor<T>> SkillAdapter<T>::parameters() const {
  std::vector<Tensor<T>> out;
  for (const auto& t : triplets) {
    out.push_back(t.U);
    out.push_back(t.lambda);
    out.push_back(t.V);
  }
  return out;
}

template <typename T>
void SkillAdapter<T>::set_requires_grad(bool flag) {
  for (auto& t : triplets) {
    t.U.set_requires_grad(flag);
    t.lambda.set_requires_grad(flag);
    t.V.set_requires_grad(flag);
  }
}

template <typename T>
SkillAdapter<T> SkillAdapter<T>::clone() const {
  SkillAdapter out;
  out.skill_id = skill_id;
  out.config = config;
  out.dropout_p = dropout_p;
  for (const auto& t : triplets) {
    out.triplets.push_back({t.U.clone(), t.lambda.clone(), t.V.clone(), t.alive});
  }
  return out;
}

template <typename T>
std::string SkillAdapter<T>::tensor_name(const std::string& skill_id, std::size_t layer,
                                         Target target, const std::string& factor) {
  return skill_id + "/L" + std::to_string(layer) + "/" + std::string(target_name(target)) + "/" +
         factor;
}

template <typename T>
Checkpoint SkillAdapter<T>::to_checkpoint() const {
  Checkpoint ck("adapter", config);
  nlohmann::json meta = {{"skill_id", skill_id},
                         {"dropout_p", dropout_p},
                         {"rank", triplets.empty() ? 0 : triplets[0].rank()}};
  ck.meta = meta.dump();
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    for (const Target t : kTargets) {
      const auto& tr = triplet(l, t);
      ck.put(tensor_name(skill_id, l, t, "U"), tr.U);
      ck.put(tensor_name(skill_id, l, t, "lambda"), tr.lambda);
      ck.put(tensor_name(skill_id, l, t, "V"), tr.V);
      ck.put_raw(tensor_name(skill_id, l, t, "alive"), DType::kU8, Shape{tr.alive.size()},
                 std::vector<double>(tr.alive.begin(), tr.alive.end()));
    }
  }
  return ck;
}


template <typename T>
SkillAdapter<T> SkillAdapter<T>::from_checkpoint(const Checkpoint& ck) {
  if (ck.kind != "adapter") {
    throw FormatError("expected an adapter checkpoint, found kind '" + ck.kind + "'");
  }
  SkillAdapter out;
  try {
    const auto meta = nlohmann::json::parse(ck.meta);
    out.skill_id = meta.at("skill_id").get<std::string>();
    out.dropout_p = meta.value("dropout_p", 0.0);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("adapter checkpoint meta: ") + e.what());
  }
  out.config = ck.config;
  for (std::size_t l = 0; l < ck.config.n_layers; ++l) {
    for (const Target t : kTargets) {
      AdapterTriplet<T> tr;
      tr.U = ck.get<T>(tensor_name(out.skill_id, l, t, "U"));
      tr.lambda = ck.get<T>(tensor_name(out.skill_id, l, t, "lambda"));
      tr.V = ck.get<T>(tensor_name(out.skill_id, l, t, "V"));
      const auto& alive = ck.entry(tensor_name(out.skill_id, l, t, "alive"));
      for (const double a : alive.values) {
        tr.alive.push_back(a != 0.0 ? 1 : 0);
      }
      const auto [d1, d2] = target_shape(ck.config, t);
      const std::size_t r = tr.lambda.size();
      if (tr.U.shape() != Shape{d1, r} || tr.V.shape() != Shape{r, d2} || tr.alive.size() != r) {
        throw LibraryError("adapter '" + out.skill_id + "' has inconsistent factor shapes at " +
                           tensor_name(out.skill_id, l, t, "*"));
      }
      out.triplets.push_back(std::move(tr));
    }
  }
  return out;
}

template <typename T>
AdapterSet<T> AdapterSet<T>::single(const SkillAdapter<T>& skill, T weight) {
  AdapterSet out;
  out.entries.push_back({&skill, Tensor<T>::scalar(weight)});
  return out;
}

template <typename T>
Tensor<T> AdapterSet<T>::apply(std::size_t layer, Target target, const Tensor<T>& x,
                               Rng* dropout_rng) const {
  Tensor<T> total;
  bool first = true;
  for (const auto& e : entries) {
    const AdapterTriplet<T>& tr = e.skill->triplet(layer, target);
    const Tensor<T> in =
        dropout_rng != nullptr ? dropout(x, e.skill->dropout_p, *dropout_rng, true) : x;
    Tensor<T> h = mul(matmul(in, tr.U), tr.lambda);
    h = mul(matmul(h, tr.V), e.weight);
    total = first ? h : add(total, h);
    first = false;
  }
  if (first) {
    throw ContractError("AdapterSet::apply on an empty set");
  }
  return total;
}

template struct AdapterTriplet<float>;
template struct AdapterTriplet<double>;
template class SkillAdapter<float>;
template class SkillAdapter<double>;
template struct AdapterSet<float>;
template struct AdapterSet<double>;

}  // namespace samdkif
