#include "samdkif/optim.hpp"

#include <cmath>
#include <string>

namespace samdkif {

template <typename T>
void check_finite_grads(const std::vector<Tensor<T>>& params, const char* what) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) {
      continue;
    }
    for (const T g : params[i].grad()) {
      if (!std::isfinite(g)) {
        throw DivergenceError(std::string(what) + ": non-finite gradient in parameter " +
                              std::to_string(i));
      }
    }
  }
}

template <typename T>
void gradient_step(const std::vector<Tensor<T>>& params, double lr) {
  check_finite_grads(params, "gradient_step");
  for (auto p : params) {
    if (!p.has_grad()) {
      continue;
    }
    auto g = p.grad();
    auto d = p.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      d[i] -= static_cast<T>(lr) * g[i];
    }
  }
}

template <typename T>
Adam<T>::Adam(std::vector<Tensor<T>> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

template <typename T>
void Adam<T>::step() {
  check_finite_grads(params_, "adam");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto p = params_[k];
    if (!p.has_grad()) {
      continue;
    }
    auto g = p.grad();
    auto d = p.data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double gi = g[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
      d[i] -= static_cast<T>(lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_));
    }
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto p : params_) {
    p.zero_grad();
  }
}

template void check_finite_grads<float>(const std::vector<Tensor<float>>&, const char*);
template void check_finite_grads<double>(const std::vector<Tensor<double>>&, const char*);
template void gradient_step<float>(const std::vector<Tensor<float>>&, double);
template void gradient_step<double>(const std::vector<Tensor<double>>&, double);
template class Adam<float>;
template class Adam<double>;

}  // namespace samdkif
