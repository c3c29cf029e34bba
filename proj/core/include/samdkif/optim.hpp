#pragma once

#include <cstddef>
#include <vector>

#include "samdkif/tensor.hpp"

namespace samdkif {

/// Plain gradient descent: p -= lr * grad. Throws DivergenceError on a
/// non-finite gradient.
template <typename T>
void gradient_step(const std::vector<Tensor<T>>& params, double lr);

/// Adam with bias correction.
template <typename T>
class Adam {
 public:
  explicit Adam(std::vector<Tensor<T>> params, double lr = 1e-3, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8);

  void step();
  void zero_grad();
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  double lr_;
  double beta1_;
  double beta2_;
  double eps_;
  std::size_t t_ = 0;
};

/// Throws DivergenceError naming `what` when any gradient entry is NaN/Inf.
template <typename T>
void check_finite_grads(const std::vector<Tensor<T>>& params, const char* what);

}  // namespace samdkif
