#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "samdkif/model.hpp"
#include "samdkif/tensor.hpp"

namespace samdkif::test_support {

inline ModelConfig tiny_config(std::size_t d = 16, std::size_t layers = 2) {
  ModelConfig c;
  c.n_layers = layers;
  c.d_model = d;
  c.n_heads = 2;
  c.d_ffn = 2 * d;
  c.max_seq_len = 96;
  return c;
}

/// Largest |analytic - central difference| / max(1e-6, |a| + |fd|) over
/// every element of every tensor in `params`.
inline double worst_relative_error(const std::function<double()>& loss,
                                   const std::function<void()>& backward,
                                   std::vector<Tensor<double>> params, double h = 1e-6) {
  for (auto& p : params) {
    p.zero_grad();
  }
  backward();
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) {
    analytic.emplace_back(p.grad().begin(), p.grad().end());
  }
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double old = p[i];
      p[i] = old + h;
      const double up = loss();
      p[i] = old - h;
      const double down = loss();
      p[i] = old;
      const double fd = (up - down) / (2.0 * h);
      const double a = analytic[k][i];
      worst = std::max(worst, std::abs(a - fd) / std::max(1e-6, std::abs(a) + std::abs(fd)));
    }
  }
  return worst;
}

}  // namespace samdkif::test_support
