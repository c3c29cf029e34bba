#include "samdkif/cmaes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "samdkif/errors.hpp"

namespace samdkif {

bool jacobi_eigen(std::vector<double> a, std::size_t n, std::vector<double>& values,
                  std::vector<double>& vectors) {
  vectors.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    vectors[i * n + i] = 1.0;
  }
  bool converged = false;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0, total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        total += a[i * n + j] * a[i * n + j];
        if (i != j) {
          off += a[i * n + j] * a[i * n + j];
        }
      }
    }
    if (off <= 1e-30 * std::max(total, 1e-300)) {
      converged = true;
      break;
    }
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (std::abs(apq) < 1e-300) {
          continue;
        }
        const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = vectors[k * n + p], vkq = vectors[k * n + q];
          vectors[k * n + p] = c * vkp - s * vkq;
          vectors[k * n + q] = s * vkp + c * vkq;
        }
      }
    }
  }
  values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    values[i] = a[i * n + i];
  }
  return converged;
}

CmaEs::CmaEs(const CmaConfig& cfg) : n_(cfg.dim), rng_(cfg.seed) {
  if (n_ < 3 || n_ > 100) {
    throw ContractError("CMA-ES dimension must lie in [3, 100], got " + std::to_string(n_));
  }
  if (!(cfg.sigma0 >= 0.0)) {
    throw ContractError("CMA-ES sigma0 must be >= 0");
  }
  if (!cfg.mean0.empty() && cfg.mean0.size() != n_) {
    throw ContractError("CMA-ES mean0 has the wrong dimension");
  }
  const double n = static_cast<double>(n_);
  lambda_ = cfg.lambda != 0 ? cfg.lambda : 4 + static_cast<std::size_t>(std::floor(3.0 * std::log(n)));
  if (lambda_ < 2) {
    throw ContractError("CMA-ES population must be >= 2");
  }
  mu_ = cfg.mu != 0 ? cfg.mu : lambda_ / 2;
  if (mu_ == 0 || mu_ > lambda_) {
    throw ContractError("CMA-ES mu must lie in [1, lambda]");
  }
  weights_.resize(mu_);
  for (std::size_t i = 0; i < mu_; ++i) {
    weights_[i] = std::log(static_cast<double>(mu_) + 0.5) - std::log(static_cast<double>(i + 1));
  }
  const double wsum = std::accumulate(weights_.begin(), weights_.end(), 0.0);
  double w2 = 0.0;
  for (auto& w : weights_) {
    w /= wsum;
    w2 += w * w;
  }
  mu_eff_ = 1.0 / w2;

  c_sigma_ = (mu_eff_ + 2.0) / (n + mu_eff_ + 5.0);
  d_sigma_ = 1.0 + 2.0 * std::max(0.0, std::sqrt((mu_eff_ - 1.0) / (n + 1.0)) - 1.0) + c_sigma_;
  c_c_ = (4.0 + mu_eff_ / n) / (n + 4.0 + 2.0 * mu_eff_ / n);
  c1_ = 2.0 / ((n + 1.3) * (n + 1.3) + mu_eff_);
  c_mu_ = std::min(1.0 - c1_, 2.0 * (mu_eff_ - 2.0 + 1.0 / mu_eff_) / ((n + 2.0) * (n + 2.0) + mu_eff_));
  chi_n_ = std::sqrt(n) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));

  mean_ = cfg.mean0.empty() ? std::vector<double>(n_, 0.0) : cfg.mean0;
  sigma_ = cfg.sigma0;
  C_.assign(n_ * n_, 0.0);
  for (std::size_t i = 0; i < n_; ++i) {
    C_[i * n_ + i] = 1.0;
  }
  p_sigma_.assign(n_, 0.0);
  p_c_.assign(n_, 0.0);
  decompose();
}

void CmaEs::decompose() {
  // Enforce exact symmetry before decomposing.
  for (std::size_t i = 0; i < n_; ++i) {
    for (std::size_t j = i + 1; j < n_; ++j) {
      const double v = 0.5 * (C_[i * n_ + j] + C_[j * n_ + i]);
      C_[i * n_ + j] = v;
      C_[j * n_ + i] = v;
    }
  }
  std::vector<double> values, vectors;
  const bool ok = jacobi_eigen(C_, n_, values, vectors);
  bool finite = ok;
  for (const double v : values) {
    finite = finite && std::isfinite(v);
  }
  if (!finite) {
    had_reset_ = true;
    std::fill(C_.begin(), C_.end(), 0.0);
    for (std::size_t i = 0; i < n_; ++i) {
      C_[i * n_ + i] = 1.0;
    }
    values.assign(n_, 1.0);
    vectors = C_;
  }
  bool floored = false;
  for (auto& v : values) {
    if (v < kEigenFloor) {
      v = kEigenFloor;
      floored = true;
    }
  }
  B_ = vectors;
  eig_ = values;
  D_.resize(n_);
  for (std::size_t i = 0; i < n_; ++i) {
    D_[i] = std::sqrt(values[i]);
  }
  if (floored) {
    // Rebuild C = B diag(values) B^T so it is PD with the floor applied.
    for (std::size_t i = 0; i < n_; ++i) {
      for (std::size_t j = 0; j < n_; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < n_; ++k) {
          s += B_[i * n_ + k] * values[k] * B_[j * n_ + k];
        }
        C_[i * n_ + j] = s;
      }
    }
  }
}

double CmaEs::min_eigenvalue() const { return *std::min_element(eig_.begin(), eig_.end()); }
double CmaEs::max_eigenvalue() const { return *std::max_element(eig_.begin(), eig_.end()); }

std::vector<std::vector<double>> CmaEs::ask() {
  std::vector<std::vector<double>> out(lambda_, std::vector<double>(n_));
  std::vector<double> z(n_), dz(n_);
  for (auto& x : out) {
    for (std::size_t i = 0; i < n_; ++i) {
      z[i] = rng_.normal();
      dz[i] = D_[i] * z[i];
    }
    for (std::size_t i = 0; i < n_; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < n_; ++k) {
        s += B_[i * n_ + k] * dz[k];
      }
      x[i] = mean_[i] + sigma_ * s;
    }
  }
  return out;
}

void CmaEs::tell(const std::vector<std::vector<double>>& candidates,
                 const std::vector<double>& fitness) {
  if (candidates.size() != lambda_ || fitness.size() != lambda_) {
    throw ContractError("CMA-ES tell: expected " + std::to_string(lambda_) +
                        " candidates and fitness values");
  }
  evals_ += lambda_;
  ++generation_;
  std::vector<std::size_t> order(lambda_);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto key = [&](std::size_t i) {
    return std::isnan(fitness[i]) ? std::numeric_limits<double>::infinity() : fitness[i];
  };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double fa = key(a), fb = key(b);
    if (fa != fb) {
      return fa < fb;
    }
    // NaN ranks after a genuine +inf.
    return !std::isnan(fitness[a]) && std::isnan(fitness[b]);
  });
  if (!std::isnan(fitness[order[0]]) && fitness[order[0]] < best_f_) {
    best_f_ = fitness[order[0]];
    best_x_ = candidates[order[0]];
  }
  if (sigma_ == 0.0) {
    return;
  }

  const std::vector<double> old_mean = mean_;
  std::fill(mean_.begin(), mean_.end(), 0.0);
  for (std::size_t k = 0; k < mu_; ++k) {
    const auto& x = candidates[order[k]];
    for (std::size_t i = 0; i < n_; ++i) {
      mean_[i] += weights_[k] * x[i];
    }
  }
  std::vector<double> y_w(n_);
  for (std::size_t i = 0; i < n_; ++i) {
    y_w[i] = (mean_[i] - old_mean[i]) / sigma_;
  }
  // C^{-1/2} y_w = B D^{-1} B^T y_w
  std::vector<double> t(n_, 0.0), c_inv_sqrt_y(n_, 0.0);
  for (std::size_t k = 0; k < n_; ++k) {
    double s = 0.0;
    for (std::size_t i = 0; i < n_; ++i) {
      s += B_[i * n_ + k] * y_w[i];
    }
    t[k] = s / D_[k];
  }
  for (std::size_t i = 0; i < n_; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < n_; ++k) {
      s += B_[i * n_ + k] * t[k];
    }
    c_inv_sqrt_y[i] = s;
  }
  const double cs = std::sqrt(c_sigma_ * (2.0 - c_sigma_) * mu_eff_);
  double ps_norm2 = 0.0;
  for (std::size_t i = 0; i < n_; ++i) {
    p_sigma_[i] = (1.0 - c_sigma_) * p_sigma_[i] + cs * c_inv_sqrt_y[i];
    ps_norm2 += p_sigma_[i] * p_sigma_[i];
  }
  const double ps_norm = std::sqrt(ps_norm2);
  const double denom =
      std::sqrt(1.0 - std::pow(1.0 - c_sigma_, 2.0 * static_cast<double>(generation_)));
  const double n = static_cast<double>(n_);
  const bool h_sigma = ps_norm / denom < (1.4 + 2.0 / (n + 1.0)) * chi_n_;
  const double cc = std::sqrt(c_c_ * (2.0 - c_c_) * mu_eff_);
  for (std::size_t i = 0; i < n_; ++i) {
    p_c_[i] = (1.0 - c_c_) * p_c_[i] + (h_sigma ? cc * y_w[i] : 0.0);
  }
  const double delta_h = h_sigma ? 0.0 : c_c_ * (2.0 - c_c_);
  std::vector<std::vector<double>> ys(mu_, std::vector<double>(n_));
  for (std::size_t k = 0; k < mu_; ++k) {
    for (std::size_t i = 0; i < n_; ++i) {
      ys[k][i] = (candidates[order[k]][i] - old_mean[i]) / sigma_;
    }
  }
  for (std::size_t i = 0; i < n_; ++i) {
    for (std::size_t j = 0; j < n_; ++j) {
      double rank_mu = 0.0;
      for (std::size_t k = 0; k < mu_; ++k) {
        rank_mu += weights_[k] * ys[k][i] * ys[k][j];
      }
      C_[i * n_ + j] = (1.0 - c1_ - c_mu_) * C_[i * n_ + j] +
                       c1_ * (p_c_[i] * p_c_[j] + delta_h * C_[i * n_ + j]) + c_mu_ * rank_mu;
    }
  }
  sigma_ *= std::exp((c_sigma_ / d_sigma_) * (ps_norm / chi_n_ - 1.0));
  decompose();
}

CmaResult minimize(const std::function<double(const std::vector<double>&)>& f,
                   const CmaConfig& cfg) {
  CmaEs es(cfg);
  CmaResult result;
  while (es.evaluations() + es.lambda() <= cfg.max_evals) {
    const auto xs = es.ask();
    std::vector<double> fs(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
      fs[i] = f(xs[i]);
    }
    es.tell(xs, fs);
    result.history.push_back({es.generation(), es.evaluations(), es.best_f(), es.sigma(),
                              es.min_eigenvalue(), es.max_eigenvalue()});
    if (es.best_f() <= cfg.target_fitness) {
      break;
    }
  }
  result.x_best = es.best_x().empty() ? es.mean() : es.best_x();
  result.f_best = es.best_f();
  return result;
}

void write_cma_history_csv(const std::string& path, const std::vector<CmaHistoryRow>& history) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw FormatError("cannot open '" + path + "' for writing");
  }
  out << "generation,evals,f_best,sigma,min_eig,max_eig\n";
  out.precision(12);
  for (const auto& r : history) {
    out << r.generation << ',' << r.evals << ',' << r.f_best << ',' << r.sigma << ',' << r.min_eig
        << ',' << r.max_eig << '\n';
  }
}

template <typename T>
FewShotResult<T> adapt_fewshot(const TransformerWeights<T>& weights, const SkillLibrary<T>& lib,
                               const Dataset& adaptation, const FewShotConfig& cfg) {
  lib.validate();
  if (adaptation.empty()) {
    throw ContractError("adapt_fewshot: empty adaptation set");
  }
  NoGradScope<T> no_grad;
  const std::size_t K = lib.size();
  FewShotResult<T> result{RouterParams<T>::uniform(RouterMode::kStatic, lib.ids(), 0, cfg.tau), {}, 0};
  if (K == 1) {
    return result;  // R = [1] for every parameter value
  }
  std::vector<EncodedExample> encoded;
  for (const auto& ex : adaptation) {
    encoded.push_back(encode_example(ex));
  }
  const Tensor<T> no_features;
  auto fitness = [&](const std::vector<double>& x) {
    RouterParams<T> p = RouterParams<T>::uniform(RouterMode::kStatic, lib.ids(), 0, cfg.tau);
    for (std::size_t i = 0; i < K; ++i) {
      p.logits[i] = static_cast<T>(x[i]);
      p.b[i] = static_cast<T>(x[K + i]);
    }
    const RouterOutput<T> g = gate(p, no_features);
    const AdapterSet<T> set = routed_delta(lib, g.R);
    double total = 0.0;
    for (const auto& ex : encoded) {
      total += static_cast<double>(nll_loss(forward(weights, &set, std::span<const int>(ex.ids)), ex).item());
    }
    return total / static_cast<double>(encoded.size());
  };
  CmaConfig cc;
  cc.dim = 2 * K;
  cc.sigma0 = cfg.sigma0;
  cc.max_evals = cfg.max_evals;
  cc.seed = cfg.seed;
  const CmaResult r = minimize(fitness, cc);
  for (std::size_t i = 0; i < K; ++i) {
    result.params.logits[i] = static_cast<T>(r.x_best[i]);
    result.params.b[i] = static_cast<T>(r.x_best[K + i]);
  }
  result.history = r.history;
  result.evaluations = r.history.empty() ? 0 : r.history.back().evals;
  return result;
}

template FewShotResult<float> adapt_fewshot<float>(const TransformerWeights<float>&,
                                                   const SkillLibrary<float>&, const Dataset&,
                                                   const FewShotConfig&);
template FewShotResult<double> adapt_fewshot<double>(const TransformerWeights<double>&,
                                                     const SkillLibrary<double>&, const Dataset&,
                                                     const FewShotConfig&);

}  // namespace samdkif
