#pragma once

// (mu/mu_w, lambda)-CMA-ES with the usual default strategy parameters, plus
// the few-shot router search built on it.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "samdkif/rng.hpp"
#include "samdkif/router.hpp"

namespace samdkif {

struct CmaConfig {
  std::size_t dim = 0;
  std::size_t lambda = 0;  // 0: 4 + floor(3 ln n)
  std::size_t mu = 0;      // 0: floor(lambda / 2)
  std::vector<double> mean0;  // empty: zeros
  double sigma0 = 0.5;
  std::size_t max_evals = 3000;
  double target_fitness = -std::numeric_limits<double>::infinity();
  std::uint64_t seed = 1;
};

/// Symmetric eigendecomposition by cyclic Jacobi rotations. On return
/// `values` holds the eigenvalues and the columns of `vectors` (row-major
/// n x n) the matching eigenvectors. Returns false if it did not converge.
bool jacobi_eigen(std::vector<double> a, std::size_t n, std::vector<double>& values,
                  std::vector<double>& vectors);

class CmaEs {
 public:
  static constexpr double kEigenFloor = 1e-14;

  /// Throws ContractError unless 3 <= dim <= 100 and sigma0 >= 0.
  explicit CmaEs(const CmaConfig& cfg);

  /// lambda candidates m + sigma * B * D * z, z ~ N(0, I).
  std::vector<std::vector<double>> ask();

  /// Minimization. NaN fitness ranks worst. Updates mean, paths, C and sigma.
  void tell(const std::vector<std::vector<double>>& candidates, const std::vector<double>& fitness);

  std::size_t dim() const { return n_; }
  std::size_t lambda() const { return lambda_; }
  std::size_t mu() const { return mu_; }
  const std::vector<double>& weights() const { return weights_; }
  double mu_eff() const { return mu_eff_; }

  const std::vector<double>& mean() const { return mean_; }
  double sigma() const { return sigma_; }
  const std::vector<double>& covariance() const { return C_; }
  double min_eigenvalue() const;
  double max_eigenvalue() const;
  std::size_t generation() const { return generation_; }
  std::size_t evaluations() const { return evals_; }

  const std::vector<double>& best_x() const { return best_x_; }
  double best_f() const { return best_f_; }

  /// Set when an eigendecomposition failed and C was reset to I.
  bool had_reset() const { return had_reset_; }

 private:
  void decompose();

  std::size_t n_;
  std::size_t lambda_;
  std::size_t mu_;
  std::vector<double> weights_;
  double mu_eff_;
  double c_sigma_, d_sigma_, c_c_, c1_, c_mu_, chi_n_;

  std::vector<double> mean_;
  double sigma_;
  std::vector<double> C_;      // n x n
  std::vector<double> B_;      // eigenvectors (columns)
  std::vector<double> D_;      // sqrt of eigenvalues
  std::vector<double> eig_;    // eigenvalues
  std::vector<double> p_sigma_;
  std::vector<double> p_c_;
  std::size_t generation_ = 0;
  std::size_t evals_ = 0;
  std::vector<double> best_x_;
  double best_f_ = std::numeric_limits<double>::infinity();
  bool had_reset_ = false;
  Rng rng_;
};

struct CmaHistoryRow {
  std::size_t generation = 0;
  std::size_t evals = 0;
  double f_best = 0.0;  // best so far
  double sigma = 0.0;
  double min_eig = 0.0;
  double max_eig = 0.0;
};

struct CmaResult {
  std::vector<double> x_best;
  double f_best = std::numeric_limits<double>::infinity();
  std::vector<CmaHistoryRow> history;
};

/// Ask/tell until max_evals or target_fitness is reached.
CmaResult minimize(const std::function<double(const std::vector<double>&)>& f,
                   const CmaConfig& cfg);

void write_cma_history_csv(const std::string& path, const std::vector<CmaHistoryRow>& history);

struct FewShotConfig {
  double tau = 1.0;
  double sigma0 = 0.5;
  std::size_t max_evals = 3000;
  std::uint64_t seed = 1;
};

template <typename T>
struct FewShotResult {
  RouterParams<T> params;
  std::vector<CmaHistoryRow> history;
  std::size_t evaluations = 0;
};

/// Static-mode router search over x = (logits, b) in R^{2K}. Fitness is
/// the mean per-example answer NLL on the adaptation set. Never records a
/// tape. K = 1 returns the zero router without searching.
template <typename T>
FewShotResult<T> adapt_fewshot(const TransformerWeights<T>& weights,
                               const SkillLibrary<T>& library, const Dataset& adaptation,
                               const FewShotConfig& cfg);

}  // namespace samdkif
