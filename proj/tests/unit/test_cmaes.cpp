#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>

#include "samdkif/cmaes.hpp"
#include "samdkif/synthetic.hpp"
#include "support.hpp"

using namespace samdkif;

namespace {

double sphere(const std::vector<double>& x) {
  double s = 0;
  for (double v : x) s += v * v;
  return s;
}

double rosenbrock(const std::vector<double>& x) {
  double s = 0;
  for (std::size_t i = 0; i + 1 < x.size(); ++i) {
    s += 100.0 * std::pow(x[i + 1] - x[i] * x[i], 2) + std::pow(1.0 - x[i], 2);
  }
  return s;
}

CmaConfig config(std::size_t n, double sigma0, std::size_t evals, std::uint64_t seed = 1) {
  CmaConfig c;
  c.dim = n;
  c.sigma0 = sigma0;
  c.max_evals = evals;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(CmaEs, DefaultStrategyParameters) {
  CmaEs es(config(12, 0.5, 100));
  EXPECT_EQ(es.lambda(), 11u);
  EXPECT_EQ(es.mu(), 5u);
  const auto& w = es.weights();
  ASSERT_EQ(w.size(), 5u);
  EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-14);
  for (std::size_t i = 1; i < w.size(); ++i) EXPECT_LT(w[i], w[i - 1]);
  double sq = 0;
  for (double v : w) sq += v * v;
  EXPECT_NEAR(es.mu_eff(), 1.0 / sq, 1e-12);
  CmaEs small(config(3, 0.5, 100));
  EXPECT_EQ(small.lambda(), 7u);  // 4 + floor(3 ln 3)
  EXPECT_EQ(small.mu(), 3u);
}

TEST(CmaEs, DimensionBounds) {
  EXPECT_THROW(CmaEs(config(2, 0.5, 10)), ContractError);
  EXPECT_THROW(CmaEs(config(101, 0.5, 10)), ContractError);
  EXPECT_NO_THROW(CmaEs(config(3, 0.5, 10)));
  EXPECT_NO_THROW(CmaEs(config(100, 0.5, 10)));
  EXPECT_THROW(CmaEs(config(4, -1.0, 10)), ContractError);
}

TEST(CmaEs, SphereTwelve) {
  auto cfg = config(12, 0.5, 6000);
  cfg.mean0.assign(12, 1.0);
  const auto r = minimize(sphere, cfg);
  EXPECT_LT(r.f_best, 1e-10);
  EXPECT_LE(r.history.back().evals, 6000u);
}

TEST(CmaEs, RosenbrockSix) {
  auto cfg = config(6, 0.5, 30000);
  const auto r = minimize(rosenbrock, cfg);
  EXPECT_LT(r.f_best, 1e-6);
  EXPECT_LE(r.history.back().evals, 30000u);
}

TEST(CmaEs, BestSoFarNeverIncreases) {
  auto cfg = config(8, 1.0, 2000, 3);
  cfg.mean0.assign(8, 0.5);
  const auto r = minimize(rosenbrock, cfg);
  ASSERT_FALSE(r.history.empty());
  for (std::size_t i = 1; i < r.history.size(); ++i) {
    EXPECT_LE(r.history[i].f_best, r.history[i - 1].f_best);
    EXPECT_GT(r.history[i].evals, r.history[i - 1].evals);
    EXPECT_GE(r.history[i].min_eig, CmaEs::kEigenFloor);
  }
}

TEST(CmaEs, StopsAtTarget) {
  auto cfg = config(5, 0.5, 100000);
  cfg.mean0.assign(5, 1.0);
  cfg.target_fitness = 1e-3;
  const auto r = minimize(sphere, cfg);
  EXPECT_LE(r.f_best, 1e-3);
  EXPECT_LT(r.history.back().evals, 5000u);
}

// The update is translation equivariant: feeding the same candidates moved
// by a fixed vector moves the mean by that vector and leaves sigma and C
// alone. Sampling itself is only invariant in distribution (rounding can
// rotate the eigenbasis of a near-degenerate C), so the shifted problem is
// also checked end to end.
TEST(CmaEs, TranslationInvariance) {
  const std::size_t n = 6;
  std::vector<double> shift{3, -2, 0.5, 10, -7, 1};
  auto a = config(n, 0.7, 0, 11);
  a.mean0.assign(n, 0.0);
  auto b = a;
  b.mean0 = shift;
  CmaEs ea(a), eb(b);
  for (int g = 0; g < 80; ++g) {
    auto ca = ea.ask();
    std::vector<std::vector<double>> cb = ca;
    std::vector<double> f;
    for (std::size_t k = 0; k < ca.size(); ++k) {
      f.push_back(rosenbrock(ca[k]));
      for (std::size_t i = 0; i < n; ++i) cb[k][i] += shift[i];
    }
    ea.tell(ca, f);
    eb.tell(cb, f);
  }
  for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(eb.mean()[i] - shift[i], ea.mean()[i], 1e-9);
  EXPECT_NEAR(ea.sigma(), eb.sigma(), 1e-9 * ea.sigma());
  for (std::size_t i = 0; i < n * n; ++i) EXPECT_NEAR(ea.covariance()[i], eb.covariance()[i], 1e-9);

  auto shifted = config(n, 0.5, 30000);
  shifted.mean0 = shift;
  const auto r = minimize(
      [&](const std::vector<double>& x) {
        std::vector<double> y = x;
        for (std::size_t i = 0; i < n; ++i) y[i] -= shift[i];
        return rosenbrock(y);
      },
      shifted);
  EXPECT_LT(r.f_best, 1e-6);
}

// Only ranks enter the update, so a strictly increasing transform of f
// leaves the state bit-identical.
TEST(CmaEs, MonotoneTransformInvariance) {
  auto cfg = config(5, 0.5, 0, 21);
  cfg.mean0.assign(5, 2.0);
  CmaEs ea(cfg), eb(cfg);
  for (int g = 0; g < 50; ++g) {
    auto ca = ea.ask();
    auto cb = eb.ask();
    ASSERT_EQ(ca, cb);
    std::vector<double> fa, fb;
    for (const auto& x : ca) {
      fa.push_back(sphere(x));
      fb.push_back(std::exp(std::sqrt(sphere(x))) * 5.0 - 3.0);
    }
    ea.tell(ca, fa);
    eb.tell(cb, fb);
  }
  EXPECT_EQ(ea.mean(), eb.mean());
  EXPECT_EQ(ea.sigma(), eb.sigma());
  EXPECT_EQ(ea.covariance(), eb.covariance());
}

TEST(CmaEs, NanFitnessRanksWorst) {
  auto cfg = config(4, 0.5, 0, 5);
  cfg.mean0.assign(4, 1.0);
  CmaEs es(cfg);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  double start = sphere(es.mean());
  for (int g = 0; g < 40; ++g) {
    auto c = es.ask();
    std::vector<double> f;
    for (std::size_t k = 0; k < c.size(); ++k) f.push_back(k % 3 == 0 ? nan : sphere(c[k]));
    es.tell(c, f);
  }
  EXPECT_TRUE(std::isfinite(es.best_f()));
  EXPECT_LT(sphere(es.mean()), start);
  for (double v : es.mean()) EXPECT_TRUE(std::isfinite(v));
}

TEST(CmaEs, ZeroSigmaSamplesTheMean) {
  auto cfg = config(3, 0.0, 0);
  cfg.mean0 = {1, 2, 3};
  CmaEs es(cfg);
  for (int g = 0; g < 3; ++g) {
    auto c = es.ask();
    for (const auto& x : c) EXPECT_EQ(x, cfg.mean0);
    std::vector<double> f(c.size(), 14.0);
    es.tell(c, f);
  }
  EXPECT_EQ(es.mean(), cfg.mean0);
  EXPECT_EQ(es.best_f(), 14.0);
}

TEST(CmaEs, TellRejectsWrongPopulation) {
  CmaEs es(config(3, 0.5, 0));
  auto c = es.ask();
  c.pop_back();
  EXPECT_THROW(es.tell(c, std::vector<double>(c.size(), 0.0)), ContractError);
}

TEST(Jacobi, DiagonalizesSymmetricMatrix) {
  std::vector<double> a{4, 1, 2, 1, 3, 0, 2, 0, 5};
  std::vector<double> vals, vecs;
  ASSERT_TRUE(jacobi_eigen(a, 3, vals, vecs));
  // A v = lambda v for each column
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t i = 0; i < 3; ++i) {
      double av = 0;
      for (std::size_t j = 0; j < 3; ++j) av += a[i * 3 + j] * vecs[j * 3 + k];
      EXPECT_NEAR(av, vals[k] * vecs[i * 3 + k], 1e-12);
    }
  }
  EXPECT_NEAR(vals[0] + vals[1] + vals[2], 12.0, 1e-12);
}

TEST(FewShot, NeverCallsBackward) {
  const auto c = test_support::tiny_config(16, 1);
  Rng rng(1);
  auto w = TransformerWeights<float>::init(c, rng, 0.2);
  std::vector<SkillAdapter<float>> skills;
  for (int i = 0; i < 3; ++i) {
    auto s = SkillAdapter<float>::init("s" + std::to_string(i), c, 2, rng, 0.3);
    for (auto& tr : s.triplets)
      for (auto& l : tr.lambda.values()) l = static_cast<float>(rng.normal(0.0, 1.0));
    skills.push_back(s);
  }
  auto lib = SkillLibrary<float>::make(c, skills);
  auto data = gen_skill_corpus(SkillKind::kCopy, 8, 2);
  FewShotConfig fc;
  fc.max_evals = 60;
  Tape<float>::reset_backward_calls();
  auto res = adapt_fewshot(w, lib, data, fc);
  EXPECT_EQ(Tape<float>::backward_calls(), 0u);
  EXPECT_LE(res.evaluations, 60u);
  EXPECT_EQ(res.params.k(), 3u);
  for (std::size_t i = 1; i < res.history.size(); ++i)
    EXPECT_LE(res.history[i].f_best, res.history[i - 1].f_best);
  auto one = SkillLibrary<float>::make(c, {skills[0]});
  auto single = adapt_fewshot(w, one, data, fc);
  EXPECT_EQ(single.evaluations, 0u);
  EXPECT_EQ(single.params.k(), 1u);
}
