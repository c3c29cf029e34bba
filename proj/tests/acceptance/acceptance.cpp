// Acceptance run: one PASS/FAIL line per criterion. Criteria 5-8 come from
// the repro suite on configs/repro.json, which reuses the base model and
// skills already present in the output directory.
//
//   acceptance [--config PATH] [--out DIR] [--smoke PATH]

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "samdkif/adalora.hpp"
#include "samdkif/cmaes.hpp"
#include "samdkif/experiment.hpp"
#include "samdkif/fusion.hpp"
#include "samdkif/router.hpp"
#include "samdkif/synthetic.hpp"
#include "support.hpp"

using namespace samdkif;
namespace fs = std::filesystem;

namespace {

struct Line {
  int id;
  bool ok;
  std::string detail;
};

std::string num(double v) {
  std::ostringstream o;
  o.precision(3);
  o << v;
  return o.str();
}

Line gradient_check() {
  const auto c = test_support::tiny_config(16, 2);
  Rng rng(11);
  auto w = TransformerWeights<double>::init(c, rng, 0.2);
  std::vector<SkillAdapter<double>> skills;
  for (int i = 0; i < 3; ++i) {
    auto s = SkillAdapter<double>::init("s" + std::to_string(i), c, 2, rng, 0.3);
    for (auto& tr : s.triplets)
      for (auto& l : tr.lambda.values()) l = rng.normal(0.0, 0.5);
    skills.push_back(std::move(s));
  }
  Rng data(12);
  std::vector<EncodedExample> batch;
  for (int i = 0; i < 2; ++i) batch.push_back(encode_example(skill_example(SkillKind::kCopy, data)));

  auto& skill = skills[0];
  skill.set_requires_grad(true);
  const double stage1 = test_support::worst_relative_error(
      [&] {
        NoGradScope<double> ng;
        return skill_loss(w, skill, batch, 0.3).total.item();
      },
      [&] {
        Tape<double> tape;
        TapeScope<double> scope(tape);
        tape.backward(skill_loss(w, skill, batch, 0.3).total);
      },
      skill.parameters());
  skill.set_requires_grad(false);

  auto lib = SkillLibrary<double>::make(c, skills);
  const auto feats = skill_features(lib);
  double stage2 = 0;
  for (auto mode : {RouterMode::kStatic, RouterMode::kFeature}) {
    auto p = RouterParams<double>::init(mode, lib.ids(), lib.feature_dim(), rng, 0.5, 0.8);
    p.set_requires_grad(true);
    stage2 = std::max(stage2, test_support::worst_relative_error(
                                  [&] {
                                    NoGradScope<double> ng;
                                    return adaptation_loss(w, lib, p, feats, batch, 0.2).total.item();
                                  },
                                  [&] {
                                    Tape<double> tape;
                                    TapeScope<double> scope(tape);
                                    tape.backward(adaptation_loss(w, lib, p, feats, batch, 0.2).total);
                                  },
                                  p.trainable()));
  }
  return {1, stage1 <= 1e-4 && stage2 <= 1e-4,
          "stage1 rel err " + num(stage1) + ", stage2 rel err " + num(stage2)};
}

Line pruning() {
  ModelConfig c = test_support::tiny_config(8, 2);
  c.d_ffn = 8;
  Rng rng(2024);
  std::size_t mismatches = 0;
  for (int inst = 0; inst < 1000; ++inst) {
    const std::size_t r = 1 + rng.below(4);
    Rng init(static_cast<std::uint64_t>(inst));
    auto s = SkillAdapter<float>::init("p", c, r, init);
    ImportanceState st;
    for (auto& tr : s.triplets) {
      std::vector<double> sc(r);
      for (std::size_t p = 0; p < r; ++p) {
        tr.lambda[p] = 1.0f;
        if (rng.bernoulli(0.2)) {
          tr.alive[p] = 0;
          tr.lambda[p] = 0.0f;
        }
        sc[p] = tr.alive[p] ? static_cast<double>(rng.below(5)) : -std::numeric_limits<double>::infinity();
      }
      st.scores.push_back(sc);
    }
    std::vector<std::tuple<double, std::size_t, std::size_t>> order;
    for (std::size_t j = 0; j < s.triplets.size(); ++j)
      for (std::size_t p = 0; p < r; ++p)
        if (s.triplets[j].alive[p]) order.emplace_back(-st.scores[j][p], j, p);
    std::sort(order.begin(), order.end());
    const std::size_t b = rng.below(order.size() + 2);
    std::vector<std::vector<std::uint8_t>> expect(s.triplets.size(), std::vector<std::uint8_t>(r, 0));
    for (std::size_t i = 0; i < std::min(b, order.size()); ++i)
      expect[std::get<1>(order[i])][std::get<2>(order[i])] = 1;
    prune(s, st, b);
    for (std::size_t j = 0; j < s.triplets.size(); ++j) mismatches += s.triplets[j].alive != expect[j];
  }

  const auto mc = test_support::tiny_config(16, 2);
  Rng wr(5);
  auto w = TransformerWeights<float>::init(mc, wr, 0.1);
  SkillTrainConfig cfg;
  cfg.r_init = 4;
  cfg.r_target = 2;
  cfg.t0 = 10;
  cfg.t1 = 50;
  cfg.total_steps = 60;
  cfg.prune_interval = 5;
  cfg.batch_size = 4;
  auto res = train_skill(w, "copy", gen_skill_corpus(SkillKind::kCopy, 64, 3), cfg);
  std::size_t violations = 0;
  for (const auto& row : res.log) violations += row.alive_count > row.budget;
  const std::size_t target = cfg.r_target * res.skill.n_triplets();
  const bool ok = mismatches == 0 && violations == 0 && res.skill.alive_count() == target;
  return {2, ok,
          "oracle mismatches " + std::to_string(mismatches) + "/1000, budget violations " +
              std::to_string(violations) + ", final alive " + std::to_string(res.skill.alive_count()) +
              " of target " + std::to_string(target)};
}

template <typename T>
double fused_vs_routed(std::uint64_t seed) {
  Rng rng(seed);
  const auto c = test_support::tiny_config(16, 1 + rng.below(2));
  auto base = TransformerWeights<T>::init(c, rng, 0.2);
  std::vector<SkillAdapter<T>> skills;
  const std::size_t K = 1 + rng.below(4);
  for (std::size_t i = 0; i < K; ++i) {
    auto s = SkillAdapter<T>::init("s" + std::to_string(i), c, 1 + rng.below(3), rng, 0.3);
    for (auto& tr : s.triplets)
      for (auto& l : tr.lambda.values()) l = static_cast<T>(rng.normal(0.0, 1.0));
    skills.push_back(std::move(s));
  }
  auto lib = SkillLibrary<T>::make(c, skills);
  std::vector<double> R(K);
  double sum = 0;
  for (auto& v : R) sum += (v = -std::log(1.0 - rng.uniform()));
  for (auto& v : R) v /= sum;
  const auto fused = fuse(base, lib, R);
  std::vector<T> rv(R.begin(), R.end());
  const auto routed = routed_delta(lib, Tensor<T>::vector(rv));
  std::vector<int> ids{kBos};
  for (int i = 0; i < 10; ++i) ids.push_back(static_cast<int>('a' + rng.below(26)));
  const auto a = forward<T>(fused.weights, nullptr, ids);
  const auto b = forward<T>(base, &routed, ids);
  double worst = 0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    const double scale = std::max(1.0, std::abs(static_cast<double>(b[j])));
    worst = std::max(worst, std::abs(static_cast<double>(a[j]) - static_cast<double>(b[j])) / scale);
  }
  return worst;
}

Line fusion() {
  double f32 = 0, f64 = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    f32 = std::max(f32, fused_vs_routed<float>(s));
    f64 = std::max(f64, fused_vs_routed<double>(s));
  }
  return {3, f32 <= 1e-5 && f64 <= 1e-10, "max diff f32 " + num(f32) + ", f64 " + num(f64)};
}

double sphere(const std::vector<double>& x) {
  double s = 0;
  for (double v : x) s += v * v;
  return s;
}

double rosenbrock(const std::vector<double>& x) {
  double s = 0;
  for (std::size_t i = 0; i + 1 < x.size(); ++i)
    s += 100.0 * std::pow(x[i + 1] - x[i] * x[i], 2) + std::pow(1.0 - x[i], 2);
  return s;
}

// Evaluations spent when f_best first dropped below `target`; 0 if never.
std::size_t first_hit(const std::vector<CmaHistoryRow>& history, double target) {
  for (const auto& row : history) {
    if (row.f_best < target) return row.evals;
  }
  return 0;
}

Line cma() {
  CmaConfig sc;
  sc.dim = 12;
  sc.mean0.assign(12, 1.0);
  sc.max_evals = 6000;
  const auto rs = minimize(sphere, sc);
  CmaConfig rc;
  rc.dim = 6;
  rc.max_evals = 30000;
  const auto rr = minimize(rosenbrock, rc);

  // Update equivariance under translation.
  const std::vector<double> shift{3, -2, 0.5, 10, -7, 1};
  CmaConfig a;
  a.dim = 6;
  a.sigma0 = 0.7;
  a.seed = 11;
  CmaConfig b = a;
  b.mean0 = shift;
  CmaEs ea(a), eb(b);
  for (int g = 0; g < 80; ++g) {
    auto ca = ea.ask();
    auto cb = ca;
    std::vector<double> f;
    for (std::size_t k = 0; k < ca.size(); ++k) {
      f.push_back(rosenbrock(ca[k]));
      for (std::size_t i = 0; i < 6; ++i) cb[k][i] += shift[i];
    }
    ea.tell(ca, f);
    eb.tell(cb, f);
  }
  double drift = std::abs(ea.sigma() - eb.sigma()) / ea.sigma();
  for (std::size_t i = 0; i < 6; ++i) drift = std::max(drift, std::abs(eb.mean()[i] - shift[i] - ea.mean()[i]));
  const bool translation = drift <= 1e-9;

  // Monotone transform of f leaves the state bit-identical.
  CmaConfig m;
  m.dim = 5;
  m.mean0.assign(5, 2.0);
  m.seed = 21;
  CmaEs ma(m), mb(m);
  for (int g = 0; g < 50; ++g) {
    auto x = ma.ask();
    auto y = mb.ask();
    std::vector<double> fa, fb;
    for (const auto& v : x) {
      fa.push_back(sphere(v));
      fb.push_back(std::exp(std::sqrt(sphere(v))) * 5.0 - 3.0);
    }
    ma.tell(x, fa);
    mb.tell(y, fb);
  }
  const bool monotone = ma.mean() == mb.mean() && ma.sigma() == mb.sigma() && ma.covariance() == mb.covariance();
  const std::size_t sphere_hit = first_hit(rs.history, 1e-10);
  const std::size_t rosen_hit = first_hit(rr.history, 1e-6);
  const bool ok = sphere_hit > 0 && sphere_hit <= 6000 && rosen_hit > 0 && rosen_hit <= 30000 &&
                  translation && monotone;
  auto hit = [](std::size_t e) { return e ? std::to_string(e) + " evals" : std::string("never"); };
  return {4, ok,
          "sphere < 1e-10 after " + hit(sphere_hit) + ", rosenbrock < 1e-6 after " + hit(rosen_hit) +
              ", translation " + (translation ? "ok" : "broken") + ", monotone " + (monotone ? "ok" : "broken")};
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Line reproducible(const std::string& smoke, const std::string& out) {
  std::string first;
  bool ok = true;
  for (int run = 0; run < 2; ++run) {
    auto cfg = load_run_config(smoke);
    cfg.out = out + "/smoke_" + std::to_string(run);
    fs::remove_all(cfg.out);
    cmd_repro_suite(cfg, false);
    const std::string bytes = slurp(cfg.out + "/summary.csv");
    ok = ok && !bytes.empty();
    if (run == 0) first = bytes;
    else ok = ok && bytes == first;
  }
  return {9, ok, "summary.csv " + std::to_string(first.size()) + " bytes, two fresh runs " +
                     (ok ? "identical" : "differ")};
}

}  // namespace

int main(int argc, char** argv) {
  std::string config = std::string(SAMDKIF_SOURCE_DIR) + "/configs/repro.json";
  std::string smoke = std::string(SAMDKIF_SOURCE_DIR) + "/configs/smoke.json";
  std::string out = "acceptance_runs";
  for (int i = 1; i + 1 < argc; i += 2) {
    if (!std::strcmp(argv[i], "--config")) config = argv[i + 1];
    else if (!std::strcmp(argv[i], "--out")) out = argv[i + 1];
    else if (!std::strcmp(argv[i], "--smoke")) smoke = argv[i + 1];
  }

  std::vector<Line> lines;
  auto report = [&](Line l) {
    std::cout << "criterion " << l.id << ": " << (l.ok ? "PASS" : "FAIL") << "  " << l.detail << std::endl;
    lines.push_back(std::move(l));
  };
  auto guarded = [&](int id, auto&& fn) {
    try {
      report(fn());
    } catch (const std::exception& e) {
      report({id, false, std::string("error: ") + e.what()});
    }
  };
  guarded(1, gradient_check);
  guarded(2, pruning);
  guarded(3, fusion);
  guarded(4, cma);

  try {
    auto cfg = load_run_config(config);
    cfg.out = out + "/repro";
    const auto suite = cmd_repro_suite(cfg, false, [](const std::string& s) { std::cerr << s << '\n'; });
    for (const auto& c : suite.criteria) report({c.id, c.passed, c.name + ": " + c.detail});
  } catch (const std::exception& e) {
    for (int id = 5; id <= 8; ++id) report({id, false, std::string("error: ") + e.what()});
  }

  guarded(9, [&] { return reproducible(smoke, out); });

  bool all = true;
  for (const auto& l : lines) all = all && l.ok;
  std::cout << (all ? "all criteria passed" : "some criteria failed") << std::endl;
  return all ? 0 : 1;
}
