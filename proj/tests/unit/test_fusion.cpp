#include <gtest/gtest.h>

#include <cmath>

#include "samdkif/fusion.hpp"
#include "samdkif/synthetic.hpp"
#include "support.hpp"

using namespace samdkif;
using samdkif::test_support::tiny_config;

namespace {

template <typename T>
SkillLibrary<T> random_library(const ModelConfig& c, std::size_t K, Rng& rng) {
  std::vector<SkillAdapter<T>> skills;
  for (std::size_t i = 0; i < K; ++i) {
    auto s = SkillAdapter<T>::init("s" + std::to_string(i), c, 1 + rng.below(3), rng, 0.3);
    for (auto& tr : s.triplets) {
      for (std::size_t p = 0; p < tr.rank(); ++p) {
        tr.lambda[p] = static_cast<T>(rng.normal(0.0, 1.0));
        if (rng.bernoulli(0.2)) {
          tr.alive[p] = 0;
          tr.lambda[p] = T(0);
        }
      }
    }
    skills.push_back(std::move(s));
  }
  return SkillLibrary<T>::make(c, std::move(skills));
}

std::vector<double> random_simplex(std::size_t K, Rng& rng) {
  std::vector<double> r(K);
  double s = 0;
  for (auto& v : r) s += (v = -std::log(1.0 - rng.uniform()));
  for (auto& v : r) v /= s;
  return r;
}

// Largest |fused - routed| over the logits of one prompt, relative to the
// logit scale.
template <typename T>
double fused_vs_routed(std::uint64_t seed) {
  Rng rng(seed);
  const auto c = tiny_config(16, 1 + rng.below(2));
  auto base = TransformerWeights<T>::init(c, rng, 0.2);
  auto lib = random_library<T>(c, 1 + rng.below(4), rng);
  const auto R = random_simplex(lib.size(), rng);
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

}  // namespace

TEST(Fuse, MatchesRoutingOnHundredTriplesFloat) {
  double worst = 0;
  for (std::uint64_t s = 0; s < 100; ++s) worst = std::max(worst, fused_vs_routed<float>(s));
  EXPECT_LE(worst, 1e-5);
}

TEST(Fuse, MatchesRoutingOnHundredTriplesDouble) {
  double worst = 0;
  for (std::uint64_t s = 0; s < 100; ++s) worst = std::max(worst, fused_vs_routed<double>(s));
  EXPECT_LE(worst, 1e-10);
}

TEST(Fuse, ZeroAdaptersGiveBaseLogitsExactly) {
  const auto c = tiny_config();
  Rng rng(1);
  auto base = TransformerWeights<float>::init(c, rng, 0.2);
  auto s = SkillAdapter<float>::init("z", c, 3, rng, 0.5);  // lambda = 0
  auto lib = SkillLibrary<float>::make(c, {s, s.clone()});
  std::vector<double> R{0.3, 0.7};
  const auto fused = fuse(base, lib, R);
  EXPECT_TRUE(fused.weights.bit_identical(base));
  std::vector<int> ids{kBos, 'q', kSep};
  EXPECT_EQ(forward<float>(fused.weights, nullptr, ids).values(), forward<float>(base, nullptr, ids).values());
}

TEST(Fuse, OneHotRecoversSingleAdapter) {
  const auto c = tiny_config();
  Rng rng(2);
  auto base = TransformerWeights<double>::init(c, rng, 0.2);
  auto lib = random_library<double>(c, 3, rng);
  std::vector<int> ids{kBos, 'o', 'n', 'e', kSep};
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<double> R(3, 0.0);
    R[i] = 1.0;
    const auto fused = fuse(base, lib, R);
    const auto single = AdapterSet<double>::single(lib.skills[i]);
    const auto a = forward<double>(fused.weights, nullptr, ids);
    const auto b = forward<double>(base, &single, ids);
    for (std::size_t j = 0; j < a.size(); ++j) ASSERT_NEAR(a[j], b[j], 1e-6);
  }
}

TEST(Fuse, TwiceIsBitIdentical) {
  const auto c = tiny_config();
  Rng rng(3);
  auto base = TransformerWeights<float>::init(c, rng, 0.2);
  auto lib = random_library<float>(c, 4, rng);
  const auto R = random_simplex(4, rng);
  const auto a = fuse(base, lib, R, "b0", 0.5).to_checkpoint().serialize();
  const auto b = fuse(base, lib, R, "b0", 0.5).to_checkpoint().serialize();
  EXPECT_EQ(a, b);
  EXPECT_FALSE(fuse(base, lib, R).weights.parameters()[0].requires_grad());
}

TEST(Fuse, ProvenanceRoundTrip) {
  const auto c = tiny_config();
  Rng rng(4);
  auto base = TransformerWeights<float>::init(c, rng, 0.2);
  auto lib = random_library<float>(c, 2, rng);
  std::vector<double> R{0.25, 0.75};
  const auto f = fuse(base, lib, R, "my-base", 0.8);
  const auto back = FusedModel<float>::from_checkpoint(f.to_checkpoint());
  EXPECT_EQ(back.provenance.base_id, "my-base");
  EXPECT_EQ(back.provenance.skill_ids, lib.ids());
  EXPECT_EQ(back.provenance.R, R);
  EXPECT_EQ(back.provenance.tau, 0.8);
  EXPECT_TRUE(back.weights.bit_identical(f.weights));
}

TEST(Fuse, RejectsBadWeights) {
  const auto c = tiny_config();
  Rng rng(5);
  auto base = TransformerWeights<float>::init(c, rng, 0.2);
  auto lib = random_library<float>(c, 2, rng);
  EXPECT_THROW(fuse(base, lib, std::vector<double>{1.0}), LibraryError);
  EXPECT_THROW(fuse(base, lib, std::vector<double>{0.5, 0.6}), ContractError);
  EXPECT_THROW(fuse(base, lib, std::vector<double>{1.5, -0.5}), ContractError);
  EXPECT_THROW(fuse(base, lib, std::vector<double>{std::nan(""), 1.0}), ContractError);
  EXPECT_NO_THROW(fuse(base, lib, std::vector<double>{0.5, 0.5 + 5e-6}));
  auto other = random_library<float>(tiny_config(16, 1), 2, rng);
  EXPECT_THROW(fuse(base, other, std::vector<double>{0.5, 0.5}), LibraryError);
}

TEST(Metrics, EchoModelScoresOne) {
  Rng rng(6);
  auto data = gen_skill_corpus(SkillKind::kSpanExtract, 50, 7);
  EvalReport rep;
  for (std::size_t i = 0; i < data.size(); ++i) rep.records.push_back(score_example(i, data[i].answer, data[i].answer));
  rep = aggregate(rep);
  EXPECT_EQ(rep.accuracy, 1.0);
  EXPECT_EQ(rep.exact_match, 1.0);
  EXPECT_EQ(rep.micro_f1, 1.0);
  EXPECT_EQ(rep.n, 50u);
  EXPECT_FALSE(rep.auc.has_value());
}

TEST(Metrics, NormalizationAndOverlap) {
  const auto r = score_example(0, "  Red. ", "red");
  EXPECT_TRUE(r.correct);
  EXPECT_FALSE(r.exact);
  EXPECT_EQ(token_overlap("a b b c", "b b b d"), 2u);
  EXPECT_EQ(token_count("  x,  y  "), 2u);
  EvalReport rep;
  rep.records = {score_example(0, "a b", "a c"), score_example(1, "d", "d e f")};
  rep = aggregate(rep);
  // overlap 2, predicted 3, gold 5
  EXPECT_NEAR(rep.micro_f1, 2.0 * (2.0 / 3) * (2.0 / 5) / (2.0 / 3 + 2.0 / 5), 1e-15);
  EXPECT_EQ(rep.accuracy, 0.0);
}

TEST(Metrics, AucOracle) {
  std::vector<double> s{0.9, 0.8, 0.7, 0.6};
  std::vector<std::uint8_t> perfect{1, 1, 0, 0}, inverse{0, 0, 1, 1}, mixed{1, 0, 1, 0};
  EXPECT_EQ(*roc_auc(s, perfect), 1.0);
  EXPECT_EQ(*roc_auc(s, inverse), 0.0);
  EXPECT_EQ(*roc_auc(s, mixed), 0.75);
  std::vector<double> tied{0.5, 0.5, 0.5, 0.5};
  EXPECT_EQ(*roc_auc(tied, mixed), 0.5);
  std::vector<std::uint8_t> one_class{1, 1, 1, 1};
  EXPECT_FALSE(roc_auc(s, one_class).has_value());
}

// Zero weights make every next-token distribution uniform, so the positive
// probability depends only on the label lengths and is the same for every
// example.
TEST(Metrics, ConstantModelAucIsHalf) {
  const auto c = tiny_config();
  Rng rng(8);
  auto w = TransformerWeights<float>::init(c, rng, 0.0);
  auto task = gen_downstream_task(DownstreamKind::kBinaryOutcome, 40, 9);
  const auto rep = evaluate<float>(w, nullptr, task.data, task.spec, 0, 4);
  ASSERT_TRUE(rep.auc.has_value());
  EXPECT_NEAR(*rep.auc, 0.5, 1e-12);
  EXPECT_EQ(rep.metric, Metric::kAuc);
  EXPECT_EQ(rep.value(), *rep.auc);
}

TEST(Metrics, AggregatesRecomputeFromRecords) {
  const auto c = tiny_config();
  Rng rng(10);
  auto w = TransformerWeights<float>::init(c, rng, 0.3);
  auto task = gen_downstream_task(DownstreamKind::kBinaryOutcome, 20, 11);
  const auto rep = evaluate<float>(w, nullptr, task.data, task.spec, 3, 6);
  EXPECT_EQ(rep.seed, 3u);
  auto again = rep;
  again.accuracy = again.micro_f1 = -1;
  again.auc.reset();
  again = aggregate(again);
  EXPECT_EQ(again.accuracy, rep.accuracy);
  EXPECT_EQ(again.micro_f1, rep.micro_f1);
  EXPECT_EQ(again.auc, rep.auc);
  std::size_t correct = 0;
  for (const auto& r : rep.records) correct += r.correct;
  EXPECT_EQ(rep.accuracy, static_cast<double>(correct) / 20.0);
  // The JSON report carries the same records.
  const auto parsed = EvalReport::from_json(rep.to_json());
  EXPECT_EQ(parsed.records.size(), rep.records.size());
  EXPECT_EQ(aggregate(parsed).accuracy, rep.accuracy);
  EXPECT_EQ(parsed.task_id, rep.task_id);
}

TEST(Metrics, EmptyTestSetIsAnError) {
  const auto c = tiny_config();
  Rng rng(12);
  auto w = TransformerWeights<float>::init(c, rng);
  EXPECT_THROW(evaluate<float>(w, nullptr, Dataset{}, TaskSpec{}), ContractError);
  EXPECT_THROW(aggregate(EvalReport{}), ContractError);
}

TEST(Metrics, CsvRow) {
  EvalReport rep;
  rep.task_id = "t";
  rep.records = {score_example(0, "x", "x"), score_example(1, "x", "y")};
  rep.seed = 4;
  rep = aggregate(rep);
  EXPECT_EQ(rep.csv_row(), "t,accuracy,0.500000,4");
}
