#include "samdkif/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <utility>

#include "json.hpp"
#include "samdkif/errors.hpp"

namespace samdkif {

using nlohmann::ordered_json;

std::string Provenance::to_json() const {
  ordered_json j;
  j["base_id"] = base_id;
  j["skill_ids"] = skill_ids;
  j["R"] = R;
  j["tau"] = tau;
  return j.dump();
}

Provenance Provenance::from_json(const std::string& text) {
  try {
    const auto j = ordered_json::parse(text);
    Provenance p;
    p.base_id = j.at("base_id").get<std::string>();
    p.skill_ids = j.at("skill_ids").get<std::vector<std::string>>();
    p.R = j.at("R").get<std::vector<double>>();
    p.tau = j.at("tau").get<double>();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad provenance block: ") + e.what());
  }
}

template <typename T>
Checkpoint FusedModel<T>::to_checkpoint() const {
  Checkpoint ck = weights.to_checkpoint("fused");
  ck.meta = provenance.to_json();
  return ck;
}

template <typename T>
FusedModel<T> FusedModel<T>::from_checkpoint(const Checkpoint& checkpoint) {
  if (checkpoint.kind != "fused") {
    throw FormatError("expected a fused checkpoint, got kind '" + checkpoint.kind + "'");
  }
  return {TransformerWeights<T>::from_checkpoint(checkpoint), Provenance::from_json(checkpoint.meta)};
}

template <typename T>
FusedModel<T> fuse(const TransformerWeights<T>& base, const SkillLibrary<T>& lib,
                   std::span<const double> R, const std::string& base_id, double tau) {
  lib.validate();
  if (R.size() != lib.size()) {
    throw LibraryError("fuse: R has " + std::to_string(R.size()) + " entries for " +
                       std::to_string(lib.size()) + " skills");
  }
  if (lib.config.n_layers != base.config.n_layers || lib.config.d_model != base.config.d_model ||
      lib.config.d_ffn != base.config.d_ffn) {
    throw LibraryError("fuse: skill library does not match the base model shape");
  }
  double total = 0.0;
  for (const double r : R) {
    if (!(r >= -1e-5)) {
      throw ContractError("fuse: R has a negative or NaN entry");
    }
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-5) {
    throw ContractError("fuse: R sums to " + std::to_string(total) + ", not 1");
  }

  FusedModel<T> out{base.clone(), {base_id, lib.ids(), std::vector<double>(R.begin(), R.end()), tau}};
  for (std::size_t l = 0; l < base.config.n_layers; ++l) {
    for (const Target t : kTargets) {
      Tensor<T>& W = out.weights.layers[l].target(t);
      const std::size_t rows = W.rows(), cols = W.cols();
      std::vector<double> acc(rows * cols, 0.0);
      for (std::size_t i = 0; i < lib.size(); ++i) {
        if (R[i] == 0.0) {
          continue;
        }
        const auto& tr = lib.skills[i].triplet(l, t);
        const std::size_t r = tr.rank();
        for (std::size_t p = 0; p < r; ++p) {
          const double lam = static_cast<double>(tr.lambda[p]);
          if (!tr.alive[p] || lam == 0.0) {
            continue;
          }
          const double w = R[i] * lam;
          for (std::size_t a = 0; a < rows; ++a) {
            const double u = w * static_cast<double>(tr.U[a * r + p]);
            double* row = acc.data() + a * cols;
            const T* v = tr.V.data().data() + p * cols;
            for (std::size_t b = 0; b < cols; ++b) {
              row[b] += u * static_cast<double>(v[b]);
            }
          }
        }
      }
      for (std::size_t k = 0; k < acc.size(); ++k) {
        if (acc[k] != 0.0) {
          W[k] = static_cast<T>(static_cast<double>(W[k]) + acc[k]);
        }
      }
    }
  }
  out.weights.set_requires_grad(false);
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

namespace {

std::vector<std::string> tokens_of(const std::string& text) {
  std::istringstream in(normalize_answer(text));
  std::vector<std::string> out;
  std::string tok;
  while (in >> tok) {
    out.push_back(tok);
  }
  return out;
}

}  // namespace

std::size_t token_overlap(const std::string& prediction, const std::string& gold) {
  std::map<std::string, std::size_t> counts;
  for (const auto& t : tokens_of(gold)) {
    ++counts[t];
  }
  std::size_t overlap = 0;
  for (const auto& t : tokens_of(prediction)) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  return overlap;
}

std::size_t token_count(const std::string& text) { return tokens_of(text).size(); }

std::optional<double> roc_auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) {
    throw ContractError("roc_auc: size mismatch");
  }
  double pairs = 0.0, wins = 0.0;
  std::size_t n_pos = 0, n_neg = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    (labels[i] ? n_pos : n_neg) += 1;
  }
  if (n_pos == 0 || n_neg == 0) {
    return std::nullopt;
  }
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!labels[i]) {
      continue;
    }
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j]) {
        continue;
      }
      pairs += 1.0;
      if (scores[i] > scores[j]) {
        wins += 1.0;
      } else if (scores[i] == scores[j]) {
        wins += 0.5;
      }
    }
  }
  return wins / pairs;
}

ExampleRecord score_example(std::size_t index, std::string prediction, std::string gold) {
  ExampleRecord r;
  r.index = index;
  r.prediction = std::move(prediction);
  r.gold = std::move(gold);
  r.correct = normalize_answer(r.prediction) == normalize_answer(r.gold);
  r.exact = r.prediction == r.gold;
  r.f1_overlap = token_overlap(r.prediction, r.gold);
  r.f1_predicted = token_count(r.prediction);
  r.f1_gold = token_count(r.gold);
  return r;
}

EvalReport aggregate(EvalReport report) {
  const auto& recs = report.records;
  report.n = recs.size();
  if (recs.empty()) {
    throw ContractError("aggregate: no per-example records");
  }
  std::size_t correct = 0, exact = 0, overlap = 0, predicted = 0, gold = 0;
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
  bool binary = true;
  for (const auto& r : recs) {
    correct += r.correct;
    exact += r.exact;
    overlap += r.f1_overlap;
    predicted += r.f1_predicted;
    gold += r.f1_gold;
    if (r.p_positive) {
      scores.push_back(*r.p_positive);
    } else {
      binary = false;
    }
  }
  const double n = static_cast<double>(recs.size());
  report.accuracy = static_cast<double>(correct) / n;
  report.exact_match = static_cast<double>(exact) / n;
  const double precision = predicted ? static_cast<double>(overlap) / static_cast<double>(predicted) : 0.0;
  const double recall = gold ? static_cast<double>(overlap) / static_cast<double>(gold) : 0.0;
  report.micro_f1 = precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
  report.auc.reset();
  if (binary) {
    for (const auto& r : recs) {
      labels.push_back(r.gold_positive ? 1 : 0);
    }
    report.auc = roc_auc(scores, labels);
  }
  return report;
}

double EvalReport::value() const {
  switch (metric) {
    case Metric::kAccuracy:
      return accuracy;
    case Metric::kExactMatch:
      return exact_match;
    case Metric::kMicroF1:
      return micro_f1;
    case Metric::kAuc:
      return auc.value_or(accuracy);
  }
  return accuracy;
}

std::string EvalReport::to_json() const {
  ordered_json j;
  j["task_id"] = task_id;
  j["metric"] = metric_name(metric);
  j["accuracy"] = accuracy;
  j["exact_match"] = exact_match;
  j["micro_f1"] = micro_f1;
  j["auc"] = auc ? ordered_json(*auc) : ordered_json(nullptr);
  j["n"] = n;
  j["seed"] = seed;
  ordered_json recs = ordered_json::array();
  for (const auto& r : records) {
    ordered_json e;
    e["index"] = r.index;
    e["prediction"] = r.prediction;
    e["gold"] = r.gold;
    e["correct"] = r.correct;
    e["exact"] = r.exact;
    e["f1_overlap"] = r.f1_overlap;
    e["f1_predicted"] = r.f1_predicted;
    e["f1_gold"] = r.f1_gold;
    e["p_positive"] = r.p_positive ? ordered_json(*r.p_positive) : ordered_json(nullptr);
    e["gold_positive"] = r.gold_positive;
    recs.push_back(std::move(e));
  }
  j["records"] = std::move(recs);
  // Generated text can hold arbitrary bytes; invalid UTF-8 becomes U+FFFD.
  return j.dump(2, ' ', false, ordered_json::error_handler_t::replace);
}

EvalReport EvalReport::from_json(const std::string& text) {
  try {
    const auto j = ordered_json::parse(text);
    EvalReport r;
    r.task_id = j.at("task_id").get<std::string>();
    r.metric = parse_metric(j.at("metric").get<std::string>());
    r.accuracy = j.at("accuracy").get<double>();
    r.exact_match = j.at("exact_match").get<double>();
    r.micro_f1 = j.at("micro_f1").get<double>();
    if (!j.at("auc").is_null()) {
      r.auc = j.at("auc").get<double>();
    }
    r.n = j.at("n").get<std::size_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& e : j.at("records")) {
      ExampleRecord x;
      x.index = e.at("index").get<std::size_t>();
      x.prediction = e.at("prediction").get<std::string>();
      x.gold = e.at("gold").get<std::string>();
      x.correct = e.at("correct").get<bool>();
      x.exact = e.at("exact").get<bool>();
      x.f1_overlap = e.at("f1_overlap").get<std::size_t>();
      x.f1_predicted = e.at("f1_predicted").get<std::size_t>();
      x.f1_gold = e.at("f1_gold").get<std::size_t>();
      if (!e.at("p_positive").is_null()) {
        x.p_positive = e.at("p_positive").get<double>();
      }
      x.gold_positive = e.at("gold_positive").get<bool>();
      r.records.push_back(std::move(x));
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad eval report: ") + e.what());
  }
}

std::string EvalReport::csv_row() const {
  std::ostringstream out;
  out.precision(6);
  out << std::fixed << task_id << ',' << metric_name(metric) << ',' << value() << ',' << seed;
  return out.str();
}

template <typename T>
EvalReport evaluate(const TransformerWeights<T>& weights, const AdapterSet<T>* adapters,
                    const Dataset& test, const TaskSpec& spec, std::uint64_t seed,
                    std::size_t max_new) {
  if (test.empty()) {
    throw ContractError("evaluate: empty test set for task '" + spec.task_id + "'");
  }
  const bool binary = spec.label_set.size() == 2 && !spec.positive_label.empty();
  std::string negative_label;
  if (binary) {
    negative_label = normalize_answer(spec.label_set[0]) == normalize_answer(spec.positive_label)
                         ? spec.label_set[1]
                         : spec.label_set[0];
  }
  EvalReport report;
  report.task_id = spec.task_id;
  report.metric = spec.metric;
  report.seed = seed;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto& ex = test[i];
    const std::vector<int> prompt = encode_prompt(ex);
    if (prompt.size() >= weights.config.max_seq_len) {
      throw ContractError("evaluate: prompt of example " + std::to_string(i) + " fills the context");
    }
    const std::size_t room = std::min(max_new, weights.config.max_seq_len - prompt.size());
    ExampleRecord r =
        score_example(i, decode(generate(weights, adapters, std::span<const int>(prompt), room)), ex.answer);
    if (binary) {
      InstructionExample pos = ex, neg = ex;
      pos.answer = spec.positive_label;
      neg.answer = negative_label;
      const double lp = sequence_logprob(weights, adapters, pos);
      const double ln = sequence_logprob(weights, adapters, neg);
      const double m = std::max(lp, ln);
      r.p_positive = std::exp(lp - m) / (std::exp(lp - m) + std::exp(ln - m));
      r.gold_positive = normalize_answer(ex.answer) == normalize_answer(spec.positive_label);
    }
    report.records.push_back(std::move(r));
  }
  return aggregate(std::move(report));
}

#define SAMDKIF_INSTANTIATE(T)                                                                  \
  template struct FusedModel<T>;                                                                \
  template FusedModel<T> fuse<T>(const TransformerWeights<T>&, const SkillLibrary<T>&,          \
                                 std::span<const double>, const std::string&, double);          \
  template EvalReport evaluate<T>(const TransformerWeights<T>&, const AdapterSet<T>*,           \
                                  const Dataset&, const TaskSpec&, std::uint64_t, std::size_t);

SAMDKIF_INSTANTIATE(float)
SAMDKIF_INSTANTIATE(double)

#undef SAMDKIF_INSTANTIATE

}  // namespace samdkif
