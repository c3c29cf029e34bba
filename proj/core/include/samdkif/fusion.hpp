#pragma once

// Materialized fusion W = W0 + sum_i R_i U_i diag(lambda_i) V_i, and
// evaluation of a model (fused or routed) on a test set.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "samdkif/dataformat.hpp"
#include "samdkif/model.hpp"
#include "samdkif/router.hpp"

namespace samdkif {

struct Provenance {
  std::string base_id;
  std::vector<std::string> skill_ids;
  std::vector<double> R;
  double tau = 1.0;

  std::string to_json() const;
  static Provenance from_json(const std::string& text);
};

template <typename T>
struct FusedModel {
  TransformerWeights<T> weights;  // plain weights, no adapters
  Provenance provenance;

  Checkpoint to_checkpoint() const;
  static FusedModel from_checkpoint(const Checkpoint& checkpoint);
};

/// Throws LibraryError when R does not have one entry per skill and
/// ContractError when R is off the simplex (tolerance 1e-5). The sum is
/// accumulated in double and rounded once per element.
template <typename T>
FusedModel<T> fuse(const TransformerWeights<T>& base, const SkillLibrary<T>& library,
                   std::span<const double> R, const std::string& base_id = "base",
                   double tau = 1.0);

struct ExampleRecord {
  std::size_t index = 0;
  std::string prediction;
  std::string gold;
  bool correct = false;  // normalized match
  bool exact = false;    // byte-for-byte match
  std::size_t f1_overlap = 0;
  std::size_t f1_predicted = 0;
  std::size_t f1_gold = 0;
  std::optional<double> p_positive;  // binary tasks only
  bool gold_positive = false;
};

struct EvalReport {
  std::string task_id;
  Metric metric = Metric::kAccuracy;
  double accuracy = 0.0;
  double exact_match = 0.0;
  double micro_f1 = 0.0;
  std::optional<double> auc;  // binary tasks with both classes present
  std::size_t n = 0;
  std::uint64_t seed = 0;
  std::vector<ExampleRecord> records;

  /// The value of `metric` (AUC falls back to accuracy when undefined).
  double value() const;
  std::string to_json() const;
  static EvalReport from_json(const std::string& text);
  /// "task,metric,value,seed" row, no trailing newline.
  std::string csv_row() const;
  static constexpr const char* kCsvHeader = "task,metric,value,seed";
};

/// Whitespace tokens after normalization; multiset overlap.
std::size_t token_overlap(const std::string& prediction, const std::string& gold);
std::size_t token_count(const std::string& text);

/// Mann-Whitney AUC, ties count one half. nullopt when a class is missing.
std::optional<double> roc_auc(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// Record for one prediction, without the binary-task fields.
ExampleRecord score_example(std::size_t index, std::string prediction, std::string gold);

/// Recomputes the aggregates from report.records.
EvalReport aggregate(EvalReport report);

/// Greedy generation for every example. Binary tasks (two labels and a
/// positive label) also score p(positive) from the two label sequences.
/// Throws ContractError on an empty test set.
template <typename T>
EvalReport evaluate(const TransformerWeights<T>& weights, const AdapterSet<T>* adapters,
                    const Dataset& test, const TaskSpec& spec, std::uint64_t seed = 0,
                    std::size_t max_new = 48);

}  // namespace samdkif
