#pragma once

// Unified instruction records and the converters that produce them.
//
// Every dataset in the pipeline, whether it feeds skill training or a
// downstream task, is a list of InstructionExample. Raw records of the five
// source categories are turned into that shape by convert().

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

namespace samdkif {

struct InstructionExample {
  std::string context;
  std::string query;
  std::string answer;
  std::string skill_tag;  // may be empty
  std::string meta;       // source record id

  bool operator==(const InstructionExample&) const = default;
};

using Dataset = std::vector<InstructionExample>;

// ---------------------------------------------------------------------------
// Raw records

struct TextClassification {
  std::string id;
  std::string text;
  std::string text_pair;  // second segment (e.g. NLI hypothesis); optional
  std::string label;
  std::vector<std::string> label_set;
};

struct LabeledSpan {
  std::size_t begin = 0;  // byte offsets into the text, end exclusive
  std::size_t end = 0;
  std::string type;
};

struct SequenceLabeling {
  std::string id;
  std::string text;
  std::vector<LabeledSpan> spans;
};

struct Seq2Seq {
  std::string id;
  std::string source;
  std::string target;
};

/// Either a description record (description set) or a relation record
/// (relation and tail set), never both.
struct KnowledgeGraph {
  std::string id;
  std::string head;
  std::optional<std::string> relation;
  std::optional<std::string> tail;
  std::optional<std::string> description;
};

struct QuestionAnswering {
  std::string id;
  std::string question;
  std::vector<std::string> options;  // empty for open questions
  std::string answer;
};

using RawRecord =
    std::variant<TextClassification, SequenceLabeling, Seq2Seq, KnowledgeGraph, QuestionAnswering>;

std::string record_id(const RawRecord& record);
std::string category_name(const RawRecord& record);

/// Query pattern with {placeholder} fields. Placeholders understood by
/// convert(): {labels}, {types}, {head}, {tail}, {question}, {options}.
struct Template {
  std::string id;
  std::string pattern;
};

/// Built-in template for the record's category.
Template default_template(const RawRecord& record);

/// Substitutes {name} fields from `fields`. Unknown placeholders are an error.
std::string render_template(std::string_view pattern,
                            const std::map<std::string, std::string>& fields);

/// Reads a template file: the whole file (trailing newline stripped) is the
/// pattern, the file stem is the id.
Template load_template(const std::string& path);

/// "type1: span1; type2: span2" ordered by position in the text.
std::string serialize_spans(std::string_view text, std::vector<LabeledSpan> spans);

/// Throws FormatError naming the record id when the record is malformed or
/// the encoded example would exceed max_seq_len tokens.
InstructionExample convert(const RawRecord& record, const Template& tmpl,
                           std::size_t max_seq_len = 256);

struct ConversionBatch {
  Dataset converted;
  std::vector<std::pair<std::string, std::string>> rejected;  // (record id, reason)
};

ConversionBatch convert_all(const std::vector<RawRecord>& records, std::size_t max_seq_len = 256);

// ---------------------------------------------------------------------------
// Task specs and splits

enum class Metric { kAccuracy, kExactMatch, kMicroF1, kAuc };
enum class Setting { kNormal, kFewShot };

std::string metric_name(Metric metric);
Metric parse_metric(std::string_view name);
std::string setting_name(Setting setting);
Setting parse_setting(std::string_view name);

inline constexpr std::size_t kFewShotSize = 32;

struct TaskSpec {
  std::string task_id;
  Metric metric = Metric::kAccuracy;
  Setting setting = Setting::kNormal;
  std::vector<std::string> label_set;
  std::string positive_label;  // binary tasks, used for AUC
  std::string template_id;
};

struct AdaptationSplit {
  Dataset adaptation;
  Dataset test;
};

/// Normal: shuffled 8:2 split. Few-shot: the same test portion (capped so 32
/// examples remain) and exactly 32 adaptation examples drawn from the rest.
AdaptationSplit split(const Dataset& dataset, const TaskSpec& spec, std::uint64_t seed);

// ---------------------------------------------------------------------------
// JSONL

void write_jsonl(const std::string& path, const Dataset& dataset);
Dataset read_jsonl(const std::string& path);
std::string to_jsonl_line(const InstructionExample& example);
InstructionExample from_jsonl_line(std::string_view line);

/// Lowercase, trim whitespace and punctuation at both ends.
std::string normalize_answer(std::string_view text);

}  // namespace samdkif
