#include "samdkif/dataformat.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "samdkif/errors.hpp"
#include "samdkif/rng.hpp"
#include "samdkif/tokenizer.hpp"

namespace samdkif {

namespace {

template <class... Fs>
struct Overloaded : Fs... {
  using Fs::operator()...;
};
template <class... Fs>
Overloaded(Fs...) -> Overloaded<Fs...>;

std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i > 0) {
      out += sep;
    }
    out += parts[i];
  }
  return out;
}

std::string enumerate_options(const std::vector<std::string>& options) {
  std::string out;
  for (std::size_t i = 0; i < options.size(); ++i) {
    if (i > 0) {
      out += "; ";
    }
    out += static_cast<char>('A' + static_cast<int>(i % 26));
    out += ". ";
    out += options[i];
  }
  return out;
}

void require(bool ok, const std::string& id, const std::string& why) {
  if (!ok) {
    throw FormatError("record " + id + ": " + why);
  }
}

}  // namespace

std::string record_id(const RawRecord& record) {
  return std::visit([](const auto& r) { return r.id; }, record);
}

std::string category_name(const RawRecord& record) {
  return std::visit(Overloaded{
                        [](const TextClassification&) { return std::string("text_classification"); },
                        [](const SequenceLabeling&) { return std::string("sequence_labeling"); },
                        [](const Seq2Seq&) { return std::string("seq2seq"); },
                        [](const KnowledgeGraph&) { return std::string("knowledge_graph"); },
                        [](const QuestionAnswering&) { return std::string("question_answering"); },
                    },
                    record);
}

Template default_template(const RawRecord& record) {
  return std::visit(
      Overloaded{
          [](const TextClassification&) {
            return Template{"classify", "Which label applies? Options: {labels}."};
          },
          [](const SequenceLabeling&) {
            return Template{"entities", "List the entities of types {types}."};
          },
          [](const Seq2Seq&) { return Template{"summarize", "Summarize the text."}; },
          [](const KnowledgeGraph& kg) {
            return kg.description ? Template{"kg_describe", "Describe the entity {head}."}
                                  : Template{"kg_relation",
                                             "What is the relation between {head} and {tail}?"};
          },
          [](const QuestionAnswering& qa) {
            return qa.options.empty() ? Template{"qa_open", "{question}"}
                                      : Template{"qa_options", "{question} Options: {options}."};
          },
      },
      record);
}

std::string render_template(std::string_view pattern,
                            const std::map<std::string, std::string>& fields) {
  std::string out;
  std::size_t i = 0;
  while (i < pattern.size()) {
    const char c = pattern[i];
    if (c != '{') {
      out.push_back(c);
      ++i;
      continue;
    }
    const auto close = pattern.find('}', i);
    if (close == std::string_view::npos) {
      throw FormatError("template: unterminated placeholder in '" + std::string(pattern) + "'");
    }
    const std::string name(pattern.substr(i + 1, close - i - 1));
    const auto it = fields.find(name);
    if (it == fields.end()) {
      throw FormatError("template: unknown placeholder {" + name + "}");
    }
    out += it->second;
    i = close + 1;
  }
  return out;
}

Template load_template(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw FormatError("cannot open template '" + path + "'");
  }
  std::ostringstream buf;
  buf << in.rdbuf();
  std::string pattern = buf.str();
  while (!pattern.empty() && (pattern.back() == '\n' || pattern.back() == '\r')) {
    pattern.pop_back();
  }
  return Template{std::filesystem::path(path).stem().string(), pattern};
}

std::string serialize_spans(std::string_view text, std::vector<LabeledSpan> spans) {
  std::stable_sort(spans.begin(), spans.end(), [](const LabeledSpan& a, const LabeledSpan& b) {
    return a.begin != b.begin ? a.begin < b.begin : a.end < b.end;
  });
  std::vector<std::string> parts;
  for (const auto& s : spans) {
    parts.push_back(s.type + ": " + std::string(text.substr(s.begin, s.end - s.begin)));
  }
  return join(parts, "; ");
}

InstructionExample convert(const RawRecord& record, const Template& tmpl, std::size_t max_seq_len) {
  InstructionExample ex;
  ex.meta = record_id(record);
  std::visit(
      Overloaded{
          [&](const TextClassification& r) {
            require(!r.label_set.empty(), r.id, "empty label set");
            require(std::find(r.label_set.begin(), r.label_set.end(), r.label) != r.label_set.end(),
                    r.id, "label '" + r.label + "' not in label set");
            ex.context = r.text_pair.empty() ? r.text : r.text + "\n" + r.text_pair;
            ex.query = render_template(tmpl.pattern, {{"labels", join(r.label_set, ", ")}});
            ex.answer = r.label;
          },
          [&](const SequenceLabeling& r) {
            require(!r.spans.empty(), r.id, "no labeled spans");
            std::vector<std::string> types;
            for (const auto& s : r.spans) {
              require(s.begin < s.end && s.end <= r.text.size(), r.id,
                      "span [" + std::to_string(s.begin) + ", " + std::to_string(s.end) +
                          ") outside text");
              require(!s.type.empty(), r.id, "span without type");
              if (std::find(types.begin(), types.end(), s.type) == types.end()) {
                types.push_back(s.type);
              }
            }
            std::sort(types.begin(), types.end());
            ex.context = r.text;
            ex.query = render_template(tmpl.pattern, {{"types", join(types, ", ")}});
            ex.answer = serialize_spans(r.text, r.spans);
          },
          [&](const Seq2Seq& r) {
            ex.context = r.source;
            ex.query = render_template(tmpl.pattern, {});
            ex.answer = r.target;
          },
          [&](const KnowledgeGraph& r) {
            require(!r.head.empty(), r.id, "empty head entity");
            const bool has_desc = r.description.has_value();
            const bool has_rel = r.relation.has_value() && r.tail.has_value();
            require(has_desc != has_rel, r.id,
                    "knowledge-graph record needs exactly one of description or (relation, tail)");
            if (has_desc) {
              ex.query = render_template(tmpl.pattern, {{"head", r.head}});
              ex.answer = *r.description;
            } else {
              ex.query = render_template(tmpl.pattern, {{"head", r.head}, {"tail", *r.tail}});
              ex.answer = *r.relation;
            }
          },
          [&](const QuestionAnswering& r) {
            if (!r.options.empty()) {
              require(std::find(r.options.begin(), r.options.end(), r.answer) != r.options.end(),
                      r.id, "answer is not among the options");
            }
            ex.query = render_template(
                tmpl.pattern, {{"question", r.question}, {"options", enumerate_options(r.options)}});
            ex.answer = r.answer;
          },
      },
      record);
  require(!ex.query.empty(), ex.meta, "empty query");
  require(!ex.answer.empty(), ex.meta, "empty answer");
  const std::size_t len = encoded_length(ex);
  require(len <= max_seq_len, ex.meta,
          "encoded length " + std::to_string(len) + " exceeds max_seq_len " +
              std::to_string(max_seq_len));
  return ex;
}

ConversionBatch convert_all(const std::vector<RawRecord>& records, std::size_t max_seq_len) {
  ConversionBatch out;
  for (const auto& r : records) {
    try {
      out.converted.push_back(convert(r, default_template(r), max_seq_len));
    } catch (const FormatError& e) {
      out.rejected.emplace_back(record_id(r), e.what());
    }
  }
  return out;
}

std::string metric_name(Metric metric) {
  switch (metric) {
    case Metric::kAccuracy:
      return "accuracy";
    case Metric::kExactMatch:
      return "exact_match";
    case Metric::kMicroF1:
      return "micro_f1";
    case Metric::kAuc:
      return "auc";
  }
  return "?";
}

Metric parse_metric(std::string_view name) {
  for (const Metric m : {Metric::kAccuracy, Metric::kExactMatch, Metric::kMicroF1, Metric::kAuc}) {
    if (metric_name(m) == name) {
      return m;
    }
  }
  throw ContractError("unknown metric '" + std::string(name) + "'");
}

std::string setting_name(Setting setting) {
  return setting == Setting::kNormal ? "normal" : "few_shot";
}

Setting parse_setting(std::string_view name) {
  if (name == "normal") {
    return Setting::kNormal;
  }
  if (name == "few_shot") {
    return Setting::kFewShot;
  }
  throw ContractError("unknown setting '" + std::string(name) + "'");
}

AdaptationSplit split(const Dataset& dataset, const TaskSpec& spec, std::uint64_t seed) {
  const std::size_t n = dataset.size();
  const bool few = spec.setting == Setting::kFewShot;
  if (few ? n < kFewShotSize + 1 : n < 40) {
    throw ContractError("split: dataset of " + std::to_string(n) + " examples is too small for the " +
                        setting_name(spec.setting) + " setting");
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) {
    order[i] = i;
  }
  Rng rng(mix_seed(seed, 0x5311a7));
  rng.shuffle(order);

  std::size_t n_test = n - (n * 8) / 10;
  if (few) {
    n_test = std::min(n_test, n - kFewShotSize);
  }
  AdaptationSplit out;
  for (std::size_t i = 0; i < n_test; ++i) {
    out.test.push_back(dataset[order[i]]);
  }
  std::vector<std::size_t> rest(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
  if (few) {
    Rng draw = rng.fork(1);
    draw.shuffle(rest);
    rest.resize(kFewShotSize);
  }
  for (const std::size_t i : rest) {
    out.adaptation.push_back(dataset[i]);
  }
  return out;
}

std::string to_jsonl_line(const InstructionExample& ex) {
  nlohmann::ordered_json j;
  j["context"] = ex.context;
  j["query"] = ex.query;
  j["answer"] = ex.answer;
  j["skill_tag"] = ex.skill_tag;
  j["meta"] = ex.meta;
  return j.dump();
}

InstructionExample from_jsonl_line(std::string_view line) {
  try {
    const auto j = nlohmann::json::parse(line);
    InstructionExample ex;
    ex.context = j.value("context", "");
    ex.query = j.at("query").get<std::string>();
    ex.answer = j.at("answer").get<std::string>();
    ex.skill_tag = j.value("skill_tag", "");
    ex.meta = j.value("meta", "");
    return ex;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad JSONL record: ") + e.what());
  }
}

void write_jsonl(const std::string& path, const Dataset& dataset) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw FormatError("cannot open '" + path + "' for writing");
  }
  for (const auto& ex : dataset) {
    out << to_jsonl_line(ex) << '\n';
  }
}

Dataset read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw FormatError("cannot open dataset '" + path + "'");
  }
  Dataset out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) {
      continue;
    }
    try {
      out.push_back(from_jsonl_line(line));
    } catch (const FormatError& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::string normalize_answer(std::string_view text) {
  auto trim = [](unsigned char c) { return std::isspace(c) || std::ispunct(c); };
  std::size_t b = 0, e = text.size();
  while (b < e && trim(static_cast<unsigned char>(text[b]))) {
    ++b;
  }
  while (e > b && trim(static_cast<unsigned char>(text[e - 1]))) {
    --e;
  }
  std::string out(text.substr(b, e - b));
  for (auto& c : out) {
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  return out;
}

}  // namespace samdkif
