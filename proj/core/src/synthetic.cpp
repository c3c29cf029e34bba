#include "samdkif/synthetic.hpp"

#include <algorithm>
#include <map>

#include "samdkif/errors.hpp"

namespace samdkif {

namespace {

constexpr std::string_view kLetters = "abcdefghijklmnopqrstuvwxyz";

const std::vector<std::string> kLabels = {"red", "green", "blue"};

const std::map<std::string, std::vector<std::string>>& items_by_label() {
  static const std::map<std::string, std::vector<std::string>> items = {
      {"red", {"apple", "cherry", "ruby"}},
      {"green", {"lime", "frog", "leaf"}},
      {"blue", {"sky", "sea", "jeans"}},
  };
  return items;
}

const std::vector<std::string>& all_items() {
  static const std::vector<std::string> items = [] {
    std::vector<std::string> v;
    for (const auto& [label, words] : items_by_label()) {
      v.insert(v.end(), words.begin(), words.end());
    }
    std::sort(v.begin(), v.end());
    return v;
  }();
  return items;
}

const std::vector<std::string> kClassifyQueries = {
    "label? red, green, blue",
    "color: red, green or blue?",
    "which label (red, green, blue)?",
};
const std::vector<std::string> kSummaryQueries = {"summarize", "first word?", "headline:"};
const std::vector<std::string> kDrugs = {"aspirin", "insulin", "heparin",
                                         "codeine", "statin",  "digoxin"};
const std::vector<std::string> kPlainWords = {"took", "gave", "at",   "noon", "daily",
                                              "then", "with", "food", "night", "dose"};
const std::vector<std::pair<std::pair<std::string, std::string>, std::string>> kRelations = {
    {{"aspirin", "fever"}, "treats"},    {{"aspirin", "pain"}, "treats"},
    {{"codeine", "cough"}, "treats"},    {{"digoxin", "fever"}, "unrelated"},
    {{"heparin", "pain"}, "causes"},     {{"insulin", "flu"}, "unrelated"},
    {{"insulin", "pain"}, "unrelated"},  {{"statin", "cough"}, "causes"},
};
const std::vector<std::string> kNliColors = {"red", "blue"};

std::string random_word(Rng& rng, std::size_t len) {
  std::string w;
  for (std::size_t i = 0; i < len; ++i) {
    w.push_back(kLetters[static_cast<std::size_t>(rng.below(kLetters.size()))]);
  }
  return w;
}

std::string filler(Rng& rng) { return random_word(rng, static_cast<std::size_t>(rng.range(2, 4))); }

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i > 0) {
      out += ' ';
    }
    out += words[i];
  }
  return out;
}

}  // namespace

std::string_view skill_kind_name(SkillKind kind) {
  switch (kind) {
    case SkillKind::kCopy:
      return "copy";
    case SkillKind::kReverse:
      return "reverse";
    case SkillKind::kMapClassify:
      return "map_classify";
    case SkillKind::kModularAdd:
      return "modular_add";
    case SkillKind::kSpanExtract:
      return "span_extract";
    case SkillKind::kRelationLookup:
      return "relation_lookup";
    case SkillKind::kSummaryHead:
      return "summary_head";
    case SkillKind::kNliToy:
      return "nli_toy";
  }
  return "?";
}

SkillKind parse_skill_kind(std::string_view name) {
  for (const SkillKind k : kAllSkillKinds) {
    if (skill_kind_name(k) == name) {
      return k;
    }
  }
  throw ContractError("unknown skill kind '" + std::string(name) + "'");
}

std::string item_label(std::string_view word) {
  for (const auto& [label, words] : items_by_label()) {
    if (std::find(words.begin(), words.end(), word) != words.end()) {
      return label;
    }
  }
  return {};
}

InstructionExample skill_example(SkillKind kind, Rng& rng) {
  InstructionExample ex;
  ex.skill_tag = std::string(skill_kind_name(kind));
  switch (kind) {
    case SkillKind::kCopy: {
      const std::string w = random_word(rng, 3);
      ex.query = "copy: " + w;
      ex.answer = w;
      break;
    }
    case SkillKind::kReverse: {
      const std::string w = random_word(rng, 3);
      ex.query = "reverse: " + w;
      ex.answer = std::string(w.rbegin(), w.rend());
      break;
    }
    case SkillKind::kMapClassify: {
      // One or two items of the same color hidden among filler words.
      const std::string& label = rng.choice(kLabels);
      const auto& pool = items_by_label().at(label);
      std::vector<std::string> words;
      const auto n_fill = static_cast<std::size_t>(rng.range(0, 2));
      for (std::size_t i = 0; i < n_fill; ++i) {
        words.push_back(filler(rng));
      }
      const auto n_items = static_cast<std::size_t>(rng.range(1, 2));
      for (std::size_t i = 0; i < n_items; ++i) {
        const auto pos = static_cast<std::size_t>(rng.below(words.size() + 1));
        words.insert(words.begin() + static_cast<std::ptrdiff_t>(pos), rng.choice(pool));
      }
      ex.context = join_words(words);
      ex.query = rng.choice(kClassifyQueries);
      ex.answer = label;
      break;
    }
    case SkillKind::kModularAdd: {
      const auto a = rng.range(0, 9);
      const auto b = rng.range(0, 9);
      ex.query = "add mod 10: " + std::to_string(a) + " " + std::to_string(b);
      ex.answer = std::to_string((a + b) % 10);
      break;
    }
    case SkillKind::kSpanExtract: {
      std::vector<std::string> words;
      for (int i = 0; i < 3; ++i) {
        words.push_back(rng.choice(kPlainWords));
      }
      const std::string& drug = rng.choice(kDrugs);
      const auto pos = static_cast<std::size_t>(rng.below(words.size() + 1));
      words.insert(words.begin() + static_cast<std::ptrdiff_t>(pos), drug);
      ex.context = join_words(words);
      ex.query = "find drug";
      ex.answer = "drug: " + drug;
      break;
    }
    case SkillKind::kRelationLookup: {
      const auto& [pair, rel] = rng.choice(kRelations);
      ex.query = "relation of " + pair.first + " and " + pair.second + "?";
      ex.answer = rel;
      break;
    }
    case SkillKind::kSummaryHead: {
      std::vector<std::string> words;
      const auto n = static_cast<std::size_t>(rng.range(2, 3));
      for (std::size_t i = 0; i < n; ++i) {
        words.push_back(rng.bernoulli(0.3) ? rng.choice(all_items()) : filler(rng));
      }
      ex.context = join_words(words);
      ex.query = rng.choice(kSummaryQueries);
      ex.answer = words.front();
      break;
    }
    case SkillKind::kNliToy: {
      const char subject = "xyz"[rng.below(3)];
      const std::string& color = rng.choice(kNliColors);
      const std::string other = color == "red" ? "blue" : "red";
      const std::string s(1, subject);
      ex.context = s + " is " + color;
      switch (rng.below(3)) {
        case 0:
          ex.query = s + " is " + color + "?";
          ex.answer = "entailment";
          break;
        case 1:
          ex.query = s + " is " + other + "?";
          ex.answer = "contradiction";
          break;
        default:
          ex.query = s + " is big?";
          ex.answer = "neutral";
          break;
      }
      break;
    }
  }
  return ex;
}

Dataset gen_skill_corpus(SkillKind kind, std::size_t n, std::uint64_t seed) {
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(kind) + 101));
  Dataset out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    InstructionExample ex = skill_example(kind, rng);
    ex.meta = std::string(skill_kind_name(kind)) + "-" + std::to_string(seed) + "-" + std::to_string(i);
    out.push_back(std::move(ex));
  }
  return out;
}

std::string_view downstream_kind_name(DownstreamKind kind) {
  switch (kind) {
    case DownstreamKind::kSeenMix:
      return "seen_mix";
    case DownstreamKind::kUnseenComposite:
      return "unseen_composite";
    case DownstreamKind::kBinaryOutcome:
      return "binary_outcome";
  }
  return "?";
}

DownstreamKind parse_downstream_kind(std::string_view name) {
  for (const DownstreamKind k :
       {DownstreamKind::kSeenMix, DownstreamKind::kUnseenComposite, DownstreamKind::kBinaryOutcome}) {
    if (downstream_kind_name(k) == name) {
      return k;
    }
  }
  throw ContractError("unknown downstream task '" + std::string(name) + "'");
}

std::string composite_rule_answer(const InstructionExample& example) {
  const auto space = example.context.find(' ');
  return item_label(example.context.substr(0, space));
}

DownstreamTask gen_downstream_task(DownstreamKind kind, std::size_t n, std::uint64_t seed,
                                   const std::vector<SkillKind>& sources) {
  Rng rng(mix_seed(seed, 0xd0e5 + static_cast<std::uint64_t>(kind)));
  DownstreamTask task;
  task.spec.task_id = std::string(downstream_kind_name(kind));
  const std::string tag(downstream_kind_name(kind));
  for (std::size_t i = 0; i < n; ++i) {
    InstructionExample ex;
    switch (kind) {
      case DownstreamKind::kSeenMix: {
        const SkillKind k = sources.empty() ? rng.choice(kAllSkillKinds) : rng.choice(sources);
        ex = skill_example(k, rng);
        break;
      }
      case DownstreamKind::kUnseenComposite: {
        const std::string& a = rng.choice(all_items());
        const std::string& b = rng.choice(all_items());
        ex.context = a + " " + filler(rng) + " " + b;
        ex.query = "label of the first word? red, green, blue";
        ex.answer = item_label(a);
        ex.skill_tag = tag;
        break;
      }
      case DownstreamKind::kBinaryOutcome: {
        // The label is drawn first, then a context consistent with it.
        const bool positive = rng.bernoulli(0.5);
        std::vector<std::string> words;
        for (int w = 0; w < 2; ++w) {
          words.push_back(filler(rng));
        }
        std::vector<std::string> pool;
        for (const auto& item : all_items()) {
          if ((item_label(item) == "red") == positive) {
            pool.push_back(item);
          }
        }
        const auto pos = static_cast<std::size_t>(rng.below(words.size() + 1));
        words.insert(words.begin() + static_cast<std::ptrdiff_t>(pos), rng.choice(pool));
        ex.context = join_words(words);
        ex.query = "any red item? yes or no";
        ex.answer = positive ? "yes" : "no";
        ex.skill_tag = tag;
        break;
      }
    }
    ex.meta = tag + "-" + std::to_string(seed) + "-" + std::to_string(i);
    task.data.push_back(std::move(ex));
  }
  switch (kind) {
    case DownstreamKind::kSeenMix:
      task.spec.metric = Metric::kAccuracy;
      break;
    case DownstreamKind::kUnseenComposite:
      task.spec.metric = Metric::kAccuracy;
      task.spec.label_set = kLabels;
      break;
    case DownstreamKind::kBinaryOutcome:
      task.spec.metric = Metric::kAuc;
      task.spec.label_set = {"yes", "no"};
      task.spec.positive_label = "yes";
      break;
  }
  return task;
}

// ---------------------------------------------------------------------------
// Pretraining corpus

EncodedExample general_text_example(Rng& rng) {
  std::string text;
  const double k = rng.uniform();
  if (k < 0.3) {
    std::vector<std::string> words;
    const auto n = rng.range(3, 8);
    for (std::int64_t i = 0; i < n; ++i) {
      words.push_back(random_word(rng, static_cast<std::size_t>(rng.range(2, 6))));
    }
    text = join_words(words);
  } else if (k < 0.75) {
    // Repeated phrases teach the model to copy from its context.
    std::vector<std::string> words;
    const auto n = rng.range(1, 3);
    for (std::int64_t i = 0; i < n; ++i) {
      words.push_back(random_word(rng, static_cast<std::size_t>(rng.range(2, 5))));
    }
    const std::string phrase = join_words(words);
    const auto reps = rng.range(2, 3);
    for (std::int64_t r = 0; r < reps; ++r) {
      text += (r > 0 ? " | " : "") + phrase;
    }
  } else if (k < 0.9) {
    const auto start = rng.range(0, 5);
    const auto len = rng.range(3, 8);
    std::vector<std::string> digits;
    for (std::int64_t i = start; i < start + len; ++i) {
      digits.push_back(std::to_string(i % 10));
    }
    text = join_words(digits);
  } else {
    const std::string_view alphabet = "abcdefghijklmnopqrstuvwxyz0123456789 ";
    const auto len = rng.range(8, 30);
    for (std::int64_t i = 0; i < len; ++i) {
      text.push_back(alphabet[static_cast<std::size_t>(rng.below(alphabet.size()))]);
    }
  }
  std::vector<int> seq{kBos};
  for (const int id : encode_bytes(text)) {
    seq.push_back(id);
  }
  seq.push_back(kEos);
  EncodedExample ex;
  ex.ids.assign(seq.begin(), seq.end() - 1);
  ex.targets.assign(seq.begin() + 1, seq.end());
  ex.mask.assign(ex.ids.size(), 1);
  ex.prompt_length = 1;
  return ex;
}

InstructionExample general_instruction(Rng& rng) {
  InstructionExample ex;
  ex.skill_tag = "general";
  switch (rng.below(5)) {
    case 0: {
      const auto i = static_cast<std::size_t>(rng.below(26));
      ex.query = std::string("next letter: ") + kLetters[i];
      ex.answer = std::string(1, kLetters[(i + 1) % 26]);
      break;
    }
    case 1: {
      const char c = kLetters[static_cast<std::size_t>(rng.below(26))];
      ex.query = std::string("repeat: ") + c;
      ex.answer = std::string(3, c);
      break;
    }
    case 2: {
      const auto s = rng.range(0, 6);
      ex.query = "count from " + std::to_string(s);
      std::vector<std::string> nums;
      for (std::int64_t i = s; i < s + 4; ++i) {
        nums.push_back(std::to_string(i));
      }
      ex.answer = join_words(nums);
      break;
    }
    case 3: {
      const std::string w = random_word(rng, static_cast<std::size_t>(rng.range(2, 4)));
      ex.context = w;
      ex.query = "length?";
      ex.answer = std::to_string(w.size());
      break;
    }
    default: {
      const auto d = rng.range(0, 9);
      ex.query = "digit after " + std::to_string(d);
      ex.answer = std::to_string((d + 1) % 10);
      break;
    }
  }
  return ex;
}

std::vector<EncodedExample> gen_pretrain_corpus(std::size_t n, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x9e7a));
  std::vector<EncodedExample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(i % 2 == 0 ? general_text_example(rng) : encode_example(general_instruction(rng)));
  }
  return out;
}

}  // namespace samdkif
