#pragma once

// Synthetic skill corpora and downstream tasks.
//
// Each skill kind has its own query markers, so a skill is identifiable
// from the prompt alone. Downstream tasks reuse the same vocabulary; the
// composite task chains two skill rules and never appears during skill
// training.

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "samdkif/dataformat.hpp"
#include "samdkif/rng.hpp"
#include "samdkif/tokenizer.hpp"

namespace samdkif {

enum class SkillKind {
  kCopy,
  kReverse,
  kMapClassify,
  kModularAdd,
  kSpanExtract,
  kRelationLookup,
  kSummaryHead,
  kNliToy,
};

inline constexpr std::array<SkillKind, 8> kAllSkillKinds = {
    SkillKind::kCopy,        SkillKind::kReverse,        SkillKind::kMapClassify,
    SkillKind::kModularAdd,  SkillKind::kSpanExtract,    SkillKind::kRelationLookup,
    SkillKind::kSummaryHead, SkillKind::kNliToy,
};

std::string_view skill_kind_name(SkillKind kind);
SkillKind parse_skill_kind(std::string_view name);

/// One example of a skill, drawn from `rng`.
InstructionExample skill_example(SkillKind kind, Rng& rng);

/// n examples tagged with the skill name; a pure function of (kind, n, seed).
Dataset gen_skill_corpus(SkillKind kind, std::size_t n, std::uint64_t seed);

enum class DownstreamKind { kSeenMix, kUnseenComposite, kBinaryOutcome };

std::string_view downstream_kind_name(DownstreamKind kind);
DownstreamKind parse_downstream_kind(std::string_view name);

struct DownstreamTask {
  Dataset data;
  TaskSpec spec;
};

/// seen_mix draws uniformly from `sources` (all kinds when empty).
/// unseen_composite: "label of the first word" = summary_head then
/// map_classify. binary_outcome: balanced yes/no question, scored by AUC.
DownstreamTask gen_downstream_task(DownstreamKind kind, std::size_t n, std::uint64_t seed,
                                   const std::vector<SkillKind>& sources = {});

/// Rule-based answer for a composite example, recomputed from its context.
std::string composite_rule_answer(const InstructionExample& example);

/// Color label of an item word ("apple" -> "red"); empty if not an item.
std::string item_label(std::string_view word);

// ---------------------------------------------------------------------------
// Pretraining corpus: free text scored on every token, mixed with generic
// instruction patterns scored on the answer only.

EncodedExample general_text_example(Rng& rng);
InstructionExample general_instruction(Rng& rng);

/// `n` examples, half free text and half generic instructions.
std::vector<EncodedExample> gen_pretrain_corpus(std::size_t n, std::uint64_t seed);

}  // namespace samdkif
