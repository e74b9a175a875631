#pragma once

// Post-hoc analyses: rule taxonomy of instructions, rule-type attribution of
// distractors and the cosine complexity profile.

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "topicguard/core.hpp"
#include "topicguard/llm_client.hpp"
#include "topicguard/prompts.hpp"

namespace topicguard {

// Position of `t` in kAllRuleTypes.
std::size_t rule_index(RuleType t);

// Accepts the short names and the long labels used in the annotation
// prompt ("topic/subject allowed", "conversation flow", ...).
std::optional<RuleType> parse_rule_label(std::string_view label);

struct QuotedRule {
  std::string span;
  std::string label;
};

// JSON array of {"span", "rule_type"} (code fences and surrounding prose
// tolerated). A reply without an array yields an empty list.
std::vector<QuotedRule> parse_rule_annotation_reply(std::string_view reply);

// Byte range of `quoted` inside `text`: an exact match first, otherwise the
// run of clauses with the highest ROUGE-L F against `quoted` if it reaches
// `min_score`.
std::optional<std::pair<std::size_t, std::size_t>> locate_span(std::string_view text,
                                                               std::string_view quoted,
                                                               double min_score = 0.5);

// One-shot annotation call. Spans that cannot be located or labelled are
// dropped with a warning. The result always has rule_spans set.
TopicalInstruction annotate_instruction_rules(const TopicalInstruction& instr, Backend& backend,
                                              const PromptTemplates& templates = default_templates(),
                                              double min_score = 0.5);

struct RuleTypeDistribution {
  std::array<std::size_t, 4> counts{};    // indexed like kAllRuleTypes
  std::array<double, 4> fractions{};      // meaningful only when defined
  std::array<double, 4> per_instruction{};  // mean spans per instruction
  std::size_t total = 0;
  std::size_t instructions = 0;
  bool defined = false;  // total > 0
};

// Pools spans over all annotated instructions; unannotated ones are ignored.
RuleTypeDistribution rule_distribution(std::span<const TopicalInstruction> instructions);
ordered_json to_json(const RuleTypeDistribution& d);

// Bullet list of the instruction's spans grouped by rule type, used in the
// attribution prompt. Throws PreconditionError when not annotated.
std::string rule_breakdown(const TopicalInstruction& instr);

// Category named on the reply's last non-empty line, if exactly one.
std::optional<RuleType> parse_rule_category(std::string_view reply);

struct AttributionCounts {
  std::array<std::size_t, 4> counts{};
  std::size_t unattributed = 0;
  std::size_t total = 0;
  std::array<double, 4> fractions{};  // over attributed distractors
};

struct AttributionResult {
  Dataset dataset;
  AttributionCounts synthetic;
  AttributionCounts human;
};

// One call per distractor. Requires every instruction to be annotated;
// throws PreconditionError otherwise. Only Distractor::rule_type changes.
AttributionResult attribute_distractors(const Dataset& dataset, Backend& backend,
                                        const PromptTemplates& templates = default_templates(),
                                        std::size_t max_parallel = 4);
ordered_json to_json(const AttributionResult& r);

inline constexpr std::size_t kComplexityBins = 40;  // width 0.05 over [-1, 1]

std::size_t complexity_bin(double cosine);

struct ComplexityPoint {
  std::string conversation_id;
  std::size_t distractor_index = 0;
  DistractorSource source = DistractorSource::synthetic;
  double cosine = 0.0;
};

struct SourceSummary {
  std::size_t count = 0;
  double mean = 0.0;
  double median = 0.0;
  std::array<std::size_t, kComplexityBins> histogram{};
};

struct ComplexityProfile {
  std::vector<ComplexityPoint> points;  // ordered by (conversation_id, distractor_index)
  SourceSummary synthetic;
  SourceSummary human;
  SourceSummary all;
};

// Cosine between each distractor and its anchor bot turn.
ComplexityProfile complexity_profile(const Dataset& dataset, Backend& embedder,
                                     std::size_t batch_size = 64);

ordered_json to_json(const ComplexityProfile& p);
// bin_start,bin_end,synthetic,human
std::string histogram_csv(const ComplexityProfile& p);
std::string render_histogram(const ComplexityProfile& p, std::size_t width = 40);

}  // namespace topicguard
