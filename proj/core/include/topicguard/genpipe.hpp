#pragma once

// The generation stages: scenarios, diversity filtering, topical
// instructions, single-call conversations and distractors.

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "topicguard/core.hpp"
#include "topicguard/llm_client.hpp"
#include "topicguard/prompts.hpp"
#include "topicguard/textmetrics.hpp"

namespace topicguard {

const std::vector<std::string>& default_few_shot_distractors();

struct GenerationConfig {
  std::vector<std::string> domains = default_domains();
  std::size_t scenarios_per_domain = 60;
  std::size_t scenarios_per_call = 10;
  std::size_t conversations_per_scenario = 2;
  std::size_t distractors_per_conversation = 5;
  double rouge_threshold = 0.7;
  double cosine_threshold = 0.9;
  std::vector<std::string> few_shot_distractors = default_few_shot_distractors();
  // Optional seed scenarios shown in the first scenario prompt of a domain.
  std::map<std::string, std::vector<std::string>> seed_scenarios;
  // Drop the later member of each flagged pair instead of only exporting it.
  bool auto_drop_similar = false;
  std::size_t conversation_retry_cap = 3;
  double anchor_min_score = 0.5;
  bool allow_bot_first = false;
  // Mixed into scenario ids; empty keeps the unseeded ids.
  std::string id_seed;
};

// Throws ConfigError: counts must be >= 1, thresholds in (0, 1].
void validate(const GenerationConfig& cfg);

enum class JudgeVerdict { off_topic, on_topic_false_positive };
std::string_view to_string(JudgeVerdict v);

struct DistractorCandidate {
  std::string bot_turn_text;  // as quoted by the generator
  std::string distractor_text;
  std::optional<std::size_t> resolved_anchor;
  double match_score = 0.0;
  std::optional<JudgeVerdict> judge_verdict;
};

// --- pure parsing helpers --------------------------------------------------

// One scenario per non-blank line; list markers ("1.", "2)", "-", "*", "•")
// are stripped.
std::vector<std::string> parse_scenario_lines(std::string_view reply);

// Lines prefixed "user:" / "bot:" (case-insensitive, whitespace tolerant).
// Unprefixed lines continue the previous turn; text before the first prefix
// is ignored. Consecutive same-role turns are merged with a space. Throws
// ParseError when no turn is found and GenerationError when the result
// does not start with a user turn (unless allow_bot_first).
std::vector<Turn> parse_conversation(std::string_view reply, bool allow_bot_first = false);

// "user: ...\nbot: ..." rendering used inside prompts.
std::string render_conversation(std::span<const Turn> turns);

std::string strip_code_fences(std::string_view reply);

// Parses `s` as JSON, falling back to the outermost [...] or {...} region.
std::optional<nlohmann::json> parse_json_loose(std::string_view s);

// JSON array (or single object, or object wrapping one array) of
// {"bot turn", "distractor user turn"}. Throws ParseError carrying the raw
// reply when nothing parses.
std::vector<DistractorCandidate> parse_distractor_reply(std::string_view reply);

// --- stages ------------------------------------------------------------------

// Generates until `cfg.scenarios_per_domain` scenarios exist (counting
// `existing`), feeding every scenario produced so far into the next prompt.
// Throws GenerationError after two consecutive replies with nothing usable.
std::vector<Scenario> generate_scenarios(const std::string& domain, const GenerationConfig& cfg,
                                         Backend& backend, const PromptTemplates& templates,
                                         std::span<const Scenario> existing = {});

struct FilterResult {
  std::vector<Scenario> kept;
  std::vector<PairVerdict> flagged_pairs;  // indices into the input list
};

FilterResult filter_scenarios(std::span<const Scenario> scenarios, const GenerationConfig& cfg,
                              Backend& embedder);

TopicalInstruction generate_instruction(const Scenario& scenario, Backend& backend,
                                        const PromptTemplates& templates);

// The k-th sample for a scenario carries a system message naming its index,
// so repeated samples are distinct requests.
ChatRequest conversation_request(const TopicalInstruction& instruction, Backend& backend,
                                 const PromptTemplates& templates, std::size_t sample,
                                 std::size_t samples);

// Regenerates malformed replies up to cfg.conversation_retry_cap attempts.
Conversation generate_conversation(const Scenario& scenario, const TopicalInstruction& instruction,
                                   Backend& backend, const PromptTemplates& templates,
                                   const GenerationConfig& cfg, std::size_t sample = 0);

std::vector<DistractorCandidate> generate_distractors(const Conversation& conv, Backend& backend,
                                                      const GenerationConfig& cfg,
                                                      const PromptTemplates& templates);

struct AnchorMatch {
  std::size_t index = 0;
  double score = 0.0;
};

// Bot turn maximizing ROUGE-L F against `quoted`, earliest index on ties.
std::optional<AnchorMatch> best_bot_turn(std::span<const Turn> turns, std::string_view quoted);

// Resolves the candidate's quoted bot turn and fills resolved_anchor and
// match_score. Throws AnchoringError when the best score is below
// `min_score`.
Distractor anchor_distractor(const Conversation& conv, DistractorCandidate& cand,
                             double min_score = 0.5,
                             DistractorSource source = DistractorSource::synthetic);

// Keeps only candidates the judge labels off-topic. Candidates whose verdict
// cannot be parsed are kept without a verdict. Every input candidate gets
// its verdict recorded in `judged` when provided.
std::vector<DistractorCandidate> screen_false_positives(
    const Conversation& conv, std::vector<DistractorCandidate> candidates, Backend& judge,
    const PromptTemplates& templates, std::vector<DistractorCandidate>* judged = nullptr);

}  // namespace topicguard
