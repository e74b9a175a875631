#pragma once

// Topic-following evaluation: refusal heuristics, per-class P/R/F1,
// chain-of-thought classification mode and distractor-position ablation.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "topicguard/core.hpp"
#include "topicguard/curation.hpp"
#include "topicguard/errors.hpp"
#include "topicguard/llm_client.hpp"
#include "topicguard/prompts.hpp"

namespace topicguard {

const std::vector<std::string>& default_refusal_phrases();

// Instruction text followed by the refusal directive. An empty directive
// returns the instruction unchanged.
std::string build_eval_prompt(const TopicalInstruction& instruction,
                              std::string_view directive = default_templates().eval_directive);

enum class Gold { distractor, on_topic };
enum class Prediction { refused, engaged };
std::string_view to_string(Gold g);
std::string_view to_string(Prediction p);

struct Classification {
  Prediction predicted = Prediction::engaged;
  std::optional<std::string> matched_phrase;
};

// Case-insensitive substring search; the first phrase in list order that
// occurs wins. Throws PreconditionError on an empty phrase list.
Classification classify_response(std::string_view response, std::span<const std::string> phrases);

struct TurnVerdict {
  std::string conversation_id;
  std::size_t turn_index = 0;
  Gold gold = Gold::on_topic;
  Prediction predicted = Prediction::engaged;
  std::string model_response;
  std::optional<std::string> matched_phrase;  // present iff predicted == refused
  bool parse_warning = false;

  bool operator==(const TurnVerdict&) const = default;
};

// Counts from the distractor-class point of view; the on-topic class
// reuses them with roles swapped (its tp is tn here).
struct Confusion {
  std::size_t tp = 0;  // gold distractor, refused
  std::size_t fp = 0;  // gold on-topic, refused
  std::size_t fn = 0;  // gold distractor, engaged
  std::size_t tn = 0;  // gold on-topic, engaged

  bool operator==(const Confusion&) const = default;
};

struct ClassMetrics {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Zero whenever a denominator is zero.
ClassMetrics class_metrics(std::size_t tp, std::size_t fp, std::size_t fn);

struct EvalReport {
  std::string mode;  // "conversational" | "cot"
  std::string model;
  std::string config_fingerprint;
  Confusion confusion;
  ClassMetrics distractor;
  ClassMetrics on_topic;
  std::size_t warnings = 0;
  std::vector<TurnVerdict> verdicts;  // ordered by (conversation_id, turn_index)
};

// Sorts verdicts and derives confusion counts and both classes' metrics.
EvalReport assemble_report(std::vector<TurnVerdict> verdicts, std::string mode);

ordered_json to_json(const EvalReport& report);
std::string render_table(const EvalReport& report);

struct EvalOptions {
  std::vector<std::string> phrases = default_refusal_phrases();
  PromptTemplates templates = default_templates();
  // Gold bot reply shown after earlier distractors in the context.
  std::string refusal_context = std::string(kRefusalTemplate);
  std::size_t max_parallel = 4;
  std::string config_fingerprint;
  // Written when the run fails part-way; feed it back as resume_from.
  std::optional<std::filesystem::path> partial_path;
  std::optional<std::filesystem::path> resume_from;
};

class EvalInterrupted : public Error {
 public:
  EvalInterrupted(const std::string& what, std::string resume_token, std::size_t completed)
      : Error(what), resume_token_(std::move(resume_token)), completed_(completed) {}
  // Path of the persisted partial report (empty when none was written).
  const std::string& resume_token() const noexcept { return resume_token_; }
  std::size_t completed_conversations() const noexcept { return completed_; }

 private:
  std::string resume_token_;
  std::size_t completed_;
};

// Gold-context turn sequence: the conversation's distractors are inserted
// after their anchors, each answered with `refusal_context`.
std::vector<Turn> evaluation_turns(const Conversation& conv, std::string_view refusal_context);

// Every user turn is sent with the system prompt and all prior gold turns at
// temperature 0, and the reply is classified with the phrase heuristic.
EvalReport run_conversational_eval(const Dataset& dataset, Backend& backend,
                                   const EvalOptions& options = {});

// One classification call per user turn; a final "no" marks the turn as a
// detected distractor.
EvalReport run_cot_classification(const Dataset& dataset, Backend& backend,
                                  const EvalOptions& options = {});

struct AblationTable {
  std::vector<int> positions;
  std::vector<std::size_t> engaged;
  std::vector<std::size_t> total;
  std::vector<std::size_t> skipped;  // conversations too short for the position
  std::vector<double> engagement;    // engaged / total, 0 when total is 0
};

inline constexpr int kDefaultAblationPositions[] = {1, 3, 5, 7, 9};

// Inserts bank[i % bank.size()] after the p-th bot turn (1-based) of
// conversation i and records whether the model engages.
AblationTable position_ablation(std::span<const Conversation> conversations,
                                std::span<const std::string> bank, Backend& backend,
                                std::span<const int> positions = kDefaultAblationPositions,
                                const EvalOptions& options = {});

ordered_json to_json(const AblationTable& table);
std::string render_table(const AblationTable& table);

// JSONL of {conversation_id, bot_turn | anchor_index, distractor[, rule_type]}.
// Attached distractors get source=human; quoted bot turns are resolved with
// anchor_distractor.
Dataset ingest_human_distractors(const std::filesystem::path& path, const Dataset& dataset,
                                 double min_anchor_score = 0.5, bool replace_existing = false);

}  // namespace topicguard
