#pragma once

// Turns conversations with anchored distractors into flattened alignment
// samples answered by a template refusal or a generated mitigation.

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "topicguard/core.hpp"
#include "topicguard/llm_client.hpp"
#include "topicguard/prompts.hpp"

namespace topicguard {

inline constexpr std::string_view kRefusalTemplate =
    "I am sorry! I can only answer questions related to the scenario.";

struct AlignmentSample {
  std::string id;
  std::string conversation_id;
  Scenario scenario;
  std::string system_instruction;
  std::vector<Turn> turns;  // flattened; Turn::origin carries provenance

  bool operator==(const AlignmentSample&) const = default;
};

enum class CurationMode {
  per_distractor,  // one sample per distractor
  combined,        // one sample holding every distractor
};

// Flattens `conv` with the selected distractors (indices into
// conv.distractors). Distractors sharing an anchor keep their list order.
// `responses[k]` answers selected distractor k.
std::vector<Turn> flatten(const Conversation& conv, std::span<const std::size_t> selected,
                          std::span<const std::string> responses, Origin response_origin);

std::vector<AlignmentSample> curate_refusals(const Conversation& conv,
                                             std::string_view refusal = kRefusalTemplate,
                                             CurationMode mode = CurationMode::per_distractor);

// One chat call: instruction, conversation up to the anchor and the
// distractor. Returns the reply verbatim.
std::string generate_mitigation(const Conversation& conv, const Distractor& d, Backend& backend,
                                const PromptTemplates& templates);

// Same sample layout as curate_refusals, answered with mitigations.
std::vector<AlignmentSample> curate_mitigations(const Conversation& conv, Backend& backend,
                                                const PromptTemplates& templates,
                                                CurationMode mode = CurationMode::per_distractor);

// Checks alternation plus: every distractor turn is followed by a refusal
// or mitigation turn. Throws InvariantError.
void validate(const AlignmentSample& sample);

// Core JSONL schema with origins and no separate distractor list.
Conversation to_conversation(const AlignmentSample& sample);
AlignmentSample sample_from_conversation(const Conversation& conv);

// {"id", "messages": [{"role": system|user|assistant, "content"}...]}
ordered_json to_chat_messages(const AlignmentSample& sample);

struct DatasetStats {
  std::size_t samples = 0;
  std::size_t turns = 0;
  std::size_t user_turns = 0;
  std::size_t bot_turns = 0;
  std::size_t distractor_turns = 0;
  double distractor_fraction = 0.0;
  double avg_turns_per_sample = 0.0;
  std::map<std::string, std::size_t> samples_per_domain;
};

DatasetStats dataset_stats(std::span<const AlignmentSample> samples);
ordered_json to_json(const DatasetStats& stats);

}  // namespace topicguard
