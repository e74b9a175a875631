#pragma once

// Stage orchestration over a workspace directory. Every stage reads the
// previous stage's checkpoint, skips items already present in its own
// checkpoint and rewrites it atomically as items complete.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "topicguard/core.hpp"
#include "topicguard/curation.hpp"
#include "topicguard/genpipe.hpp"
#include "topicguard/llm_client.hpp"
#include "topicguard/prompts.hpp"

namespace topicguard {

enum class Stage { scenarios, instructions, conversations, distractors, curate };
inline constexpr Stage kAllStages[] = {Stage::scenarios, Stage::instructions, Stage::conversations,
                                       Stage::distractors, Stage::curate};
std::string_view to_string(Stage s);
std::optional<Stage> parse_stage(std::string_view s);

class Workspace {
 public:
  explicit Workspace(std::filesystem::path root);

  const std::filesystem::path& root() const noexcept { return root_; }
  std::filesystem::path scenarios() const { return root_ / "scenarios.jsonl"; }
  std::filesystem::path flagged_pairs() const { return root_ / "flagged_pairs.jsonl"; }
  std::filesystem::path instructions() const { return root_ / "instructions.jsonl"; }
  std::filesystem::path conversations() const { return root_ / "conversations.jsonl"; }
  std::filesystem::path distractors() const { return root_ / "distractors.jsonl"; }
  std::filesystem::path distractor_candidates() const { return root_ / "distractor_candidates.jsonl"; }
  std::filesystem::path curated() const { return root_ / "curated.jsonl"; }
  std::filesystem::path curated_chat() const { return root_ / "curated_chat.jsonl"; }

  // Checkpoint the stage reads from; nullopt for the first stage.
  std::optional<std::filesystem::path> input_of(Stage s) const;
  std::filesystem::path output_of(Stage s) const;

 private:
  std::filesystem::path root_;
};

struct PipelineContext {
  GenerationConfig gen;
  PromptTemplates templates = default_templates();
  Backend* generator = nullptr;
  Backend* judge = nullptr;     // false-positive screening is skipped when absent
  Backend* embedder = nullptr;  // required by the scenarios stage
  std::size_t max_parallel = 4;
  std::size_t checkpoint_every = 16;
  std::string config_fingerprint;
  CurationMode curation_mode = CurationMode::per_distractor;
  std::string refusal = std::string(kRefusalTemplate);
  bool mitigations = false;
};

struct StageSummary {
  Stage stage = Stage::scenarios;
  std::size_t items = 0;    // work items considered
  std::size_t created = 0;  // produced by this run
  std::size_t reused = 0;   // already checkpointed
  std::size_t skipped = 0;  // given up on after retries (logged)
  std::size_t flagged_pairs = 0;
  std::size_t outputs = 0;  // records in the stage checkpoint

  std::string line() const;
};

// Throws PreconditionError naming the prior stage when its checkpoint is
// missing, ConfigError when a required backend is absent.
StageSummary run_stage(Stage stage, const Workspace& ws, const PipelineContext& ctx);

// Runs every stage in order.
std::vector<StageSummary> run_all(const Workspace& ws, const PipelineContext& ctx);

struct StagePlan {
  Stage stage = Stage::scenarios;
  std::size_t pending_items = 0;
  std::size_t chat_calls = 0;   // lower bound when replies may need retries
  std::size_t embed_calls = 0;
  bool estimated = false;  // derived from config because the input checkpoint is absent

  std::string line() const;
};

// Backend calls a run would issue, without sending any.
StagePlan plan_stage(Stage stage, const Workspace& ws, const PipelineContext& ctx);

// Scenario checkpoint records still in use (not auto-dropped).
std::vector<Scenario> read_scenarios(const std::filesystem::path& path);
std::vector<std::pair<TopicalInstruction, Scenario>> read_instructions(const std::filesystem::path& path);

}  // namespace topicguard
