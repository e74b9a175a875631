#pragma once

// Run configuration for the topicguard CLI: a JSON tree naming the
// generation parameters, the backends and the workspace layout.

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <topicguard/core.hpp>
#include <topicguard/curation.hpp>
#include <topicguard/evalharness.hpp>
#include <topicguard/genpipe.hpp>
#include <topicguard/llm_client.hpp>
#include <topicguard/prompts.hpp>

namespace topicguard::cli {

struct BackendSpec {
  std::string name;
  std::string type = "openai";  // openai | mock

  // openai
  std::string base_url = "https://api.openai.com/v1";
  std::string model = "gpt-4o";
  std::string embedding_model;
  std::string api_key_env = "OPENAI_API_KEY";
  double temperature = 0.7;
  std::optional<int> max_tokens;
  int timeout_s = 120;
  std::size_t max_parallel = 4;
  RetryPolicy retry;

  // mock
  std::optional<std::filesystem::path> script;
  std::string miss = "error";  // error | default
  std::string default_reply;
  std::size_t hash_embedding_dim = 64;  // 0 disables hashed embeddings

  // decorators
  std::optional<std::filesystem::path> audit_log;
  std::optional<std::filesystem::path> replay_cache;
};

struct RunConfig {
  GenerationConfig generation;
  std::map<std::string, BackendSpec> backends;  // generator, judge, embedder, candidate
  std::filesystem::path workspace = "workspace";
  std::filesystem::path outputs;  // defaults to the workspace
  std::optional<std::filesystem::path> templates_dir;
  PromptTemplates templates = default_templates();
  SplitPolicy split = default_split_policy();
  std::vector<std::string> refusal_phrases;
  CurationMode curation_mode = CurationMode::per_distractor;
  bool mitigations = false;
  std::string refusal = std::string(kRefusalTemplate);
  std::vector<int> ablation_positions = {1, 3, 5, 7, 9};
  std::vector<std::string> ablation_bank;
  std::size_t max_parallel = 4;
  std::size_t checkpoint_every = 16;
  std::string fingerprint;  // sha256 of the resolved, location-independent config

  const BackendSpec* backend(const std::string& role) const;
};

// Relative paths resolve against the config file's directory. Throws
// ConfigError on unknown keys, bad values or missing template files.
RunConfig load_config(const std::filesystem::path& path);
RunConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);

// Builds the backend stack: base endpoint, optional replay cache, optional
// audit log (outermost). Credentials come from the environment.
BackendPtr make_backend(const BackendSpec& spec);

}  // namespace topicguard::cli
