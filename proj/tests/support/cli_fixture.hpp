#pragma once

// Helpers for driving the CLI against scripted backends. A script is
// captured by running the library over the simulated model with every call
// recorded; the CLI then replays it through a strict mock backend.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include <topicguard/evalharness.hpp>
#include <topicguard/llm_client.hpp>
#include <topicguard/pipeline.hpp>

#include "commands.hpp"
#include "config.hpp"
#include "sim_llm.hpp"

namespace topicguard::testing {

struct CliResult {
  int code = 0;
  std::string out;
  std::string err;
};

inline CliResult run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  CliResult r;
  r.code = cli::run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

// Config with one strict mock backend per role, all replaying `script`.
inline nlohmann::ordered_json replay_config(const std::string& script, const std::vector<std::string>& domains,
                                            std::size_t scenarios_per_domain, std::size_t conversations = 2) {
  using oj = nlohmann::ordered_json;
  oj backend{{"type", "mock"}, {"script", script}, {"miss", "error"}, {"hash_embedding_dim", 0}};
  oj policy = oj::object();
  for (const auto& d : domains) policy[d] = "train";
  if (policy.contains("travel")) policy["travel"] = "val";
  if (policy.contains("banking")) policy["banking"] = "test";
  return oj{{"generation",
             {{"domains", domains},
              {"scenarios_per_domain", scenarios_per_domain},
              {"conversations_per_scenario", conversations}}},
            {"backends", {{"generator", backend}, {"judge", backend}, {"embedder", backend}, {"candidate", backend}}},
            {"paths", {{"workspace", "workspace"}}},
            {"split_policy", policy},
            {"max_parallel", 4}};
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream(p, std::ios::binary) << s;
}

// Runs generate all + conversational evaluation in-process over the
// simulated model, recording every exchange into `script`.
inline void capture_script(const std::filesystem::path& config_path, const std::filesystem::path& script,
                           const SimOptions& opts = {}) {
  // The config names the script, so it has to exist before it is loaded.
  write_text(script, "");
  const auto cfg = cli::config_from_json(nlohmann::json::parse(std::ifstream(config_path)),
                                         config_path.parent_path());
  auto sim = make_sim_backend(opts, "mock");
  auto rec = std::make_shared<RecordingBackend>(sim, std::make_shared<AuditLog>(script));
  const auto scratch = std::filesystem::temp_directory_path() /
                       ("topicguard-capture-" + std::to_string(std::hash<std::string>{}(script.string())));
  std::filesystem::remove_all(scratch);
  const Workspace ws(scratch);
  PipelineContext ctx;
  ctx.gen = cfg.generation;
  ctx.templates = cfg.templates;
  ctx.generator = rec.get();
  ctx.judge = rec.get();
  ctx.embedder = rec.get();
  ctx.max_parallel = 8;
  ctx.curation_mode = cfg.curation_mode;
  ctx.refusal = cfg.refusal;
  run_all(ws, ctx);
  EvalOptions eo;
  eo.phrases = cfg.refusal_phrases;
  eo.templates = cfg.templates;
  eo.refusal_context = cfg.refusal;
  eo.max_parallel = 8;
  run_conversational_eval(read_jsonl(ws.distractors()), *rec, eo);
  std::filesystem::remove_all(scratch);
}

}  // namespace topicguard::testing
