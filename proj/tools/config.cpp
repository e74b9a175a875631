#include "config.hpp"

#include <cstdlib>
#include <set>

#include <topicguard/errors.hpp>
#include <topicguard/mock_backend.hpp>
#include <topicguard/util.hpp>

namespace topicguard::cli {

using json = nlohmann::json;

namespace {

void check_keys(const json& j, std::string_view where, std::initializer_list<std::string_view> allowed) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be an object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || a == k;
    if (!ok) throw ConfigError("unknown key '" + k + "' in " + std::string(where));
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, std::string_view where) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string(where) + "." + key + " has the wrong type");
  }
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::filesystem::path& p) {
  return p.is_absolute() ? p : base / p;
}

std::optional<std::filesystem::path> read_path(const json& j, const char* key,
                                               const std::filesystem::path& base, std::string_view where) {
  std::string s;
  read(j, key, s, where);
  if (s.empty()) return std::nullopt;
  return resolve(base, s);
}

BackendSpec parse_backend(const std::string& name, const json& j, const std::filesystem::path& base) {
  const std::string where = "backends." + name;
  check_keys(j, where,
             {"type", "base_url", "model", "embedding_model", "api_key_env", "temperature", "max_tokens",
              "timeout_s", "max_parallel", "retry", "script", "miss", "default_reply", "hash_embedding_dim",
              "audit_log", "replay_cache"});
  BackendSpec b;
  b.name = name;
  read(j, "type", b.type, where);
  if (b.type != "openai" && b.type != "mock") throw ConfigError(where + ".type must be 'openai' or 'mock'");
  read(j, "base_url", b.base_url, where);
  read(j, "model", b.model, where);
  if (b.type == "mock" && !j.contains("model")) b.model = "mock";
  read(j, "embedding_model", b.embedding_model, where);
  if (b.embedding_model.empty()) b.embedding_model = b.model;
  read(j, "api_key_env", b.api_key_env, where);
  read(j, "temperature", b.temperature, where);
  if (b.temperature < 0) throw ConfigError(where + ".temperature must be >= 0");
  if (j.contains("max_tokens") && !j["max_tokens"].is_null()) {
    int t = 0;
    read(j, "max_tokens", t, where);
    if (t <= 0) throw ConfigError(where + ".max_tokens must be positive");
    b.max_tokens = t;
  }
  read(j, "timeout_s", b.timeout_s, where);
  read(j, "max_parallel", b.max_parallel, where);
  if (b.max_parallel == 0) throw ConfigError(where + ".max_parallel must be positive");
  if (auto it = j.find("retry"); it != j.end()) {
    check_keys(*it, where + ".retry", {"attempt_cap", "initial_delay_ms", "multiplier", "max_delay_ms"});
    read(*it, "attempt_cap", b.retry.attempt_cap, where);
    long long ms = b.retry.initial_delay.count();
    read(*it, "initial_delay_ms", ms, where);
    b.retry.initial_delay = std::chrono::milliseconds(ms);
    ms = b.retry.max_delay.count();
    read(*it, "max_delay_ms", ms, where);
    b.retry.max_delay = std::chrono::milliseconds(ms);
    read(*it, "multiplier", b.retry.multiplier, where);
    if (b.retry.attempt_cap < 1) throw ConfigError(where + ".retry.attempt_cap must be >= 1");
  }
  b.script = read_path(j, "script", base, where);
  if (b.script && !std::filesystem::exists(*b.script)) {
    throw ConfigError(where + ".script not found: " + b.script->string());
  }
  read(j, "miss", b.miss, where);
  if (b.miss != "error" && b.miss != "default") throw ConfigError(where + ".miss must be 'error' or 'default'");
  read(j, "default_reply", b.default_reply, where);
  read(j, "hash_embedding_dim", b.hash_embedding_dim, where);
  b.audit_log = read_path(j, "audit_log", base, where);
  b.replay_cache = read_path(j, "replay_cache", base, where);
  return b;
}

// Everything that can change an output byte, and nothing that depends on
// where the files live or how many threads run.
std::string fingerprint_of(const RunConfig& c) {
  ordered_json f;
  const auto& g = c.generation;
  f["generation"] = ordered_json{{"domains", g.domains},
                                 {"scenarios_per_domain", g.scenarios_per_domain},
                                 {"scenarios_per_call", g.scenarios_per_call},
                                 {"conversations_per_scenario", g.conversations_per_scenario},
                                 {"distractors_per_conversation", g.distractors_per_conversation},
                                 {"rouge_threshold", g.rouge_threshold},
                                 {"cosine_threshold", g.cosine_threshold},
                                 {"few_shot_distractors", g.few_shot_distractors},
                                 {"seed_scenarios", g.seed_scenarios},
                                 {"auto_drop_similar", g.auto_drop_similar},
                                 {"conversation_retry_cap", g.conversation_retry_cap},
                                 {"anchor_min_score", g.anchor_min_score},
                                 {"allow_bot_first", g.allow_bot_first},
                                 {"id_seed", g.id_seed}};
  f["backends"] = ordered_json::object();
  for (const auto& [name, b] : c.backends) {
    ordered_json bj{{"type", b.type},
                    {"model", b.model},
                    {"embedding_model", b.embedding_model},
                    {"temperature", b.temperature},
                    {"max_tokens", b.max_tokens ? ordered_json(*b.max_tokens) : ordered_json(nullptr)}};
    if (b.type == "openai") bj["base_url"] = b.base_url;
    if (b.type == "mock") {
      bj["miss"] = b.miss;
      bj["default_reply"] = b.default_reply;
      bj["hash_embedding_dim"] = b.hash_embedding_dim;
      bj["script_sha256"] = b.script ? sha256_hex(read_file(*b.script)) : "";
    }
    f["backends"][name] = std::move(bj);
  }
  const auto& t = c.templates;
  f["templates"] = ordered_json{{"scenarios", t.scenarios},           {"instruction", t.instruction},
                                {"conversation", t.conversation},     {"distractors", t.distractors},
                                {"classification", t.classification}, {"mitigation", t.mitigation},
                                {"rule_annotation", t.rule_annotation}, {"rule_attribution", t.rule_attribution},
                                {"eval_directive", t.eval_directive}};
  f["split"] = ordered_json::object();
  for (const auto& [d, s] : c.split) f["split"][d] = to_string(s);
  f["refusal_phrases"] = c.refusal_phrases;
  f["curation"] = ordered_json{{"mode", c.curation_mode == CurationMode::combined ? "combined" : "per_distractor"},
                               {"mitigations", c.mitigations},
                               {"refusal", c.refusal}};
  f["ablation"] = ordered_json{{"positions", c.ablation_positions}, {"bank", c.ablation_bank}};
  return sha256_hex(f.dump());
}

}  // namespace

const BackendSpec* RunConfig::backend(const std::string& role) const {
  auto it = backends.find(role);
  return it == backends.end() ? nullptr : &it->second;
}

RunConfig config_from_json(const json& j, const std::filesystem::path& base) {
  check_keys(j, "config",
             {"generation", "backends", "paths", "split_policy", "refusal_phrases", "curation", "evaluation",
              "max_parallel", "checkpoint_every"});
  RunConfig c;
  c.refusal_phrases = default_refusal_phrases();

  if (auto it = j.find("generation"); it != j.end()) {
    const auto& g = *it;
    check_keys(g, "generation",
               {"domains", "scenarios_per_domain", "scenarios_per_call", "conversations_per_scenario",
                "distractors_per_conversation", "rouge_threshold", "cosine_threshold", "few_shot_distractors",
                "seed_scenarios", "auto_drop_similar", "conversation_retry_cap", "anchor_min_score",
                "allow_bot_first", "id_seed"});
    auto& cfg = c.generation;
    read(g, "domains", cfg.domains, "generation");
    read(g, "scenarios_per_domain", cfg.scenarios_per_domain, "generation");
    read(g, "scenarios_per_call", cfg.scenarios_per_call, "generation");
    read(g, "conversations_per_scenario", cfg.conversations_per_scenario, "generation");
    read(g, "distractors_per_conversation", cfg.distractors_per_conversation, "generation");
    read(g, "rouge_threshold", cfg.rouge_threshold, "generation");
    read(g, "cosine_threshold", cfg.cosine_threshold, "generation");
    read(g, "few_shot_distractors", cfg.few_shot_distractors, "generation");
    read(g, "seed_scenarios", cfg.seed_scenarios, "generation");
    read(g, "auto_drop_similar", cfg.auto_drop_similar, "generation");
    read(g, "conversation_retry_cap", cfg.conversation_retry_cap, "generation");
    read(g, "anchor_min_score", cfg.anchor_min_score, "generation");
    read(g, "allow_bot_first", cfg.allow_bot_first, "generation");
    read(g, "id_seed", cfg.id_seed, "generation");
  }
  validate(c.generation);

  if (auto it = j.find("backends"); it != j.end()) {
    if (!it->is_object()) throw ConfigError("backends must be an object");
    static const std::set<std::string> kRoles = {"generator", "judge", "embedder", "candidate"};
    for (const auto& [name, spec] : it->items()) {
      if (!kRoles.contains(name)) {
        throw ConfigError("unknown backend role '" + name + "' (expected generator, judge, embedder, candidate)");
      }
      c.backends.emplace(name, parse_backend(name, spec, base));
    }
  }

  if (auto it = j.find("paths"); it != j.end()) {
    check_keys(*it, "paths", {"workspace", "outputs", "templates"});
    if (auto p = read_path(*it, "workspace", base, "paths")) c.workspace = *p;
    if (auto p = read_path(*it, "outputs", base, "paths")) c.outputs = *p;
    c.templates_dir = read_path(*it, "templates", base, "paths");
  } else {
    c.workspace = base / "workspace";
  }
  if (c.outputs.empty()) c.outputs = c.workspace;
  if (c.templates_dir) c.templates = load_templates(*c.templates_dir);

  if (auto it = j.find("split_policy"); it != j.end()) {
    if (!it->is_object()) throw ConfigError("split_policy must be an object");
    c.split.clear();
    for (const auto& [domain, v] : it->items()) {
      auto s = v.is_string() ? parse_split(v.get<std::string>()) : std::nullopt;
      if (!s) throw ConfigError("split_policy." + domain + " must be train, val or test");
      c.split.emplace(domain, *s);
    }
  }

  read(j, "refusal_phrases", c.refusal_phrases, "config");
  if (c.refusal_phrases.empty()) throw ConfigError("refusal_phrases must not be empty");

  if (auto it = j.find("curation"); it != j.end()) {
    check_keys(*it, "curation", {"mode", "mitigations", "refusal"});
    std::string mode = "per_distractor";
    read(*it, "mode", mode, "curation");
    if (mode == "per_distractor") {
      c.curation_mode = CurationMode::per_distractor;
    } else if (mode == "combined") {
      c.curation_mode = CurationMode::combined;
    } else {
      throw ConfigError("curation.mode must be per_distractor or combined");
    }
    read(*it, "mitigations", c.mitigations, "curation");
    read(*it, "refusal", c.refusal, "curation");
    if (trim(c.refusal).empty()) throw ConfigError("curation.refusal must not be empty");
  }

  if (auto it = j.find("evaluation"); it != j.end()) {
    check_keys(*it, "evaluation", {"ablation_positions", "ablation_bank", "ablation_bank_file"});
    read(*it, "ablation_positions", c.ablation_positions, "evaluation");
    read(*it, "ablation_bank", c.ablation_bank, "evaluation");
    if (auto p = read_path(*it, "ablation_bank_file", base, "evaluation")) {
      if (!std::filesystem::exists(*p)) throw ConfigError("ablation bank file not found: " + p->string());
      for (auto& line : split_lines(read_file(*p))) {
        if (!trim(line).empty()) c.ablation_bank.push_back(trim(line));
      }
    }
    for (int p : c.ablation_positions) {
      if (p < 1) throw ConfigError("evaluation.ablation_positions are 1-based");
    }
  }

  read(j, "max_parallel", c.max_parallel, "config");
  if (c.max_parallel == 0) throw ConfigError("max_parallel must be positive");
  read(j, "checkpoint_every", c.checkpoint_every, "config");
  if (c.checkpoint_every == 0) throw ConfigError("checkpoint_every must be positive");

  c.fingerprint = fingerprint_of(c);
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  json j = json::parse(read_file(path), nullptr, false);
  if (j.is_discarded()) throw ConfigError("config file is not valid JSON: " + path.string());
  return config_from_json(j, std::filesystem::absolute(path).parent_path());
}

BackendPtr make_backend(const BackendSpec& spec) {
  BackendPtr base;
  if (spec.type == "mock") {
    MockScript script = spec.script ? load_mock_script(*spec.script) : MockScript{};
    auto mock = std::make_shared<MockBackend>(
        std::move(script), spec.miss == "default" ? MissPolicy::fixed_default : MissPolicy::error,
        spec.default_reply);
    mock->set_model(spec.model);
    mock->set_temperature(spec.temperature);
    if (spec.hash_embedding_dim > 0) {
      const std::size_t dim = spec.hash_embedding_dim;
      mock->set_embedder([dim](const std::string& text) { return hash_embedding(text, dim); });
    }
    base = mock;
  } else {
    EndpointSettings s;
    s.base_url = spec.base_url;
    if (const char* key = std::getenv(spec.api_key_env.c_str())) s.api_key = key;
    s.model_chat = spec.model;
    s.model_embed = spec.embedding_model;
    s.max_parallel = spec.max_parallel;
    s.retry = spec.retry;
    s.temperature = spec.temperature;
    s.max_tokens = spec.max_tokens;
    base = std::make_shared<OpenAICompatibleBackend>(
        s, make_http_transport(spec.base_url, std::chrono::seconds(spec.timeout_s)));
  }
  if (spec.replay_cache) base = std::make_shared<CachingBackend>(base, *spec.replay_cache);
  if (spec.audit_log) base = std::make_shared<RecordingBackend>(base, std::make_shared<AuditLog>(*spec.audit_log));
  return base;
}

}  // namespace topicguard::cli
