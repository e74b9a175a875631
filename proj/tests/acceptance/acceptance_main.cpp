// Acceptance checks: one PASS/FAIL/SKIP line per criterion. Exits nonzero
// when any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <algorithm>
#include <bit>
#include <map>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include <topicguard/core.hpp>
#include <topicguard/curation.hpp>
#include <topicguard/evalharness.hpp>
#include <topicguard/llm_client.hpp>
#include <topicguard/mock_backend.hpp>
#include <topicguard/pipeline.hpp>
#include <topicguard/textmetrics.hpp>
#include <topicguard/util.hpp>

#include "cli_fixture.hpp"
#include "random_data.hpp"
#include "sim_llm.hpp"
#include "temp_dir.hpp"

namespace fs = std::filesystem;
using namespace topicguard;
using Clock = std::chrono::steady_clock;

namespace {

enum class Outcome { pass, fail, skip };

struct Check {
  Outcome outcome = Outcome::pass;
  std::string detail;
};

Check pass(std::string d) { return {Outcome::pass, std::move(d)}; }
Check fail(std::string d) { return {Outcome::fail, std::move(d)}; }

std::string fmt(double x, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << std::fixed << x;
  return os.str();
}

// --- 1 ----------------------------------------------------------------------

std::size_t brute_lcs(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  const auto& s = a.size() <= b.size() ? a : b;
  const auto& t = a.size() <= b.size() ? b : a;
  std::size_t best = 0;
  for (std::uint32_t mask = 0; mask < (1u << s.size()); ++mask) {
    const auto k = static_cast<std::size_t>(std::popcount(mask));
    if (k <= best) continue;
    std::size_t pos = 0;
    bool ok = true;
    for (std::size_t i = 0; i < s.size() && ok; ++i) {
      if (!(mask & (1u << i))) continue;
      while (pos < t.size() && t[pos] != s[i]) ++pos;
      ok = pos < t.size();
      ++pos;
    }
    if (ok) best = k;
  }
  return best;
}

Check rouge_oracle() {
  const auto start = Clock::now();
  std::mt19937 rng(20240601);
  static const std::vector<std::string> vocab = {"the", "cat", "sat", "ran", "on", "mat"};
  std::uniform_int_distribution<std::size_t> len(0, 8), pick(0, vocab.size() - 1);
  std::size_t mismatches = 0;
  for (int n = 0; n < 1000; ++n) {
    std::vector<std::string> a(len(rng)), b(len(rng));
    for (auto& t : a) t = vocab[pick(rng)];
    for (auto& t : b) t = vocab[pick(rng)];
    const std::size_t l = brute_lcs(a, b);
    const double f = (a.empty() || b.empty() || l == 0) ? 0.0 : 2.0 * double(l) / double(a.size() + b.size());
    if (lcs_length(a, b) != l || std::abs(rouge_l(a, b).f - f) > 1e-12) ++mismatches;
  }
  const double example = rouge_l_f("the cat sat", "the cat ran");
  const double secs = std::chrono::duration<double>(Clock::now() - start).count();
  const bool ok = mismatches == 0 && std::abs(example - 2.0 / 3.0) <= 1e-12 && secs < 5.0;
  return {ok ? Outcome::pass : Outcome::fail, std::to_string(mismatches) + "/1000 mismatches, example=" +
                                                  fmt(example, 12) + ", " + fmt(secs, 3) + " s"};
}

// --- 2 ----------------------------------------------------------------------

Check cosine_identities() {
  const auto start = Clock::now();
  std::mt19937 rng(99);
  std::normal_distribution<double> n;
  std::uniform_int_distribution<std::size_t> dim(1, 256);
  double worst = 0.0;
  for (int k = 0; k < 1000; ++k) {
    std::vector<double> u(dim(rng)), v, neg, scaled;
    for (auto& x : u) x = n(rng);
    const double c = std::exp(4.0 * n(rng));
    for (double x : u) {
      v.push_back(n(rng));
      neg.push_back(-x);
      scaled.push_back(c * x);
    }
    worst = std::max({worst, std::abs(cosine(u, u) - 1.0), std::abs(cosine(u, neg) + 1.0),
                      std::abs(cosine(scaled, v) - cosine(u, v))});
  }
  const double secs = std::chrono::duration<double>(Clock::now() - start).count();
  const bool ok = worst <= 1e-12 && secs < 1.0;
  std::ostringstream d;
  d << "max deviation " << worst << ", " << fmt(secs, 3) << " s";
  return {ok ? Outcome::pass : Outcome::fail, d.str()};
}

// --- 3 ----------------------------------------------------------------------

Check filtering_contract() {
  constexpr std::size_t kN = 60, kDim = 64;
  // Scenario texts over disjoint vocabularies; embeddings along distinct axes.
  std::vector<std::string> texts;
  std::vector<EmbeddingVector> emb;
  for (std::size_t i = 0; i < kN; ++i) {
    std::string t;
    for (int w = 0; w < 6; ++w) t += (w ? " " : "") + std::string("w") + std::to_string(i) + "x" + std::to_string(w);
    texts.push_back(t);
    EmbeddingVector e{std::vector<double>(kDim, 0.0), "mock"};
    e.values[i] = 1.0;
    emb.push_back(std::move(e));
  }
  // Exact duplicate: 10 repeats 3.
  texts[10] = texts[3];
  emb[10] = emb[3];
  // Near-paraphrase by meaning only: 41 sits at cosine 0.95 from 22.
  emb[41].values.assign(kDim, 0.0);
  emb[41].values[22] = 0.95;
  emb[41].values[41] = std::sqrt(1.0 - 0.95 * 0.95);

  const auto pairs = pairwise_flags(texts, emb, 0.7, 0.9, 4);
  std::vector<std::pair<std::size_t, std::size_t>> flagged;
  for (const auto& p : pairs) {
    if (p.verdict.flagged) flagged.emplace_back(p.i, p.j);
  }
  const std::vector<std::pair<std::size_t, std::size_t>> expected = {{3, 10}, {22, 41}};
  const bool ok = pairs.size() == 1770 && flagged == expected;
  return {ok ? Outcome::pass : Outcome::fail,
          std::to_string(flagged.size()) + " of " + std::to_string(pairs.size()) + " pairs flagged (" +
              fmt(100.0 * double(flagged.size()) / double(pairs.size()), 2) + "%)"};
}

// --- 4 ----------------------------------------------------------------------

Check curation_structure() {
  std::mt19937 rng(4242);
  std::size_t violations = 0, samples = 0, distractor_turns = 0;
  auto check = [&](const AlignmentSample& s) {
    ++samples;
    for (std::size_t i = 0; i < s.turns.size(); ++i) {
      const Role expected = i % 2 == 0 ? Role::user : Role::bot;
      if (s.turns[i].role != expected) ++violations;
      if (s.turns[i].origin != Origin::distractor) continue;
      ++distractor_turns;
      if (i + 1 >= s.turns.size() || s.turns[i + 1].text != kRefusalTemplate ||
          s.turns[i + 1].text != "I am sorry! I can only answer questions related to the scenario.") {
        ++violations;
      }
    }
  };
  for (std::size_t n = 0; n < 500; ++n) {
    const auto conv = testing::random_conversation(rng, n, 5);
    for (const auto& s : curate_refusals(conv)) check(s);
    for (const auto& s : curate_refusals(conv, kRefusalTemplate, CurationMode::combined)) check(s);
  }
  return {violations == 0 ? Outcome::pass : Outcome::fail,
          std::to_string(violations) + " violations over " + std::to_string(samples) + " samples, " +
              std::to_string(distractor_turns) + " distractor turns"};
}

// --- 5 ----------------------------------------------------------------------

Check metric_identities() {
  std::mt19937 rng(555);
  std::size_t disagreements = 0;
  for (int n = 0; n < 200; ++n) {
    const auto vs = testing::random_verdicts(rng, 80);
    const auto r = assemble_report(vs, "conversational");
    for (const Gold positive : {Gold::distractor, Gold::on_topic}) {
      const Prediction hit = positive == Gold::distractor ? Prediction::refused : Prediction::engaged;
      double tp = 0, fp = 0, fn = 0;
      for (const auto& v : vs) {
        tp += v.gold == positive && v.predicted == hit;
        fp += v.gold != positive && v.predicted == hit;
        fn += v.gold == positive && v.predicted != hit;
      }
      const double p = tp + fp > 0 ? tp / (tp + fp) : 0, rc = tp + fn > 0 ? tp / (tp + fn) : 0;
      const double f = p + rc > 0 ? 2 * p * rc / (p + rc) : 0;
      const auto& m = positive == Gold::distractor ? r.distractor : r.on_topic;
      if (m.precision != p || m.recall != rc || m.f1 != f) ++disagreements;
    }
    if (r.distractor.tp != r.confusion.tp || r.on_topic.tp != r.confusion.tn) ++disagreements;
  }

  // Scripted run: ten distractors, the model refuses five of them and one
  // on-topic turn.
  Dataset ds;
  std::set<std::string> refuse;
  for (int c = 0; c < 2; ++c) {
    Conversation conv;
    conv.id = "scripted/" + std::to_string(c);
    conv.scenario = {"s" + std::to_string(c), "travel", "booking"};
    conv.instruction = {conv.scenario.id, "Help the user book a flight.", std::nullopt};
    for (int k = 0; k < 5; ++k) {
      conv.turns.push_back({Role::user, "on-topic " + std::to_string(c) + "." + std::to_string(k), Origin::on_topic});
      conv.turns.push_back({Role::bot, "reply " + std::to_string(k), Origin::on_topic});
      const std::string d = "distractor " + std::to_string(c) + "." + std::to_string(k);
      conv.distractors.push_back({static_cast<std::size_t>(2 * k + 1), d, DistractorSource::synthetic, std::nullopt});
      if (c == 0) refuse.insert(d);
    }
    ds.conversations.push_back(std::move(conv));
  }
  refuse.insert("on-topic 1.2");
  MockBackend model;
  model.set_responder([&](const ChatRequest& r) {
    return std::string(refuse.contains(r.messages.back().content) ? kRefusalTemplate : "Sure thing.");
  });
  const auto rep = run_conversational_eval(ds, model);
  const bool scripted = rep.confusion.tp == 5 && rep.confusion.fp == 1 && rep.confusion.fn == 5 &&
                        std::abs(rep.distractor.precision - 5.0 / 6.0) <= 1e-9 &&
                        std::abs(rep.distractor.recall - 0.5) <= 1e-9 && std::abs(rep.distractor.f1 - 0.625) <= 1e-9;
  return {disagreements == 0 && scripted ? Outcome::pass : Outcome::fail,
          std::to_string(disagreements) + " disagreements over 200 sets; scripted P=" + fmt(rep.distractor.precision) +
              " R=" + fmt(rep.distractor.recall) + " F1=" + fmt(rep.distractor.f1)};
}

// --- 6 ----------------------------------------------------------------------

Check refusal_heuristic() {
  std::ifstream in(std::string(TOPICGUARD_TEST_DATA_DIR) + "/refusal_fixture.json");
  if (!in) return fail("refusal fixture missing");
  const auto cases = nlohmann::json::parse(in);
  std::size_t right = 0;
  for (const auto& c : cases) {
    const bool refused =
        classify_response(c.at("text").get<std::string>(), default_refusal_phrases()).predicted == Prediction::refused;
    right += refused == c.at("refused").get<bool>();
  }
  return {right == cases.size() && cases.size() == 30 ? Outcome::pass : Outcome::fail,
          std::to_string(right) + "/" + std::to_string(cases.size()) + " correct"};
}

// --- 7 ----------------------------------------------------------------------

std::vector<std::string> artifact_names() {
  return {"scenarios.jsonl",   "flagged_pairs.jsonl", "instructions.jsonl",       "conversations.jsonl",
          "distractors.jsonl", "distractor_candidates.jsonl", "curated.jsonl", "curated_chat.jsonl",
          "eval_conversational.json"};
}

Check end_to_end_determinism(const fs::path& root, fs::path& workspace_out) {
  const auto start = Clock::now();
  const fs::path script = root / "script.jsonl";
  const fs::path config = root / "topicguard.json";
  testing::write_text(config, testing::replay_config(script.string(), {"travel", "banking"}, 10).dump(2));
  testing::capture_script(config, script);

  std::vector<std::map<std::string, std::string>> runs;
  for (int run = 0; run < 2; ++run) {
    const fs::path ws = root / ("run" + std::to_string(run));
    const std::vector<std::vector<std::string>> steps = {
        {"--config", config.string(), "--workspace", ws.string(), "generate", "all"},
        {"--config", config.string(), "--workspace", ws.string(), "generate", "curate"},
        {"--config", config.string(), "--workspace", ws.string(), "evaluate", "conversational"}};
    for (const auto& args : steps) {
      const auto r = testing::run_cli(args);
      if (r.code != 0) return fail("`" + args[4] + " " + args[5] + "` exited " + std::to_string(r.code) + ": " + r.err);
    }
    std::map<std::string, std::string> files;
    for (const auto& name : artifact_names()) {
      if (!fs::exists(ws / name)) return fail("missing artifact " + name);
      files[name] = read_file(ws / name);
    }
    runs.push_back(std::move(files));
    workspace_out = ws;
  }
  std::size_t differing = 0, bytes = 0;
  for (const auto& [name, content] : runs[0]) {
    differing += content != runs[1].at(name);
    bytes += content.size();
  }
  const auto convs = read_jsonl(workspace_out / "conversations.jsonl").size();
  const double secs = std::chrono::duration<double>(Clock::now() - start).count();
  const bool ok = differing == 0 && convs == 40 && secs < 60.0;
  return {ok ? Outcome::pass : Outcome::fail,
          std::to_string(differing) + " of " + std::to_string(runs[0].size()) + " artifacts differ (" +
              std::to_string(bytes) + " bytes, " + std::to_string(convs) + " conversations), " + fmt(secs, 2) + " s"};
}

// --- 8 ----------------------------------------------------------------------

Check structural_scale(const fs::path& root) {
  const auto start = Clock::now();
  auto sim = testing::make_sim_backend();
  const Workspace ws(root / "full");
  PipelineContext ctx;  // defaults: nine domains, 60 scenarios, 2 conversations, 5 distractors
  ctx.generator = sim.get();
  ctx.judge = sim.get();
  ctx.embedder = sim.get();
  ctx.max_parallel = 8;
  ctx.checkpoint_every = 256;
  for (Stage s : {Stage::scenarios, Stage::instructions, Stage::conversations, Stage::distractors}) {
    const auto summary = run_stage(s, ws, ctx);
    if (summary.skipped > 0) return fail(summary.line());
  }
  const auto convs = read_jsonl(ws.conversations());
  std::size_t requested_ok = 0, records = 0;
  for (const auto& line : split_lines(read_file(ws.distractor_candidates()))) {
    if (trim(line).empty()) continue;
    ++records;
    requested_ok += nlohmann::json::parse(line).value("requested", 0) == 5;
  }
  const auto parts = split_by_domain(read_jsonl(ws.distractors()), default_split_policy());
  auto only = [](const Dataset& d, std::string_view dom) {
    return std::all_of(d.conversations.begin(), d.conversations.end(), [&](const Conversation& c) { return c.domain() == dom; });
  };
  auto none = [](const Dataset& d, std::string_view dom) {
    return std::none_of(d.conversations.begin(), d.conversations.end(), [&](const Conversation& c) { return c.domain() == dom; });
  };
  const bool split_ok = parts.val.size() == 120 && parts.test.size() == 120 && only(parts.val, "travel") &&
                        only(parts.test, "banking") && none(parts.train, "travel") && none(parts.train, "banking") &&
                        parts.train.size() == 840;
  const double secs = std::chrono::duration<double>(Clock::now() - start).count();
  const bool ok = convs.size() == 1080 && records == 1080 && requested_ok == 1080 && split_ok;
  return {ok ? Outcome::pass : Outcome::fail,
          std::to_string(convs.size()) + " conversations, " + std::to_string(requested_ok) +
              " requesting 5 candidates; split train/val/test = " + std::to_string(parts.train.size()) + "/" +
              std::to_string(parts.val.size()) + "/" + std::to_string(parts.test.size()) + ", " + fmt(secs, 2) + " s"};
}

// --- 9 ----------------------------------------------------------------------

Check position_ablation_table(const fs::path& workspace) {
  const auto data = read_jsonl(workspace / "conversations.jsonl");
  std::vector<Conversation> convs;
  for (const auto& c : data.conversations) {
    std::size_t bots = 0;
    for (const auto& t : c.turns) bots += t.role == Role::bot;
    if (bots >= 9) convs.push_back(c);
  }
  if (convs.empty()) return fail("no conversation reaches nine bot turns");
  MockBackend model;
  model.set_responder([](const ChatRequest& r) {
    std::size_t assistant = 0;
    for (const auto& m : r.messages) assistant += m.role == MessageRole::assistant;
    return std::string(assistant >= 7 ? "Great question! Here is the answer." : kRefusalTemplate);
  });
  const auto t = position_ablation(convs, testing::off_topic_bank(), model);
  const bool ok = t.engagement == std::vector<double>{0.0, 0.0, 0.0, 1.0, 1.0};
  std::string table;
  for (double e : t.engagement) table += (table.empty() ? "" : ", ") + fmt(e, 1);
  return {ok ? Outcome::pass : Outcome::fail,
          "engagement (" + table + ") over " + std::to_string(convs.size()) + " conversations"};
}

// --- 10 ---------------------------------------------------------------------

Check degenerate_policies(const fs::path& workspace) {
  const auto data = read_jsonl(workspace / "distractors.jsonl");
  using testing::CandidatePolicy;
  auto run = [&](CandidatePolicy p) {
    auto b = testing::make_sim_backend({.candidate = p});
    return run_conversational_eval(data, *b);
  };
  const auto refuse = run(CandidatePolicy::always_refuse);
  const auto engage = run(CandidatePolicy::always_engage);
  const auto perfect = run(CandidatePolicy::perfect);
  const bool ok = refuse.distractor.recall == 1.0 && refuse.on_topic.recall == 0.0 &&
                  engage.distractor.recall == 0.0 && engage.on_topic.recall == 1.0 &&
                  perfect.distractor.f1 == 1.0 && perfect.on_topic.f1 == 1.0;
  return {ok ? Outcome::pass : Outcome::fail,
          "refuse R=" + fmt(refuse.distractor.recall, 1) + "/" + fmt(refuse.on_topic.recall, 1) + ", engage R=" +
              fmt(engage.distractor.recall, 1) + "/" + fmt(engage.on_topic.recall, 1) + ", perfect F1=" +
              fmt(perfect.distractor.f1, 1) + "/" + fmt(perfect.on_topic.f1, 1) + " (distractor/on-topic, " +
              std::to_string(perfect.verdicts.size()) + " turns)"};
}

// --- 11 ---------------------------------------------------------------------

std::string env_or(const char* name, std::string fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : std::move(fallback);
}

Check live_smoke(const fs::path& root) {
  const std::string key = env_or("OPENAI_API_KEY", "");
  if (key.empty()) return {Outcome::skip, "OPENAI_API_KEY not set"};
  EndpointSettings s;
  s.base_url = env_or("TOPICGUARD_LIVE_BASE_URL", "https://api.openai.com/v1");
  s.api_key = key;
  s.model_chat = env_or("TOPICGUARD_LIVE_MODEL", "gpt-4o");
  s.model_embed = env_or("TOPICGUARD_LIVE_EMBED_MODEL", "text-embedding-3-small");
  s.max_parallel = 4;
  auto live = std::make_shared<OpenAICompatibleBackend>(s, make_http_transport(s.base_url, std::chrono::seconds(120)));

  const Workspace ws(root / "live");
  PipelineContext ctx;
  ctx.gen.domains = {"travel"};
  ctx.gen.scenarios_per_domain = 5;
  ctx.gen.conversations_per_scenario = 1;
  ctx.gen.distractors_per_conversation = 5;
  ctx.generator = live.get();
  ctx.judge = live.get();
  ctx.embedder = live.get();
  std::size_t skipped = 0;
  for (Stage st : kAllStages) skipped += run_stage(st, ws, ctx).skipped;
  if (skipped > 0) return fail(std::to_string(skipped) + " malformed conversations after repair");
  const auto report = run_conversational_eval(read_jsonl(ws.distractors()), *live);
  const auto reparsed = nlohmann::json::parse(to_json(report).dump());
  if (!reparsed.contains("distractor")) return fail("report did not round-trip");
  return pass("distractor F1=" + fmt(report.distractor.f1, 3) + ", on-topic F1=" + fmt(report.on_topic.f1, 3) +
              " over " + std::to_string(report.verdicts.size()) + " turns (directional checks reported only)");
}

}  // namespace

int main() {
  testing::TempDir root;
  set_log_sink([](std::string_view, std::string_view) {});
  fs::path replay_ws;

  const std::vector<std::pair<std::string, std::function<Check()>>> criteria = {
      {"ROUGE-L oracle equivalence", rouge_oracle},
      {"cosine identities", cosine_identities},
      {"filtering contract", filtering_contract},
      {"curation structure", curation_structure},
      {"metric identities", metric_identities},
      {"refusal heuristic", refusal_heuristic},
      {"end-to-end determinism", [&] { return end_to_end_determinism(root.path() / "e2e", replay_ws); }},
      {"structural scale check", [&] { return structural_scale(root.path()); }},
      {"position ablation harness", [&] { return position_ablation_table(replay_ws); }},
      {"degenerate policy bounds", [&] { return degenerate_policies(replay_ws); }},
      {"live smoke test", [&] { return live_smoke(root.path()); }},
  };

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Check c;
    try {
      c = criteria[i].second();
    } catch (const std::exception& e) {
      c = fail(std::string("exception: ") + e.what());
    }
    const char* tag = c.outcome == Outcome::pass ? "PASS" : c.outcome == Outcome::fail ? "FAIL" : "SKIP";
    failures += c.outcome == Outcome::fail;
    std::cout << "[" << tag << "] " << (i + 1) << ". " << criteria[i].first << ": " << c.detail << std::endl;
  }
  std::cout << (failures == 0 ? "all criteria met" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
