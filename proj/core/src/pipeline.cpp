#include "topicguard/pipeline.hpp"

#include <algorithm>
#include <map>
#include <mutex>
#include <set>

#include "topicguard/errors.hpp"
#include "topicguard/util.hpp"

namespace topicguard {

using json = nlohmann::json;

namespace {

constexpr std::pair<Stage, std::string_view> kStageNames[] = {
    {Stage::scenarios, "scenarios"},
    {Stage::instructions, "instructions"},
    {Stage::conversations, "conversations"},
    {Stage::distractors, "distractors"},
    {Stage::curate, "curate"},
};

// Collects one output slot per work item and rewrites the checkpoint file
// every `every` completions. Slots hold zero or more JSONL lines.
class CheckpointWriter {
 public:
  CheckpointWriter(std::filesystem::path path, std::size_t slots, std::size_t every)
      : path_(std::move(path)), slots_(slots), every_(std::max<std::size_t>(every, 1)) {}

  void set(std::size_t i, std::string lines) {
    std::lock_guard lock(mu_);
    slots_.at(i) = std::move(lines);
    if (++pending_ >= every_) flush_locked();
  }

  void flush() {
    std::lock_guard lock(mu_);
    flush_locked();
  }

  std::size_t records() const {
    std::lock_guard lock(mu_);
    std::size_t n = 0;
    for (const auto& s : slots_) {
      if (s) n += static_cast<std::size_t>(std::count(s->begin(), s->end(), '\n'));
    }
    return n;
  }

 private:
  void flush_locked() {
    std::string out;
    for (const auto& s : slots_) {
      if (s) out += *s;
    }
    atomic_write_file(path_, out);
    pending_ = 0;
  }

  std::filesystem::path path_;
  std::vector<std::optional<std::string>> slots_;
  std::size_t every_;
  std::size_t pending_ = 0;
  mutable std::mutex mu_;
};

std::vector<json> read_records(const std::filesystem::path& path) {
  std::vector<json> out;
  if (!std::filesystem::exists(path)) return out;
  const auto lines = split_lines(read_file(path));
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    json j = json::parse(lines[i], nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      throw ParseError("corrupt checkpoint record in " + path.string(), i + 1, lines[i]);
    }
    out.push_back(std::move(j));
  }
  return out;
}

std::string line_of(ordered_json j, const PipelineContext& ctx) {
  if (!ctx.config_fingerprint.empty()) j["config_fingerprint"] = ctx.config_fingerprint;
  return j.dump() + "\n";
}

void require_input(const Workspace& ws, Stage stage) {
  auto in = ws.input_of(stage);
  if (in && !std::filesystem::exists(*in)) {
    const Stage prior = static_cast<Stage>(static_cast<int>(stage) - 1);
    throw PreconditionError("stage '" + std::string(to_string(stage)) + "' needs the '" +
                            std::string(to_string(prior)) + "' checkpoint (" + in->string() +
                            "); run `generate " + std::string(to_string(prior)) + "` first");
  }
}

void require_generator(const PipelineContext& ctx, Stage stage) {
  if (!ctx.generator) {
    throw ConfigError("stage '" + std::string(to_string(stage)) + "' needs a generator backend");
  }
}

// Runs fn over n items, flushing the writers even when items fail.
template <typename Fn>
void run_items(std::size_t n, const PipelineContext& ctx, std::initializer_list<CheckpointWriter*> writers,
               Fn&& fn) {
  try {
    parallel_for(n, ctx.max_parallel, fn);
  } catch (...) {
    for (auto* w : writers) w->flush();
    throw;
  }
  for (auto* w : writers) w->flush();
}

struct ScenarioRecord {
  Scenario scenario;
  bool dropped = false;
};

std::vector<ScenarioRecord> read_scenario_records(const std::filesystem::path& path) {
  std::vector<ScenarioRecord> out;
  for (const auto& j : read_records(path)) {
    out.push_back({scenario_from_json(j), j.value("dropped", false)});
  }
  return out;
}

ordered_json pair_json(const std::string& domain, const std::vector<Scenario>& list, const PairVerdict& p) {
  ordered_json j;
  j["domain"] = domain;
  j["first_id"] = list[p.i].id;
  j["second_id"] = list[p.j].id;
  j["first"] = list[p.i].text;
  j["second"] = list[p.j].text;
  j["rouge_l"] = p.verdict.rouge_l_f;
  j["cosine"] = p.verdict.cosine;
  return j;
}

StageSummary run_scenarios(const Workspace& ws, const PipelineContext& ctx) {
  require_generator(ctx, Stage::scenarios);
  if (!ctx.embedder) throw ConfigError("stage 'scenarios' needs an embedder backend for similarity filtering");
  const auto& domains = ctx.gen.domains;

  std::map<std::string, std::vector<ScenarioRecord>> existing;
  for (auto& r : read_scenario_records(ws.scenarios())) existing[r.scenario.domain].push_back(std::move(r));
  std::map<std::string, std::string> existing_pairs;
  for (const auto& j : read_records(ws.flagged_pairs())) {
    ordered_json o = j;
    existing_pairs[j.value("domain", "")] += line_of(std::move(o), PipelineContext{});
  }

  CheckpointWriter scen_out(ws.scenarios(), domains.size(), 1);
  CheckpointWriter pair_out(ws.flagged_pairs(), domains.size(), 1);
  StageSummary sum{Stage::scenarios};
  sum.items = domains.size();
  std::mutex mu;

  auto emit = [&](std::size_t d, const std::vector<ScenarioRecord>& recs, std::string pairs) {
    std::string lines;
    for (const auto& r : recs) {
      ordered_json j = to_json(r.scenario);
      if (r.dropped) j["dropped"] = true;
      lines += line_of(std::move(j), ctx);
    }
    scen_out.set(d, std::move(lines));
    pair_out.set(d, std::move(pairs));
  };

  run_items(domains.size(), ctx, {&scen_out, &pair_out}, [&](std::size_t d) {
    const std::string& domain = domains[d];
    const auto& have = existing[domain];
    if (have.size() >= ctx.gen.scenarios_per_domain) {
      emit(d, have, existing_pairs[domain]);
      std::lock_guard lock(mu);
      ++sum.reused;
      return;
    }
    std::vector<Scenario> prior;
    for (const auto& r : have) prior.push_back(r.scenario);
    const auto all = generate_scenarios(domain, ctx.gen, *ctx.generator, ctx.templates, prior);

    std::vector<ScenarioRecord> recs;
    std::string pairs;
    std::size_t flagged = 0;
    if (all.size() >= 2) {
      const auto filtered = filter_scenarios(all, ctx.gen, *ctx.embedder);
      std::set<std::string> kept;
      for (const auto& s : filtered.kept) kept.insert(s.id);
      for (const auto& s : all) recs.push_back({s, !kept.contains(s.id)});
      for (const auto& p : filtered.flagged_pairs) pairs += line_of(pair_json(domain, all, p), ctx);
      flagged = filtered.flagged_pairs.size();
    } else {
      for (const auto& s : all) recs.push_back({s, false});
    }
    emit(d, recs, std::move(pairs));
    std::lock_guard lock(mu);
    ++sum.created;
    sum.flagged_pairs += flagged;
  });
  sum.outputs = scen_out.records();
  return sum;
}

StageSummary run_instructions(const Workspace& ws, const PipelineContext& ctx) {
  require_input(ws, Stage::instructions);
  require_generator(ctx, Stage::instructions);
  const auto scenarios = read_scenarios(ws.scenarios());
  std::map<std::string, TopicalInstruction> existing;
  for (auto& [instr, s] : read_instructions(ws.instructions())) existing[s.id] = std::move(instr);

  CheckpointWriter out(ws.instructions(), scenarios.size(), ctx.checkpoint_every);
  StageSummary sum{Stage::instructions};
  sum.items = scenarios.size();
  std::mutex mu;
  run_items(scenarios.size(), ctx, {&out}, [&](std::size_t i) {
    const Scenario& s = scenarios[i];
    bool reused = false;
    TopicalInstruction instr;
    if (auto it = existing.find(s.id); it != existing.end()) {
      instr = it->second;
      reused = true;
    } else {
      instr = generate_instruction(s, *ctx.generator, ctx.templates);
      validate(instr);
    }
    out.set(i, line_of(to_json(instr, s), ctx));
    std::lock_guard lock(mu);
    ++(reused ? sum.reused : sum.created);
  });
  sum.outputs = out.records();
  return sum;
}

std::string conversation_id(const Scenario& s, std::size_t k) { return s.id + "/conv" + std::to_string(k); }

StageSummary run_conversations(const Workspace& ws, const PipelineContext& ctx) {
  require_input(ws, Stage::conversations);
  require_generator(ctx, Stage::conversations);
  const auto instructions = read_instructions(ws.instructions());
  const ValidationOptions vopts{ctx.gen.allow_bot_first};
  std::map<std::string, Conversation> existing;
  for (const auto& j : read_records(ws.conversations())) {
    auto c = conversation_from_json(j);
    existing[c.id] = std::move(c);
  }

  const std::size_t per = ctx.gen.conversations_per_scenario;
  const std::size_t n = instructions.size() * per;
  CheckpointWriter out(ws.conversations(), n, ctx.checkpoint_every);
  StageSummary sum{Stage::conversations};
  sum.items = n;
  std::mutex mu;
  run_items(n, ctx, {&out}, [&](std::size_t i) {
    const auto& [instr, scenario] = instructions[i / per];
    const std::size_t k = i % per;
    const std::string id = conversation_id(scenario, k);
    if (auto it = existing.find(id); it != existing.end()) {
      validate(it->second, vopts);
      out.set(i, line_of(to_json(it->second), ctx));
      std::lock_guard lock(mu);
      ++sum.reused;
      return;
    }
    try {
      Conversation c = generate_conversation(scenario, instr, *ctx.generator, ctx.templates, ctx.gen, k);
      out.set(i, line_of(to_json(c), ctx));
      std::lock_guard lock(mu);
      ++sum.created;
    } catch (const GenerationError& e) {
      log_warning(std::string("skipping ") + id + ": " + e.what());
      std::lock_guard lock(mu);
      ++sum.skipped;
    }
  });
  sum.outputs = out.records();
  return sum;
}

ordered_json candidate_json(const DistractorCandidate& c) {
  ordered_json j;
  j["bot_turn"] = c.bot_turn_text;
  j["distractor"] = c.distractor_text;
  j["resolved_anchor"] = c.resolved_anchor ? ordered_json(*c.resolved_anchor) : ordered_json(nullptr);
  j["match_score"] = c.match_score;
  j["judge_verdict"] = c.judge_verdict ? ordered_json(to_string(*c.judge_verdict)) : ordered_json(nullptr);
  return j;
}

StageSummary run_distractors(const Workspace& ws, const PipelineContext& ctx) {
  require_input(ws, Stage::distractors);
  require_generator(ctx, Stage::distractors);
  const ValidationOptions vopts{ctx.gen.allow_bot_first};
  const Dataset convs = read_jsonl(ws.conversations(), vopts);

  std::map<std::string, std::pair<Conversation, std::string>> existing;
  {
    std::map<std::string, std::string> cand_lines;
    for (const auto& j : read_records(ws.distractor_candidates())) {
      cand_lines[j.value("conversation_id", "")] = ordered_json(j).dump() + "\n";
    }
    for (const auto& j : read_records(ws.distractors())) {
      auto c = conversation_from_json(j);
      auto it = cand_lines.find(c.id);
      if (it == cand_lines.end()) continue;  // incomplete item, redo it
      std::string id = c.id;
      existing.emplace(std::move(id), std::pair{std::move(c), it->second});
    }
  }

  const std::size_t n = convs.size();
  CheckpointWriter out(ws.distractors(), n, ctx.checkpoint_every);
  CheckpointWriter cand_out(ws.distractor_candidates(), n, ctx.checkpoint_every);
  StageSummary sum{Stage::distractors};
  sum.items = n;
  std::mutex mu;
  run_items(n, ctx, {&out, &cand_out}, [&](std::size_t i) {
    const Conversation& base = convs.conversations[i];
    if (auto it = existing.find(base.id); it != existing.end()) {
      validate(it->second.first, vopts);
      out.set(i, line_of(to_json(it->second.first), ctx));
      cand_out.set(i, it->second.second);
      std::lock_guard lock(mu);
      ++sum.reused;
      return;
    }
    std::vector<DistractorCandidate> cands;
    try {
      cands = generate_distractors(base, *ctx.generator, ctx.gen, ctx.templates);
    } catch (const ParseError& e) {
      log_warning("skipping distractors for " + base.id + ": " + e.what() + "; raw reply: " + e.raw());
      std::lock_guard lock(mu);
      ++sum.skipped;
      return;
    }

    Conversation conv = base;
    conv.distractors.clear();
    std::vector<DistractorCandidate> anchored;
    std::vector<DistractorCandidate> record;
    for (auto& c : cands) {
      try {
        anchor_distractor(conv, c, ctx.gen.anchor_min_score);
        anchored.push_back(c);
      } catch (const AnchoringError& e) {
        log_warning(e.what());
        record.push_back(c);
      }
    }
    std::vector<DistractorCandidate> kept = anchored;
    if (ctx.judge && !anchored.empty()) {
      std::vector<DistractorCandidate> judged;
      kept = screen_false_positives(conv, anchored, *ctx.judge, ctx.templates, &judged);
      record.insert(record.end(), judged.begin(), judged.end());
    } else {
      record.insert(record.end(), anchored.begin(), anchored.end());
    }
    std::set<std::size_t> anchors;
    for (const auto& c : kept) {
      if (!anchors.insert(*c.resolved_anchor).second) {
        log_info(conv.id + ": several distractors share anchor " + std::to_string(*c.resolved_anchor));
      }
      Distractor d;
      d.anchor_index = *c.resolved_anchor;
      d.text = c.distractor_text;
      conv.distractors.push_back(std::move(d));
    }
    validate(conv, vopts);

    ordered_json cj;
    cj["conversation_id"] = conv.id;
    cj["requested"] = ctx.gen.distractors_per_conversation;
    cj["candidates"] = ordered_json::array();
    for (const auto& c : record) cj["candidates"].push_back(candidate_json(c));
    out.set(i, line_of(to_json(conv), ctx));
    cand_out.set(i, line_of(std::move(cj), ctx));
    std::lock_guard lock(mu);
    ++sum.created;
  });
  sum.outputs = out.records();
  return sum;
}

StageSummary run_curate(const Workspace& ws, const PipelineContext& ctx) {
  require_input(ws, Stage::curate);
  if (ctx.mitigations) require_generator(ctx, Stage::curate);
  const ValidationOptions vopts{ctx.gen.allow_bot_first};
  const Dataset convs = read_jsonl(ws.distractors(), vopts);

  std::map<std::string, std::vector<AlignmentSample>> existing;
  for (const auto& j : read_records(ws.curated())) {
    auto s = sample_from_conversation(conversation_from_json(j));
    existing[s.conversation_id].push_back(std::move(s));
  }

  const std::size_t n = convs.size();
  std::vector<std::vector<AlignmentSample>> samples(n);
  CheckpointWriter out(ws.curated(), n, ctx.checkpoint_every);
  StageSummary sum{Stage::curate};
  sum.items = n;
  std::mutex mu;
  run_items(n, ctx, {&out}, [&](std::size_t i) {
    const Conversation& conv = convs.conversations[i];
    bool reused = false;
    if (auto it = existing.find(conv.id); it != existing.end()) {
      samples[i] = it->second;
      reused = true;
    } else if (ctx.mitigations) {
      samples[i] = curate_mitigations(conv, *ctx.generator, ctx.templates, ctx.curation_mode);
    } else {
      samples[i] = curate_refusals(conv, ctx.refusal, ctx.curation_mode);
    }
    std::string lines;
    for (const auto& s : samples[i]) {
      validate(s);
      lines += line_of(to_json(to_conversation(s)), ctx);
    }
    out.set(i, std::move(lines));
    std::lock_guard lock(mu);
    ++(reused ? sum.reused : sum.created);
  });

  std::string chat;
  for (const auto& group : samples) {
    for (const auto& s : group) chat += line_of(to_chat_messages(s), ctx);
  }
  atomic_write_file(ws.curated_chat(), chat);
  sum.outputs = out.records();
  return sum;
}

std::size_t ceil_div(std::size_t a, std::size_t b) { return b == 0 ? 0 : (a + b - 1) / b; }

}  // namespace

std::string_view to_string(Stage s) {
  for (const auto& [st, name] : kStageNames) {
    if (st == s) return name;
  }
  return "?";
}

std::optional<Stage> parse_stage(std::string_view s) {
  for (const auto& [st, name] : kStageNames) {
    if (name == s) return st;
  }
  return std::nullopt;
}

Workspace::Workspace(std::filesystem::path root) : root_(std::move(root)) {
  std::error_code ec;
  std::filesystem::create_directories(root_, ec);
  if (ec) throw IoError("cannot create workspace " + root_.string() + ": " + ec.message());
}

std::optional<std::filesystem::path> Workspace::input_of(Stage s) const {
  switch (s) {
    case Stage::scenarios: return std::nullopt;
    case Stage::instructions: return scenarios();
    case Stage::conversations: return instructions();
    case Stage::distractors: return conversations();
    case Stage::curate: return distractors();
  }
  return std::nullopt;
}

std::filesystem::path Workspace::output_of(Stage s) const {
  switch (s) {
    case Stage::scenarios: return scenarios();
    case Stage::instructions: return instructions();
    case Stage::conversations: return conversations();
    case Stage::distractors: return distractors();
    case Stage::curate: return curated();
  }
  return {};
}

std::string StageSummary::line() const {
  std::string s = std::string(to_string(stage)) + ": " + std::to_string(items) + " items, " +
                  std::to_string(created) + " new, " + std::to_string(reused) + " reused, " +
                  std::to_string(skipped) + " skipped";
  if (stage == Stage::scenarios) s += ", " + std::to_string(flagged_pairs) + " flagged pairs";
  return s + ", " + std::to_string(outputs) + " records";
}

std::string StagePlan::line() const {
  return std::string(to_string(stage)) + ": " + std::to_string(pending_items) + " pending, " +
         std::to_string(chat_calls) + " chat calls, " + std::to_string(embed_calls) + " embedding calls" +
         (estimated ? " (estimated from config)" : "");
}

StageSummary run_stage(Stage stage, const Workspace& ws, const PipelineContext& ctx) {
  validate(ctx.gen);
  StageSummary s;
  switch (stage) {
    case Stage::scenarios: s = run_scenarios(ws, ctx); break;
    case Stage::instructions: s = run_instructions(ws, ctx); break;
    case Stage::conversations: s = run_conversations(ws, ctx); break;
    case Stage::distractors: s = run_distractors(ws, ctx); break;
    case Stage::curate: s = run_curate(ws, ctx); break;
  }
  log_info(s.line());
  return s;
}

std::vector<StageSummary> run_all(const Workspace& ws, const PipelineContext& ctx) {
  std::vector<StageSummary> out;
  for (Stage s : kAllStages) out.push_back(run_stage(s, ws, ctx));
  return out;
}

std::vector<Scenario> read_scenarios(const std::filesystem::path& path) {
  std::vector<Scenario> out;
  for (auto& r : read_scenario_records(path)) {
    if (!r.dropped) out.push_back(std::move(r.scenario));
  }
  return out;
}

std::vector<std::pair<TopicalInstruction, Scenario>> read_instructions(const std::filesystem::path& path) {
  std::vector<std::pair<TopicalInstruction, Scenario>> out;
  for (const auto& j : read_records(path)) out.push_back(instruction_from_json(j));
  return out;
}

StagePlan plan_stage(Stage stage, const Workspace& ws, const PipelineContext& ctx) {
  validate(ctx.gen);
  const auto& g = ctx.gen;
  StagePlan p{stage};
  const auto in = ws.input_of(stage);
  p.estimated = in && !std::filesystem::exists(*in);
  const std::size_t est_scenarios = g.domains.size() * g.scenarios_per_domain;
  const std::size_t est_convs = est_scenarios * g.conversations_per_scenario;

  switch (stage) {
    case Stage::scenarios: {
      std::map<std::string, std::size_t> have;
      for (const auto& r : read_scenario_records(ws.scenarios())) ++have[r.scenario.domain];
      for (const auto& d : g.domains) {
        if (have[d] >= g.scenarios_per_domain) continue;
        const std::size_t missing = g.scenarios_per_domain - have[d];
        p.pending_items += missing;
        p.chat_calls += ceil_div(missing, g.scenarios_per_call);
        if (g.scenarios_per_domain >= 2) ++p.embed_calls;
      }
      break;
    }
    case Stage::instructions: {
      if (p.estimated) {
        p.pending_items = est_scenarios;
      } else {
        std::set<std::string> done;
        for (const auto& [instr, s] : read_instructions(ws.instructions())) done.insert(s.id);
        for (const auto& s : read_scenarios(ws.scenarios())) p.pending_items += done.contains(s.id) ? 0 : 1;
      }
      p.chat_calls = p.pending_items;
      break;
    }
    case Stage::conversations: {
      if (p.estimated) {
        p.pending_items = est_convs;
      } else {
        std::set<std::string> done;
        for (const auto& j : read_records(ws.conversations())) done.insert(j.value("id", ""));
        for (const auto& [instr, s] : read_instructions(ws.instructions())) {
          for (std::size_t k = 0; k < g.conversations_per_scenario; ++k) {
            p.pending_items += done.contains(conversation_id(s, k)) ? 0 : 1;
          }
        }
      }
      p.chat_calls = p.pending_items;
      break;
    }
    case Stage::distractors: {
      if (p.estimated) {
        p.pending_items = est_convs;
      } else {
        std::set<std::string> done;
        for (const auto& j : read_records(ws.distractor_candidates())) done.insert(j.value("conversation_id", ""));
        for (const auto& j : read_records(ws.conversations())) p.pending_items += done.contains(j.value("id", "")) ? 0 : 1;
      }
      p.chat_calls = p.pending_items * (1 + (ctx.judge ? g.distractors_per_conversation : 0));
      break;
    }
    case Stage::curate: {
      std::size_t distractors = 0;
      if (p.estimated) {
        p.pending_items = est_convs;
        distractors = est_convs * g.distractors_per_conversation;
      } else {
        std::set<std::string> done;
        for (const auto& j : read_records(ws.curated())) {
          done.insert(sample_from_conversation(conversation_from_json(j)).conversation_id);
        }
        for (const auto& j : read_records(ws.distractors())) {
          if (done.contains(j.value("id", ""))) continue;
          ++p.pending_items;
          distractors += j.contains("distractors") ? j["distractors"].size() : 0;
        }
      }
      p.chat_calls = ctx.mitigations ? distractors : 0;
      break;
    }
  }
  return p;
}

}  // namespace topicguard
