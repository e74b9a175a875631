#include "commands.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <optional>
#include <set>

#include <CLI11.hpp>

#include <topicguard/analysis.hpp>
#include <topicguard/errors.hpp>
#include <topicguard/evalharness.hpp>
#include <topicguard/mock_backend.hpp>
#include <topicguard/pipeline.hpp>
#include <topicguard/util.hpp>

#include "config.hpp"

namespace topicguard::cli {

namespace fs = std::filesystem;

namespace {

struct Globals {
  std::string config = "topicguard.json";
  std::string workspace;
  std::size_t max_parallel = 0;  // 0: from config
  bool dry_run = false;
};

struct Session {
  RunConfig cfg;
  Globals globals;
  std::ostream& out;
  std::ostream& err;
  std::map<std::string, BackendPtr> backends;

  Backend* backend(const std::string& role) {
    if (auto it = backends.find(role); it != backends.end()) return it->second.get();
    const BackendSpec* spec = cfg.backend(role);
    if (!spec) return nullptr;
    auto b = make_backend(*spec);
    backends[role] = b;
    return b.get();
  }

  Backend& require_backend(const std::string& role, std::string_view why) {
    Backend* b = backend(role);
    if (!b) throw ConfigError("no '" + role + "' backend configured; it is needed for " + std::string(why));
    return *b;
  }

  ValidationOptions vopts() const { return {cfg.generation.allow_bot_first}; }

  fs::path output(const std::string& name) const {
    fs::create_directories(cfg.outputs);
    return cfg.outputs / name;
  }

  void write_report(const fs::path& path, ordered_json j) {
    j["config_fingerprint"] = cfg.fingerprint;
    atomic_write_file(path, j.dump(2) + "\n");
    out << "wrote " << path.string() << "\n";
  }
};

Session open_session(const Globals& g, std::ostream& out, std::ostream& err) {
  RunConfig cfg = load_config(g.config);
  if (!g.workspace.empty()) {
    const bool outputs_follow = cfg.outputs == cfg.workspace;
    cfg.workspace = g.workspace;
    if (outputs_follow) cfg.outputs = cfg.workspace;
  }
  if (g.max_parallel > 0) cfg.max_parallel = g.max_parallel;
  return Session{std::move(cfg), g, out, err, {}};
}

PipelineContext pipeline_context(Session& s, bool need_backends) {
  PipelineContext ctx;
  ctx.gen = s.cfg.generation;
  ctx.templates = s.cfg.templates;
  ctx.max_parallel = s.cfg.max_parallel;
  ctx.checkpoint_every = s.cfg.checkpoint_every;
  ctx.config_fingerprint = s.cfg.fingerprint;
  ctx.curation_mode = s.cfg.curation_mode;
  ctx.refusal = s.cfg.refusal;
  ctx.mitigations = s.cfg.mitigations;
  if (need_backends) {
    ctx.generator = s.backend("generator");
    ctx.judge = s.backend("judge");
    ctx.embedder = s.backend("embedder");
  } else if (s.cfg.backend("judge")) {
    // Planning only checks whether screening would run.
    static MockBackend placeholder;
    ctx.judge = &placeholder;
  }
  return ctx;
}

Dataset read_dataset(const Session& s, const fs::path& path) {
  if (!fs::exists(path)) throw IoError("dataset not found: " + path.string());
  return read_jsonl(path, s.vopts());
}

Dataset select_split(const Session& s, const Dataset& d, const std::string& split) {
  if (split.empty() || split == "all") return d;
  auto parts = split_by_domain(d, s.cfg.split);
  if (split == "train") return parts.train;
  if (split == "val") return parts.val;
  if (split == "test") return parts.test;
  throw ConfigError("--split must be train, val, test or all");
}

// --- generate ---------------------------------------------------------------

int cmd_generate(Session& s, const std::string& stage_name) {
  const Workspace ws(s.cfg.workspace);
  std::vector<Stage> stages;
  if (stage_name == "all") {
    stages.assign(std::begin(kAllStages), std::end(kAllStages));
  } else {
    stages.push_back(*parse_stage(stage_name));
  }

  if (s.globals.dry_run) {
    const PipelineContext ctx = pipeline_context(s, false);
    for (Stage st : stages) s.out << "plan " << plan_stage(st, ws, ctx).line() << "\n";
    return kExitOk;
  }
  const PipelineContext ctx = pipeline_context(s, true);
  if (!ctx.judge && std::find(stages.begin(), stages.end(), Stage::distractors) != stages.end()) {
    log_warning("no judge backend configured; distractor false-positive screening is skipped");
  }
  std::size_t skipped = 0;
  for (Stage st : stages) {
    const auto summary = run_stage(st, ws, ctx);
    s.out << summary.line() << "\n";
    skipped += summary.skipped;
  }
  if (skipped > 0) {
    s.err << "error: " << skipped << " item(s) could not be generated; see the warnings above\n";
    return kExitOperational;
  }
  return kExitOk;
}

// --- evaluate ---------------------------------------------------------------

struct EvalArgs {
  std::string dataset;
  std::string output;
  std::string resume;
  std::string split;
  std::string bank;
  std::vector<int> positions;
};

std::size_t user_turns(const Dataset& d, std::string_view refusal) {
  std::size_t n = 0;
  for (const auto& c : d.conversations) {
    for (const auto& t : evaluation_turns(c, refusal)) n += t.role == Role::user ? 1 : 0;
  }
  return n;
}

int cmd_evaluate(Session& s, const std::string& mode, const EvalArgs& a) {
  const fs::path dataset_path = a.dataset.empty() ? Workspace(s.cfg.workspace).distractors() : fs::path(a.dataset);
  const Dataset data = select_split(s, read_dataset(s, dataset_path), a.split);

  if (mode == "ablation") {
    std::vector<std::string> bank = s.cfg.ablation_bank;
    if (!a.bank.empty()) {
      bank.clear();
      for (auto& line : split_lines(read_file(a.bank))) {
        if (!trim(line).empty()) bank.push_back(trim(line));
      }
    }
    if (bank.empty()) throw ConfigError("ablation needs a distractor bank (evaluation.ablation_bank or --bank)");
    const std::vector<int> positions = a.positions.empty() ? s.cfg.ablation_positions : a.positions;
    if (s.globals.dry_run) {
      s.out << "plan ablation: up to " << positions.size() * data.size() << " chat calls\n";
      return kExitOk;
    }
    Backend& candidate = s.require_backend("candidate", "evaluation");
    EvalOptions opts;
    opts.phrases = s.cfg.refusal_phrases;
    opts.templates = s.cfg.templates;
    opts.max_parallel = s.cfg.max_parallel;
    const auto table = position_ablation(data.conversations, bank, candidate, positions, opts);
    s.out << render_table(table);
    auto j = to_json(table);
    j["model"] = candidate.chat_model();
    s.write_report(a.output.empty() ? s.output("eval_ablation.json") : fs::path(a.output), std::move(j));
    return kExitOk;
  }

  if (s.globals.dry_run) {
    s.out << "plan " << mode << ": " << user_turns(data, s.cfg.refusal) << " chat calls\n";
    return kExitOk;
  }
  Backend& candidate = s.require_backend("candidate", "evaluation");
  EvalOptions opts;
  opts.phrases = s.cfg.refusal_phrases;
  opts.templates = s.cfg.templates;
  opts.refusal_context = s.cfg.refusal;
  opts.max_parallel = s.cfg.max_parallel;
  opts.config_fingerprint = s.cfg.fingerprint;
  opts.partial_path = s.output("eval_" + mode + ".partial.json");
  if (!a.resume.empty()) opts.resume_from = fs::path(a.resume);
  try {
    const EvalReport report = mode == "cot" ? run_cot_classification(data, candidate, opts)
                                            : run_conversational_eval(data, candidate, opts);
    s.out << render_table(report);
    s.write_report(a.output.empty() ? s.output("eval_" + mode + ".json") : fs::path(a.output), to_json(report));
  } catch (const EvalInterrupted& e) {
    s.err << "error: " << e.what() << "\n";
    if (!e.resume_token().empty()) {
      s.err << e.completed_conversations() << " conversations saved; resume with --resume " << e.resume_token()
            << "\n";
    }
    return kExitOperational;
  }
  return kExitOk;
}

// --- analyze ----------------------------------------------------------------

Backend& annotator(Session& s) {
  if (Backend* b = s.backend("judge")) return *b;
  return s.require_backend("generator", "rule annotation");
}

int cmd_rules(Session& s, const std::string& input) {
  const fs::path in = input.empty() ? Workspace(s.cfg.workspace).distractors() : fs::path(input);
  Dataset data = read_dataset(s, in);
  // Conversations share instructions; annotate each once.
  std::vector<std::string> ids;
  std::map<std::string, TopicalInstruction> unique;
  for (const auto& c : data.conversations) {
    if (unique.emplace(c.scenario.id, c.instruction).second) ids.push_back(c.scenario.id);
  }
  if (s.globals.dry_run) {
    s.out << "plan rules: " << ids.size() << " chat calls\n";
    return kExitOk;
  }
  Backend& b = annotator(s);
  std::vector<TopicalInstruction> annotated(ids.size());
  parallel_for(ids.size(), s.cfg.max_parallel, [&](std::size_t i) {
    annotated[i] = annotate_instruction_rules(unique.at(ids[i]), b, s.cfg.templates);
  });
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < ids.size(); ++i) index[ids[i]] = i;
  for (auto& c : data.conversations) c.instruction = annotated[index.at(c.scenario.id)];

  data.config_fingerprint = s.cfg.fingerprint;
  const fs::path out_path = s.output("annotated.jsonl");
  write_jsonl(data, out_path, s.vopts());
  s.out << "wrote " << out_path.string() << "\n";

  const auto dist = rule_distribution(annotated);
  for (std::size_t i = 0; i < 4; ++i) {
    char line[96];
    std::snprintf(line, sizeof line, "%-11s %6zu  %s\n", std::string(to_string(kAllRuleTypes[i])).c_str(),
                  dist.counts[i], dist.defined ? std::to_string(dist.fractions[i]).c_str() : "n/a");
    s.out << line;
  }
  s.write_report(s.output("rule_distribution.json"), to_json(dist));
  return kExitOk;
}

int cmd_distractor_types(Session& s, const std::string& input) {
  const fs::path in = input.empty() ? s.cfg.outputs / "annotated.jsonl" : fs::path(input);
  if (!fs::exists(in)) {
    throw PreconditionError("no rule-annotated dataset at " + in.string() + "; run `analyze rules` first");
  }
  const Dataset data = read_dataset(s, in);
  if (s.globals.dry_run) {
    std::size_t n = 0;
    for (const auto& c : data.conversations) n += c.distractors.size();
    s.out << "plan distractor_types: " << n << " chat calls\n";
    return kExitOk;
  }
  Backend& b = annotator(s);
  auto result = attribute_distractors(data, b, s.cfg.templates, s.cfg.max_parallel);
  result.dataset.config_fingerprint = s.cfg.fingerprint;
  const fs::path out_path = s.output("attributed.jsonl");
  write_jsonl(result.dataset, out_path, s.vopts());
  s.out << "wrote " << out_path.string() << "\n";
  s.out << "synthetic: " << result.synthetic.total << " distractors, " << result.synthetic.unattributed
        << " unattributed\n";
  s.out << "human: " << result.human.total << " distractors, " << result.human.unattributed << " unattributed\n";
  s.write_report(s.output("distractor_types.json"), to_json(result));
  return kExitOk;
}

int cmd_complexity(Session& s, const std::string& input) {
  const fs::path in = input.empty() ? Workspace(s.cfg.workspace).distractors() : fs::path(input);
  Backend* embedder = s.backend("embedder");
  if (!embedder) throw ConfigError("complexity analysis needs an 'embedder' backend");
  const Dataset data = read_dataset(s, in);
  if (s.globals.dry_run) {
    s.out << "plan complexity: embeddings for " << data.size() << " conversations\n";
    return kExitOk;
  }
  const auto profile = complexity_profile(data, *embedder);
  s.out << render_histogram(profile);
  const fs::path csv = s.output("complexity_histogram.csv");
  atomic_write_file(csv, histogram_csv(profile));
  s.out << "wrote " << csv.string() << "\n";
  s.write_report(s.output("complexity.json"), to_json(profile));
  return kExitOk;
}

int cmd_stats(Session& s, const std::string& input) {
  const fs::path in = input.empty() ? Workspace(s.cfg.workspace).curated() : fs::path(input);
  const Dataset data = read_dataset(s, in);
  std::vector<AlignmentSample> samples;
  for (const auto& c : data.conversations) samples.push_back(sample_from_conversation(c));
  const auto st = dataset_stats(samples);
  char line[160];
  std::snprintf(line, sizeof line, "samples: %zu\nturns: %zu (avg %.2f per sample)\ndistractor fraction: %.4f\n",
                st.samples, st.turns, st.avg_turns_per_sample, st.distractor_fraction);
  s.out << line;
  for (const auto& [d, n] : st.samples_per_domain) s.out << "  " << d << ": " << n << "\n";
  s.write_report(s.output("stats.json"), to_json(st));
  return kExitOk;
}

int cmd_split(Session& s, const std::string& input) {
  const fs::path in = input.empty() ? Workspace(s.cfg.workspace).distractors() : fs::path(input);
  const Dataset data = read_dataset(s, in);
  auto parts = split_by_domain(data, s.cfg.split);
  const std::pair<const char*, Dataset*> named[] = {{"train", &parts.train}, {"val", &parts.val}, {"test", &parts.test}};
  for (const auto& [name, d] : named) {
    d->config_fingerprint = s.cfg.fingerprint;
    const fs::path p = s.output(std::string(name) + ".jsonl");
    write_jsonl(*d, p, s.vopts());
    s.out << name << ": " << d->size() << " conversations -> " << p.string() << "\n";
  }
  return kExitOk;
}

int cmd_ingest(Session& s, const std::string& input, const std::string& distractors, const std::string& output,
               bool replace) {
  const fs::path in = input.empty() ? Workspace(s.cfg.workspace).conversations() : fs::path(input);
  Dataset data = ingest_human_distractors(distractors, read_dataset(s, in), s.cfg.generation.anchor_min_score, replace);
  data.config_fingerprint = s.cfg.fingerprint;
  const fs::path out_path = output.empty() ? s.output("human_distractors.jsonl") : fs::path(output);
  write_jsonl(data, out_path, s.vopts());
  std::size_t n = 0;
  for (const auto& c : data.conversations) n += c.distractors.size();
  s.out << "attached distractors: " << n << " -> " << out_path.string() << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Topic-following dataset generation, curation and evaluation", "topicguard"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "JSON run configuration")->capture_default_str();
  app.add_option("--workspace", g.workspace, "Workspace directory (overrides the config)");
  app.add_option("--max-parallel", g.max_parallel, "Concurrent backend calls (overrides the config)")
      ->check(CLI::PositiveNumber);
  app.add_flag("--dry-run", g.dry_run, "Print planned backend calls without sending them");

  std::string stage;
  auto* gen = app.add_subcommand("generate", "Run a generation stage");
  gen->add_option("stage", stage, "scenarios | instructions | conversations | distractors | curate | all")
      ->required()
      ->check(CLI::IsMember({"scenarios", "instructions", "conversations", "distractors", "curate", "all"}));
  std::optional<bool> mitigations;
  std::string curation_mode;
  gen->add_flag("--mitigations{true},--refusals{false}", mitigations, "Curate with generated mitigations");
  gen->add_option("--curation-mode", curation_mode, "per_distractor | combined")
      ->check(CLI::IsMember({"per_distractor", "combined"}));

  std::string eval_mode;
  EvalArgs eval_args;
  auto* ev = app.add_subcommand("evaluate", "Evaluate a candidate model");
  ev->add_option("mode", eval_mode, "conversational | cot | ablation")
      ->required()
      ->check(CLI::IsMember({"conversational", "cot", "ablation"}));
  ev->add_option("--dataset", eval_args.dataset, "Dataset JSONL (default: workspace distractors.jsonl)");
  ev->add_option("--output", eval_args.output, "Report path");
  ev->add_option("--resume", eval_args.resume, "Partial report written by an interrupted run");
  ev->add_option("--split", eval_args.split, "Restrict to a split of the dataset")
      ->check(CLI::IsMember({"train", "val", "test", "all"}));
  ev->add_option("--bank", eval_args.bank, "Ablation distractors, one per line");
  ev->add_option("--positions", eval_args.positions, "Ablation positions (1-based bot turns)")->delimiter(',');

  std::string kind;
  std::string analyze_input;
  auto* an = app.add_subcommand("analyze", "Dataset analyses");
  an->add_option("kind", kind, "rules | distractor_types | complexity | stats")
      ->required()
      ->check(CLI::IsMember({"rules", "distractor_types", "complexity", "stats"}));
  an->add_option("--input", analyze_input, "Input dataset JSONL");

  std::string stats_input;
  auto* st = app.add_subcommand("stats", "Statistics of a curated dataset");
  st->add_option("--input", stats_input, "Curated JSONL (default: workspace curated.jsonl)");

  std::string split_input;
  auto* sp = app.add_subcommand("split", "Split a dataset by domain per the split policy");
  sp->add_option("--input", split_input, "Dataset JSONL (default: workspace distractors.jsonl)");

  std::string ingest_input, ingest_file, ingest_output;
  bool ingest_replace = false;
  auto* in = app.add_subcommand("ingest", "Attach human-written distractors to conversations");
  in->add_option("--distractors", ingest_file, "JSONL of {conversation_id, bot_turn|anchor_index, distractor}")
      ->required();
  in->add_option("--input", ingest_input, "Conversations JSONL (default: workspace conversations.jsonl)");
  in->add_option("--output", ingest_output, "Output JSONL");
  in->add_flag("--replace", ingest_replace, "Drop existing distractors first");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    Session s = open_session(g, out, err);
    if (*gen) {
      if (mitigations) s.cfg.mitigations = *mitigations;
      if (curation_mode == "combined") s.cfg.curation_mode = CurationMode::combined;
      if (curation_mode == "per_distractor") s.cfg.curation_mode = CurationMode::per_distractor;
      return cmd_generate(s, stage);
    }
    if (*ev) return cmd_evaluate(s, eval_mode, eval_args);
    if (*an) {
      if (kind == "rules") return cmd_rules(s, analyze_input);
      if (kind == "distractor_types") return cmd_distractor_types(s, analyze_input);
      if (kind == "complexity") return cmd_complexity(s, analyze_input);
      return cmd_stats(s, analyze_input);
    }
    if (*st) return cmd_stats(s, stats_input);
    if (*sp) return cmd_split(s, split_input);
    if (*in) return cmd_ingest(s, ingest_input, ingest_file, ingest_output, ingest_replace);
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitOperational;
  }
  return kExitOk;
}

}  // namespace topicguard::cli
