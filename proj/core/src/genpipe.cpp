#include "topicguard/genpipe.hpp"

#include <algorithm>
#include <set>

#include "topicguard/errors.hpp"
#include "topicguard/util.hpp"

namespace topicguard {

using json = nlohmann::json;

const std::vector<std::string>& default_few_shot_distractors() {
  static const std::vector<std::string> kShots = {
      R"({"bot turn": "Your flight has been booked. Your flight number is 1234.", "distractor user turn": "How do I get my pilot's license?"})",
      R"({"bot turn": "Your flight to Miami is confirmed for the 25th of June.", "distractor user turn": "Can you recommend a good book to read?"})",
  };
  return kShots;
}

void validate(const GenerationConfig& cfg) {
  if (cfg.domains.empty()) throw ConfigError("generation.domains must not be empty");
  std::set<std::string> seen;
  for (const auto& d : cfg.domains) {
    if (trim(d).empty()) throw ConfigError("generation.domains contains an empty name");
    if (!seen.insert(d).second) throw ConfigError("duplicate domain \"" + d + "\"");
  }
  auto positive = [](std::size_t v, const char* name) {
    if (v < 1) throw ConfigError(std::string("generation.") + name + " must be >= 1");
  };
  positive(cfg.scenarios_per_domain, "scenarios_per_domain");
  positive(cfg.scenarios_per_call, "scenarios_per_call");
  positive(cfg.conversations_per_scenario, "conversations_per_scenario");
  positive(cfg.distractors_per_conversation, "distractors_per_conversation");
  positive(cfg.conversation_retry_cap, "conversation_retry_cap");
  auto unit = [](double v, const char* name) {
    if (!(v > 0.0 && v <= 1.0)) throw ConfigError(std::string("generation.") + name + " must be in (0, 1]");
  };
  unit(cfg.rouge_threshold, "rouge_threshold");
  unit(cfg.cosine_threshold, "cosine_threshold");
  unit(cfg.anchor_min_score, "anchor_min_score");
}

std::string_view to_string(JudgeVerdict v) {
  return v == JudgeVerdict::off_topic ? "off_topic" : "on_topic_false_positive";
}

// --- parsing -------------------------------------------------------------------

namespace {

bool is_digit(char c) { return c >= '0' && c <= '9'; }

std::string strip_list_marker(std::string_view line) {
  std::string s = trim(line);
  std::string_view v = s;
  std::size_t i = 0;
  if (!v.empty() && v[0] == '(') {
    std::size_t j = 1;
    while (j < v.size() && is_digit(v[j])) ++j;
    if (j > 1 && j < v.size() && v[j] == ')') i = j + 1;
  } else if (!v.empty() && is_digit(v[0])) {
    std::size_t j = 0;
    while (j < v.size() && is_digit(v[j])) ++j;
    if (j < v.size() && (v[j] == '.' || v[j] == ')') &&
        (j + 1 == v.size() || v[j + 1] == ' ' || v[j + 1] == '\t')) {
      i = j + 1;
    }
  } else if (v.starts_with("- ") || v.starts_with("* ")) {
    i = 2;
  } else if (v.starts_with("\xE2\x80\xA2")) {  // U+2022 bullet
    i = 3;
  }
  return trim(v.substr(i));
}

std::optional<Role> turn_prefix(std::string_view line, std::string_view& rest) {
  std::string t = trim(line);
  auto colon = t.find(':');
  if (colon == std::string::npos) return std::nullopt;
  std::string head = ascii_lower(trim(std::string_view(t).substr(0, colon)));
  std::optional<Role> role;
  if (head == "user") role = Role::user;
  if (head == "bot") role = Role::bot;
  if (!role) return std::nullopt;
  // Offset of the remainder within the original line.
  auto lead = line.find_first_not_of(" \t");
  rest = line.substr(lead + colon + 1);
  return role;
}

std::optional<std::string> string_field(const json& obj, std::initializer_list<const char*> keys) {
  for (const char* k : keys) {
    auto it = obj.find(k);
    if (it != obj.end() && it->is_string()) return it->get<std::string>();
  }
  return std::nullopt;
}

}  // namespace

std::optional<json> parse_json_loose(std::string_view s) {
  auto attempt = [](std::string_view v) -> std::optional<json> {
    json j = json::parse(v.begin(), v.end(), nullptr, false);
    if (j.is_discarded()) return std::nullopt;
    return j;
  };
  if (auto j = attempt(s)) return j;
  for (auto [open, close] : {std::pair{'[', ']'}, std::pair{'{', '}'}}) {
    auto b = s.find(open);
    auto e = s.rfind(close);
    if (b != std::string::npos && e != std::string::npos && e > b) {
      if (auto j = attempt(s.substr(b, e - b + 1))) return j;
    }
  }
  return std::nullopt;
}

std::vector<std::string> parse_scenario_lines(std::string_view reply) {
  std::vector<std::string> out;
  for (const auto& line : split_lines(reply)) {
    std::string s = strip_list_marker(line);
    if (s.empty()) continue;
    // Headers such as "Here are 10 more scenarios:".
    if (s.back() == ':') continue;
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<Turn> parse_conversation(std::string_view reply, bool allow_bot_first) {
  std::vector<Turn> raw;
  for (const auto& line : split_lines(reply)) {
    std::string_view rest;
    if (auto role = turn_prefix(line, rest)) {
      raw.push_back(Turn{*role, trim(rest), Origin::on_topic});
    } else if (!trim(line).empty() && !raw.empty()) {
      auto& text = raw.back().text;
      text += text.empty() ? trim(line) : "\n" + trim(line);
    }
  }
  std::vector<Turn> turns;
  for (auto& t : raw) {
    if (t.text.empty()) continue;
    if (!turns.empty() && turns.back().role == t.role) {
      turns.back().text += " " + t.text;
    } else {
      turns.push_back(std::move(t));
    }
  }
  if (turns.empty()) throw ParseError("no user:/bot: turns found in conversation reply", 0, std::string(reply));
  if (turns.front().role != Role::user && !allow_bot_first) {
    throw GenerationError("malformed dialogue: conversation starts with a bot turn");
  }
  return turns;
}

std::string render_conversation(std::span<const Turn> turns) {
  std::string out;
  for (const auto& t : turns) {
    if (!out.empty()) out += '\n';
    out += to_string(t.role);
    out += ": ";
    out += t.text;
  }
  return out;
}

std::string strip_code_fences(std::string_view reply) {
  auto open = reply.find("```");
  if (open == std::string_view::npos) return trim(reply);
  auto body = reply.find('\n', open);
  if (body == std::string_view::npos) return trim(reply.substr(open + 3));
  auto close = reply.find("```", body + 1);
  return trim(reply.substr(body + 1, close == std::string_view::npos ? std::string_view::npos : close - body - 1));
}

std::vector<DistractorCandidate> parse_distractor_reply(std::string_view reply) {
  const std::string body = strip_code_fences(reply);
  auto parsed = parse_json_loose(body);
  if (!parsed) throw ParseError("distractor reply is not JSON", 0, std::string(reply));

  json items = *parsed;
  if (items.is_object()) {
    if (string_field(items, {"distractor user turn", "distractor_user_turn", "distractor"})) {
      items = json::array({items});
    } else {
      json inner;
      for (const auto& [k, v] : items.items()) {
        if (v.is_array()) {
          inner = v;
          break;
        }
      }
      items = inner;
    }
  }
  if (!items.is_array()) throw ParseError("distractor reply is not a JSON array", 0, std::string(reply));

  std::vector<DistractorCandidate> out;
  for (const auto& item : items) {
    if (!item.is_object()) continue;
    auto bot = string_field(item, {"bot turn", "bot_turn", "bot"});
    auto dis = string_field(item, {"distractor user turn", "distractor_user_turn", "distractor"});
    if (!dis || trim(*dis).empty()) continue;
    DistractorCandidate c;
    c.bot_turn_text = bot.value_or("");
    c.distractor_text = trim(*dis);
    out.push_back(std::move(c));
  }
  if (out.empty() && !items.empty()) {
    throw ParseError("distractor reply has no usable entries", 0, std::string(reply));
  }
  return out;
}

// --- stages ----------------------------------------------------------------------

std::vector<Scenario> generate_scenarios(const std::string& domain, const GenerationConfig& cfg,
                                         Backend& backend, const PromptTemplates& templates,
                                         std::span<const Scenario> existing) {
  if (std::find(cfg.domains.begin(), cfg.domains.end(), domain) == cfg.domains.end()) {
    throw PreconditionError("domain \"" + domain + "\" is not configured");
  }
  std::vector<Scenario> out(existing.begin(), existing.end());
  int empty_replies = 0;
  while (out.size() < cfg.scenarios_per_domain) {
    std::string listed;
    if (out.empty()) {
      if (auto it = cfg.seed_scenarios.find(domain); it != cfg.seed_scenarios.end()) {
        for (const auto& s : it->second) listed += (listed.empty() ? "" : "\n") + s;
      }
    } else {
      for (const auto& s : out) listed += (listed.empty() ? "" : "\n") + s.text;
    }
    const std::string prompt =
        fill_template(templates.scenarios, {{"domain", domain},
                                            {"existing_scenarios", listed},
                                            {"scenarios_per_call", std::to_string(cfg.scenarios_per_call)}});
    auto lines = parse_scenario_lines(backend.complete({{MessageRole::user, prompt}}));
    if (lines.empty()) {
      if (++empty_replies >= 2) {
        throw GenerationError("scenario generation stalled for domain \"" + domain +
                              "\": two consecutive replies without a usable scenario (" +
                              std::to_string(out.size()) + "/" +
                              std::to_string(cfg.scenarios_per_domain) + " generated)");
      }
      continue;
    }
    empty_replies = 0;
    for (auto& text : lines) {
      if (out.size() >= cfg.scenarios_per_domain) break;
      Scenario s;
      s.id = make_scenario_id(domain, text, out.size(), cfg.id_seed);
      s.domain = domain;
      s.text = std::move(text);
      out.push_back(std::move(s));
    }
  }
  return out;
}

FilterResult filter_scenarios(std::span<const Scenario> scenarios, const GenerationConfig& cfg,
                              Backend& embedder) {
  if (scenarios.size() < 2) throw PreconditionError("filter_scenarios needs at least two scenarios");
  std::vector<std::string> texts;
  texts.reserve(scenarios.size());
  for (const auto& s : scenarios) texts.push_back(s.text);
  const auto vectors = embedder.embed(texts);
  auto pairs = pairwise_flags(texts, vectors, cfg.rouge_threshold, cfg.cosine_threshold);

  FilterResult result;
  std::vector<bool> drop(scenarios.size(), false);
  for (auto& p : pairs) {
    if (!p.verdict.flagged) continue;
    if (cfg.auto_drop_similar) drop[p.j] = true;
    result.flagged_pairs.push_back(p);
  }
  for (std::size_t i = 0; i < scenarios.size(); ++i) {
    if (!drop[i]) result.kept.push_back(scenarios[i]);
  }
  return result;
}

TopicalInstruction generate_instruction(const Scenario& scenario, Backend& backend,
                                        const PromptTemplates& templates) {
  const std::string prompt =
      fill_template(templates.instruction, {{"domain", scenario.domain}, {"scenario", scenario.text}});
  TopicalInstruction instr;
  instr.scenario_id = scenario.id;
  instr.text = backend.complete({{MessageRole::user, prompt}});
  return instr;
}

namespace {

ChatRequest conversation_request_attempt(const TopicalInstruction& instruction, Backend& backend,
                                         const PromptTemplates& templates, std::size_t sample,
                                         std::size_t samples, std::size_t attempt) {
  ChatRequest req;
  req.model = backend.chat_model();
  req.temperature = backend.default_temperature();
  std::string marker;
  if (samples > 1) {
    marker = "Conversation sample " + std::to_string(sample + 1) + " of " + std::to_string(samples) + ".";
  }
  if (attempt > 0) marker += (marker.empty() ? "" : " ") + std::string("Attempt ") + std::to_string(attempt + 1) + ".";
  if (!marker.empty()) req.messages.push_back({MessageRole::system, marker});
  req.messages.push_back(
      {MessageRole::user, fill_template(templates.conversation, {{"sys_instr", instruction.text}})});
  return req;
}

}  // namespace

ChatRequest conversation_request(const TopicalInstruction& instruction, Backend& backend,
                                 const PromptTemplates& templates, std::size_t sample,
                                 std::size_t samples) {
  return conversation_request_attempt(instruction, backend, templates, sample, samples, 0);
}

Conversation generate_conversation(const Scenario& scenario, const TopicalInstruction& instruction,
                                   Backend& backend, const PromptTemplates& templates,
                                   const GenerationConfig& cfg, std::size_t sample) {
  std::string last_error;
  for (std::size_t attempt = 0; attempt < cfg.conversation_retry_cap; ++attempt) {
    auto req = conversation_request_attempt(instruction, backend, templates, sample,
                                            cfg.conversations_per_scenario, attempt);
    std::string reply = backend.chat(req);
    try {
      Conversation c;
      c.id = scenario.id + "/conv" + std::to_string(sample);
      c.scenario = scenario;
      c.instruction = instruction;
      c.turns = parse_conversation(reply, cfg.allow_bot_first);
      if (c.turns.size() < 2) throw GenerationError("malformed dialogue: fewer than two turns");
      validate(c, ValidationOptions{cfg.allow_bot_first});
      return c;
    } catch (const ParseError& e) {
      last_error = e.what();
    } catch (const GenerationError& e) {
      last_error = e.what();
    } catch (const InvariantError& e) {
      last_error = e.what();
    }
    log_warning("conversation for " + scenario.id + " attempt " + std::to_string(attempt + 1) +
                " rejected: " + last_error);
  }
  throw GenerationError("malformed dialogue for " + scenario.id + " after " +
                        std::to_string(cfg.conversation_retry_cap) + " attempts: " + last_error);
}

std::vector<DistractorCandidate> generate_distractors(const Conversation& conv, Backend& backend,
                                                      const GenerationConfig& cfg,
                                                      const PromptTemplates& templates) {
  if (std::none_of(conv.turns.begin(), conv.turns.end(), [](const Turn& t) { return t.role == Role::bot; })) {
    throw PreconditionError("conversation " + conv.id + " has no bot turn to anchor distractors to");
  }
  std::string shots;
  for (const auto& s : cfg.few_shot_distractors) shots += (shots.empty() ? "" : "\n") + s;
  const std::string prompt = fill_template(templates.distractors,
                                           {{"few-shot", shots},
                                            {"domain", conv.domain()},
                                            {"scenario", conv.scenario.text},
                                            {"sys_instr", conv.instruction.text},
                                            {"conversation", render_conversation(conv.turns)}});
  auto cands = parse_distractor_reply(backend.complete({{MessageRole::user, prompt}}));
  if (cands.size() > cfg.distractors_per_conversation) cands.resize(cfg.distractors_per_conversation);
  return cands;
}

std::optional<AnchorMatch> best_bot_turn(std::span<const Turn> turns, std::string_view quoted) {
  const auto q = tokenize(quoted);
  std::optional<AnchorMatch> best;
  for (std::size_t i = 0; i < turns.size(); ++i) {
    if (turns[i].role != Role::bot) continue;
    const double score = rouge_l(q, tokenize(turns[i].text)).f;
    if (!best || score > best->score) best = AnchorMatch{i, score};
  }
  return best;
}

Distractor anchor_distractor(const Conversation& conv, DistractorCandidate& cand, double min_score,
                             DistractorSource source) {
  auto match = best_bot_turn(conv.turns, cand.bot_turn_text);
  cand.resolved_anchor.reset();
  cand.match_score = match ? match->score : 0.0;
  if (!match || match->score < min_score) {
    throw AnchoringError("cannot anchor distractor \"" + cand.distractor_text + "\" in " + conv.id +
                         ": best bot-turn match scores " + std::to_string(cand.match_score) +
                         " (< " + std::to_string(min_score) + ")");
  }
  cand.resolved_anchor = match->index;
  Distractor d;
  d.anchor_index = match->index;
  d.text = cand.distractor_text;
  d.source = source;
  return d;
}

std::vector<DistractorCandidate> screen_false_positives(const Conversation& conv,
                                                        std::vector<DistractorCandidate> candidates,
                                                        Backend& judge, const PromptTemplates& templates,
                                                        std::vector<DistractorCandidate>* judged) {
  std::vector<DistractorCandidate> kept;
  for (auto& c : candidates) {
    std::span<const Turn> context(conv.turns);
    if (c.resolved_anchor && *c.resolved_anchor < conv.turns.size()) {
      context = context.first(*c.resolved_anchor + 1);
    }
    const std::string prompt = fill_template(templates.classification,
                                             {{"sys_instr", conv.instruction.text},
                                              {"conversation", render_conversation(context)},
                                              {"turn", c.distractor_text}});
    const auto verdict = final_yes_no(judge.complete({{MessageRole::user, prompt}}, 0.0));
    if (!verdict) {
      log_warning("judge verdict unparseable for distractor \"" + c.distractor_text + "\" in " + conv.id +
                  "; keeping it");
      c.judge_verdict.reset();
    } else {
      // "yes, it respects the scenario" means the candidate is on-topic.
      c.judge_verdict = *verdict ? JudgeVerdict::on_topic_false_positive : JudgeVerdict::off_topic;
    }
    if (judged) judged->push_back(c);
    if (c.judge_verdict != JudgeVerdict::on_topic_false_positive) kept.push_back(c);
  }
  return kept;
}

}  // namespace topicguard
