#include "topicguard/core.hpp"

#include <algorithm>
#include <cstdio>
#include <set>

#include "topicguard/errors.hpp"
#include "topicguard/util.hpp"

namespace topicguard {

using json = nlohmann::json;

namespace {

template <typename E, std::size_t N>
std::optional<E> lookup(std::string_view s, const std::pair<E, std::string_view> (&table)[N]) {
  for (const auto& [value, name] : table) {
    if (name == s) return value;
  }
  return std::nullopt;
}

template <typename E, std::size_t N>
std::string_view name_of(E e, const std::pair<E, std::string_view> (&table)[N]) {
  for (const auto& [value, name] : table) {
    if (value == e) return name;
  }
  return "?";
}

constexpr std::pair<Role, std::string_view> kRoles[] = {{Role::user, "user"}, {Role::bot, "bot"}};
constexpr std::pair<Origin, std::string_view> kOrigins[] = {
    {Origin::on_topic, "on_topic"},
    {Origin::distractor, "distractor"},
    {Origin::refusal, "refusal"},
    {Origin::mitigation, "mitigation"}};
constexpr std::pair<RuleType, std::string_view> kRuleTypes[] = {
    {RuleType::flow, "flow"},
    {RuleType::allowed, "allowed"},
    {RuleType::disallowed, "disallowed"},
    {RuleType::tone, "tone"}};
constexpr std::pair<DistractorSource, std::string_view> kSources[] = {
    {DistractorSource::synthetic, "synthetic"}, {DistractorSource::human, "human"}};
constexpr std::pair<Split, std::string_view> kSplits[] = {
    {Split::train, "train"}, {Split::val, "val"}, {Split::test, "test"}};

bool blank(std::string_view s) { return trim(s).empty(); }

[[noreturn]] void violated(const std::string& what) { throw InvariantError(what); }

const json& require(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) throw ParseError(std::string("missing field \"") + key + "\"");
  return *it;
}

std::string require_string(const json& j, const char* key) {
  const json& v = require(j, key);
  if (!v.is_string()) throw ParseError(std::string("field \"") + key + "\" must be a string");
  return v.get<std::string>();
}

template <typename E>
E require_enum(const json& j, const char* key, std::optional<E> (*parse)(std::string_view)) {
  std::string s = require_string(j, key);
  auto v = parse(s);
  if (!v) throw ParseError(std::string("unknown ") + key + " \"" + s + "\"");
  return *v;
}

}  // namespace

std::string_view to_string(Role r) { return name_of(r, kRoles); }
std::string_view to_string(Origin o) { return name_of(o, kOrigins); }
std::string_view to_string(RuleType t) { return name_of(t, kRuleTypes); }
std::string_view to_string(DistractorSource s) { return name_of(s, kSources); }
std::string_view to_string(Split s) { return name_of(s, kSplits); }

std::optional<Role> parse_role(std::string_view s) { return lookup(s, kRoles); }
std::optional<Origin> parse_origin(std::string_view s) { return lookup(s, kOrigins); }
std::optional<RuleType> parse_rule_type(std::string_view s) { return lookup(s, kRuleTypes); }
std::optional<DistractorSource> parse_source(std::string_view s) { return lookup(s, kSources); }
std::optional<Split> parse_split(std::string_view s) { return lookup(s, kSplits); }

void validate(const Scenario& s) {
  if (blank(s.text)) violated("scenario text must be non-empty");
  if (blank(s.domain)) violated("scenario domain must be non-empty");
}

void validate(const Scenario& s, std::span<const std::string> domains) {
  validate(s);
  if (std::find(domains.begin(), domains.end(), s.domain) == domains.end()) {
    violated("scenario domain \"" + s.domain + "\" is not a configured domain");
  }
}

void validate(const TopicalInstruction& instr) {
  if (blank(instr.text)) violated("instruction text must be non-empty");
  if (instr.rule_spans) {
    for (const auto& span : *instr.rule_spans) {
      if (span.begin >= span.end || span.end > instr.text.size()) {
        violated("rule span [" + std::to_string(span.begin) + "," + std::to_string(span.end) +
                 ") is outside the instruction text");
      }
    }
  }
}

void validate(const Turn& t) {
  if (blank(t.text)) violated("turn text must be non-empty");
  if (t.origin == Origin::distractor && t.role != Role::user) {
    violated("distractor turns must have role user");
  }
  if ((t.origin == Origin::refusal || t.origin == Origin::mitigation) && t.role != Role::bot) {
    violated("refusal and mitigation turns must have role bot");
  }
}

void validate_alternation(std::span<const Turn> turns, ValidationOptions opts) {
  if (turns.empty()) return;
  if (turns.front().role != Role::user && !opts.allow_bot_first) {
    violated("conversation must start with a user turn");
  }
  for (std::size_t i = 1; i < turns.size(); ++i) {
    if (turns[i].role == turns[i - 1].role) {
      violated("turns must alternate between user and bot (turn " + std::to_string(i) + ")");
    }
  }
}

void validate(const Conversation& c, ValidationOptions opts) {
  if (blank(c.id)) violated("conversation id must be non-empty");
  validate(c.scenario);
  validate(c.instruction);
  if (c.turns.empty()) violated("conversation must contain at least one turn");
  for (const auto& t : c.turns) validate(t);
  validate_alternation(c.turns, opts);
  for (const auto& d : c.distractors) {
    if (d.anchor_index >= c.turns.size()) {
      violated("distractor anchor_index " + std::to_string(d.anchor_index) + " is out of range");
    }
    if (c.turns[d.anchor_index].role != Role::bot) violated("anchor must reference a bot turn");
    if (blank(d.text)) violated("distractor text must be non-empty");
  }
}

std::string make_scenario_id(std::string_view domain, std::string_view text, std::size_t index,
                             std::string_view seed) {
  std::string slug;
  for (char ch : domain) slug.push_back(ch == ' ' ? '_' : ch);
  char idx[16];
  std::snprintf(idx, sizeof idx, "%03zu", index);
  const std::string hashed = seed.empty() ? std::string(text) : std::string(seed) + '\n' + std::string(text);
  return slug + "/" + sha256_hex(hashed).substr(0, 8) + "/" + idx;
}

ordered_json to_json(const Scenario& s) {
  ordered_json j;
  j["id"] = s.id;
  j["domain"] = s.domain;
  j["text"] = s.text;
  return j;
}

Scenario scenario_from_json(const json& j) {
  if (!j.is_object()) throw ParseError("scenario record must be a JSON object");
  return Scenario{require_string(j, "id"), require_string(j, "domain"), require_string(j, "text")};
}

ordered_json to_json(const TopicalInstruction& instr, const Scenario& scenario) {
  ordered_json j;
  j["scenario_id"] = instr.scenario_id;
  j["domain"] = scenario.domain;
  j["scenario"] = scenario.text;
  j["text"] = instr.text;
  if (instr.rule_spans) {
    j["rule_spans"] = ordered_json::array();
    for (const auto& s : *instr.rule_spans) {
      j["rule_spans"].push_back(
          ordered_json{{"start", s.begin}, {"end", s.end}, {"rule_type", to_string(s.type)}});
    }
  }
  return j;
}

namespace {

std::optional<std::vector<RuleSpan>> spans_from_json(const json& j) {
  auto it = j.find("rule_spans");
  if (it == j.end() || it->is_null()) return std::nullopt;
  if (!it->is_array()) throw ParseError("rule_spans must be an array");
  std::vector<RuleSpan> spans;
  for (const auto& s : *it) {
    RuleSpan span;
    span.begin = require(s, "start").get<std::size_t>();
    span.end = require(s, "end").get<std::size_t>();
    span.type = require_enum<RuleType>(s, "rule_type", parse_rule_type);
    spans.push_back(span);
  }
  return spans;
}

}  // namespace

std::pair<TopicalInstruction, Scenario> instruction_from_json(const json& j) {
  if (!j.is_object()) throw ParseError("instruction record must be a JSON object");
  Scenario s{require_string(j, "scenario_id"), require_string(j, "domain"), require_string(j, "scenario")};
  TopicalInstruction instr;
  instr.scenario_id = s.id;
  instr.text = require_string(j, "text");
  instr.rule_spans = spans_from_json(j);
  return {std::move(instr), std::move(s)};
}

ordered_json to_json(const Conversation& c, std::string_view config_fingerprint) {
  ordered_json j;
  j["id"] = c.id;
  j["domain"] = c.scenario.domain;
  j["scenario_id"] = c.scenario.id;
  j["scenario"] = c.scenario.text;
  j["system_instruction"] = c.instruction.text;
  if (c.instruction.rule_spans) {
    j["rule_spans"] = to_json(c.instruction, c.scenario)["rule_spans"];
  }
  j["turns"] = ordered_json::array();
  for (const auto& t : c.turns) {
    j["turns"].push_back(
        ordered_json{{"role", to_string(t.role)}, {"text", t.text}, {"origin", to_string(t.origin)}});
  }
  j["distractors"] = ordered_json::array();
  for (const auto& d : c.distractors) {
    ordered_json dj;
    dj["anchor_index"] = d.anchor_index;
    dj["text"] = d.text;
    dj["source"] = to_string(d.source);
    dj["rule_type"] = d.rule_type ? ordered_json(to_string(*d.rule_type)) : ordered_json(nullptr);
    j["distractors"].push_back(std::move(dj));
  }
  if (!config_fingerprint.empty()) j["config_fingerprint"] = config_fingerprint;
  return j;
}

Conversation conversation_from_json(const json& j) {
  if (!j.is_object()) throw ParseError("conversation record must be a JSON object");
  Conversation c;
  c.id = require_string(j, "id");
  c.scenario.domain = require_string(j, "domain");
  c.scenario.text = require_string(j, "scenario");
  c.scenario.id = j.contains("scenario_id") ? require_string(j, "scenario_id") : c.id;
  c.instruction.scenario_id = c.scenario.id;
  c.instruction.text = require_string(j, "system_instruction");
  c.instruction.rule_spans = spans_from_json(j);

  const json& turns = require(j, "turns");
  if (!turns.is_array()) throw ParseError("turns must be an array");
  for (const auto& tj : turns) {
    Turn t;
    t.role = require_enum<Role>(tj, "role", parse_role);
    t.text = require_string(tj, "text");
    t.origin = tj.contains("origin") ? require_enum<Origin>(tj, "origin", parse_origin)
                                     : Origin::on_topic;
    c.turns.push_back(std::move(t));
  }

  if (auto it = j.find("distractors"); it != j.end() && !it->is_null()) {
    if (!it->is_array()) throw ParseError("distractors must be an array");
    for (const auto& dj : *it) {
      Distractor d;
      const json& anchor = require(dj, "anchor_index");
      if (!anchor.is_number_unsigned()) {
        throw ParseError("anchor_index must be a non-negative integer");
      }
      d.anchor_index = anchor.get<std::size_t>();
      d.text = require_string(dj, "text");
      d.source = dj.contains("source") ? require_enum<DistractorSource>(dj, "source", parse_source)
                                       : DistractorSource::synthetic;
      if (auto rt = dj.find("rule_type"); rt != dj.end() && !rt->is_null()) {
        d.rule_type = require_enum<RuleType>(dj, "rule_type", parse_rule_type);
      }
      c.distractors.push_back(std::move(d));
    }
  }
  return c;
}

std::string to_jsonl(const Dataset& dataset, ValidationOptions opts) {
  // Validate everything before producing a single byte.
  for (const auto& c : dataset.conversations) {
    try {
      validate(c, opts);
    } catch (const InvariantError& e) {
      throw InvariantError("conversation \"" + c.id + "\": " + e.what());
    }
  }
  std::string out;
  for (const auto& c : dataset.conversations) {
    try {
      out += to_json(c, dataset.config_fingerprint).dump(-1, ' ', false);
    } catch (const nlohmann::json::type_error& e) {
      throw InvariantError("conversation \"" + c.id + "\" is not valid UTF-8: " + e.what());
    }
    out += '\n';
  }
  return out;
}

Dataset parse_jsonl(std::string_view content, ValidationOptions opts) {
  Dataset ds;
  std::size_t line_no = 0;
  bool first = true;
  for (const auto& line : split_lines(content)) {
    ++line_no;
    if (blank(line)) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(std::string("malformed JSON: ") + e.what(), line_no);
    }
    Conversation c;
    try {
      c = conversation_from_json(j);
      validate(c, opts);
    } catch (const ParseError& e) {
      throw ParseError(e.what(), line_no);
    } catch (const InvariantError& e) {
      throw InvariantError("line " + std::to_string(line_no) + ": " + e.what());
    } catch (const json::exception& e) {
      throw ParseError(e.what(), line_no);
    }
    if (auto fp = j.find("config_fingerprint"); fp != j.end() && fp->is_string() && first) {
      ds.config_fingerprint = fp->get<std::string>();
    }
    first = false;
    ds.conversations.push_back(std::move(c));
  }
  return ds;
}

void write_jsonl(const Dataset& dataset, const std::filesystem::path& path,
                 ValidationOptions opts) {
  atomic_write_file(path, to_jsonl(dataset, opts));
}

Dataset read_jsonl(const std::filesystem::path& path, ValidationOptions opts) {
  if (!std::filesystem::exists(path)) throw IoError("no such file: " + path.string());
  return parse_jsonl(read_file(path), opts);
}

SplitResult split_by_domain(const Dataset& dataset, const SplitPolicy& policy) {
  std::set<std::string> missing;
  for (const auto& c : dataset.conversations) {
    if (!policy.contains(c.domain())) missing.insert(c.domain());
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& d : missing) list += (list.empty() ? "" : ", ") + d;
    throw ConfigError("split policy does not map domains: " + list);
  }
  SplitResult out;
  out.train.config_fingerprint = out.val.config_fingerprint = out.test.config_fingerprint =
      dataset.config_fingerprint;
  for (const auto& c : dataset.conversations) {
    switch (policy.find(c.domain())->second) {
      case Split::train: out.train.conversations.push_back(c); break;
      case Split::val: out.val.conversations.push_back(c); break;
      case Split::test: out.test.conversations.push_back(c); break;
    }
  }
  return out;
}

const std::vector<std::string>& default_domains() {
  static const std::vector<std::string> kDomains = {
      "health", "banking", "insurance", "travel", "taxes",
      "legal", "education", "computer troubleshooting", "real estate"};
  return kDomains;
}

SplitPolicy default_split_policy() {
  SplitPolicy p;
  for (const auto& d : default_domains()) p[d] = Split::train;
  p["travel"] = Split::val;
  p["banking"] = Split::test;
  return p;
}

}  // namespace topicguard
