#pragma once

// Domain data model, JSONL persistence and domain-based splitting.

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace topicguard {

using ordered_json = nlohmann::ordered_json;

enum class Role { user, bot };
enum class Origin { on_topic, distractor, refusal, mitigation };
enum class RuleType { flow, allowed, disallowed, tone };
enum class DistractorSource { synthetic, human };
enum class Split { train, val, test };

std::string_view to_string(Role r);
std::string_view to_string(Origin o);
std::string_view to_string(RuleType t);
std::string_view to_string(DistractorSource s);
std::string_view to_string(Split s);

std::optional<Role> parse_role(std::string_view s);
std::optional<Origin> parse_origin(std::string_view s);
std::optional<RuleType> parse_rule_type(std::string_view s);
std::optional<DistractorSource> parse_source(std::string_view s);
std::optional<Split> parse_split(std::string_view s);

inline constexpr RuleType kAllRuleTypes[] = {RuleType::flow, RuleType::allowed,
                                             RuleType::disallowed, RuleType::tone};

struct Scenario {
  std::string id;
  std::string domain;
  std::string text;

  bool operator==(const Scenario&) const = default;
};

// Byte offsets into TopicalInstruction::text, half-open.
struct RuleSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  RuleType type = RuleType::flow;

  bool operator==(const RuleSpan&) const = default;
};

struct TopicalInstruction {
  std::string scenario_id;
  std::string text;
  // nullopt: never annotated. Empty vector: annotated, nothing found.
  std::optional<std::vector<RuleSpan>> rule_spans;

  bool operator==(const TopicalInstruction&) const = default;
};

struct Turn {
  Role role = Role::user;
  std::string text;
  Origin origin = Origin::on_topic;

  bool operator==(const Turn&) const = default;
};

struct Distractor {
  std::size_t anchor_index = 0;  // index of the bot turn it follows
  std::string text;
  DistractorSource source = DistractorSource::synthetic;
  std::optional<RuleType> rule_type;

  bool operator==(const Distractor&) const = default;
};

struct Conversation {
  std::string id;
  Scenario scenario;
  TopicalInstruction instruction;
  std::vector<Turn> turns;
  std::vector<Distractor> distractors;

  const std::string& domain() const { return scenario.domain; }
  bool operator==(const Conversation&) const = default;
};

struct Dataset {
  std::vector<Conversation> conversations;
  // Stamped on every written line when non-empty.
  std::string config_fingerprint;

  std::size_t size() const { return conversations.size(); }
  bool empty() const { return conversations.empty(); }
  bool operator==(const Dataset&) const = default;
};

struct ValidationOptions {
  // Human-sourced files sometimes open with a bot greeting.
  bool allow_bot_first = false;
};

// All validators throw InvariantError naming the violated rule.
void validate(const Scenario& s);
void validate(const Scenario& s, std::span<const std::string> domains);
void validate(const TopicalInstruction& instr);
void validate(const Turn& t);
void validate_alternation(std::span<const Turn> turns, ValidationOptions opts = {});
void validate(const Conversation& c, ValidationOptions opts = {});

// Stable, human-readable id: "<domain>/<8 hex of text hash>/<index>". A
// non-empty seed is hashed together with the text so separate datasets
// built from the same scenarios get disjoint ids.
std::string make_scenario_id(std::string_view domain, std::string_view text, std::size_t index,
                             std::string_view seed = {});

ordered_json to_json(const Scenario& s);
Scenario scenario_from_json(const nlohmann::json& j);
ordered_json to_json(const TopicalInstruction& instr, const Scenario& scenario);
std::pair<TopicalInstruction, Scenario> instruction_from_json(const nlohmann::json& j);
ordered_json to_json(const Conversation& c, std::string_view config_fingerprint = {});
Conversation conversation_from_json(const nlohmann::json& j);

std::string to_jsonl(const Dataset& dataset, ValidationOptions opts = {});
Dataset parse_jsonl(std::string_view content, ValidationOptions opts = {});

void write_jsonl(const Dataset& dataset, const std::filesystem::path& path,
                 ValidationOptions opts = {});
Dataset read_jsonl(const std::filesystem::path& path, ValidationOptions opts = {});

using SplitPolicy = std::map<std::string, Split, std::less<>>;

struct SplitResult {
  Dataset train;
  Dataset val;
  Dataset test;
};

// Throws ConfigError listing every domain that the policy does not map.
SplitResult split_by_domain(const Dataset& dataset, const SplitPolicy& policy);

// Nine domains, travel held out for validation and banking for test.
SplitPolicy default_split_policy();
const std::vector<std::string>& default_domains();

}  // namespace topicguard
