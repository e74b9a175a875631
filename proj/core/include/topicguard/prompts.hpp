#pragma once

// Prompt templates and slot filling.
//
// Slots are written {name}. Filling is a single left-to-right pass: values
// are interpolated raw (no escaping) and are never re-scanned, and braces
// that do not name a provided slot are left untouched.

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

namespace topicguard {

struct PromptTemplates {
  std::string scenarios;        // {domain} {existing_scenarios} [{scenarios_per_call}]
  std::string instruction;      // {domain} {scenario}
  std::string conversation;     // {sys_instr}
  std::string distractors;      // {few-shot} {domain} {scenario} {sys_instr} {conversation}
  std::string classification;   // {sys_instr} {conversation} {turn}
  std::string mitigation;       // {sys_instr} {conversation} {distractor}
  std::string rule_annotation;  // {sys_instr}
  std::string rule_attribution; // {sys_instr} {rule_breakdown} {distractor}
  std::string eval_directive;   // appended to the system prompt under evaluation
};

const PromptTemplates& default_templates();

// Starts from the defaults and replaces each template whose file
// (<name>.txt) exists in `dir`.
PromptTemplates load_templates(const std::filesystem::path& dir);

// Writes the default templates as <name>.txt files into `dir`.
void export_default_templates(const std::filesystem::path& dir);

using SlotValues = std::map<std::string, std::string, std::less<>>;

std::string fill_template(std::string_view tmpl, const SlotValues& slots);

}  // namespace topicguard
