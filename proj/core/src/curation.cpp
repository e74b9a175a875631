#include "topicguard/curation.hpp"

#include <numeric>

#include "topicguard/errors.hpp"
#include "topicguard/genpipe.hpp"
#include "topicguard/util.hpp"

namespace topicguard {

std::vector<Turn> flatten(const Conversation& conv, std::span<const std::size_t> selected,
                          std::span<const std::string> responses, Origin response_origin) {
  if (selected.size() != responses.size()) {
    throw PreconditionError("flatten: one response per selected distractor is required");
  }
  std::vector<Turn> out;
  out.reserve(conv.turns.size() + 2 * selected.size());
  for (std::size_t i = 0; i < conv.turns.size(); ++i) {
    out.push_back(conv.turns[i]);
    for (std::size_t k = 0; k < selected.size(); ++k) {
      const Distractor& d = conv.distractors.at(selected[k]);
      if (d.anchor_index != i) continue;
      out.push_back(Turn{Role::user, d.text, Origin::distractor});
      out.push_back(Turn{Role::bot, responses[k], response_origin});
    }
  }
  return out;
}

namespace {

AlignmentSample make_sample(const Conversation& conv, std::string id, std::vector<Turn> turns) {
  AlignmentSample s;
  s.id = std::move(id);
  s.conversation_id = conv.id;
  s.scenario = conv.scenario;
  s.system_instruction = conv.instruction.text;
  s.turns = std::move(turns);
  return s;
}

template <typename ResponseFn>
std::vector<AlignmentSample> curate(const Conversation& conv, CurationMode mode, Origin origin,
                                    ResponseFn&& respond) {
  validate(conv);
  std::vector<AlignmentSample> out;
  if (conv.distractors.empty()) return out;
  if (mode == CurationMode::per_distractor) {
    for (std::size_t k = 0; k < conv.distractors.size(); ++k) {
      const std::size_t sel[] = {k};
      const std::string resp[] = {respond(conv.distractors[k])};
      out.push_back(make_sample(conv, conv.id + "#d" + std::to_string(k), flatten(conv, sel, resp, origin)));
    }
  } else {
    std::vector<std::size_t> sel(conv.distractors.size());
    std::iota(sel.begin(), sel.end(), 0);
    std::vector<std::string> resp;
    for (const auto& d : conv.distractors) resp.push_back(respond(d));
    out.push_back(make_sample(conv, conv.id + "#all", flatten(conv, sel, resp, origin)));
  }
  for (const auto& s : out) validate(s);
  return out;
}

}  // namespace

std::vector<AlignmentSample> curate_refusals(const Conversation& conv, std::string_view refusal,
                                             CurationMode mode) {
  if (trim(refusal).empty()) throw PreconditionError("refusal template must be non-empty");
  return curate(conv, mode, Origin::refusal, [&](const Distractor&) { return std::string(refusal); });
}

std::string generate_mitigation(const Conversation& conv, const Distractor& d, Backend& backend,
                                const PromptTemplates& templates) {
  if (d.anchor_index >= conv.turns.size() || conv.turns[d.anchor_index].role != Role::bot) {
    throw InvariantError("anchor must reference a bot turn");
  }
  const std::span<const Turn> prefix(conv.turns.data(), d.anchor_index + 1);
  const std::string prompt = fill_template(templates.mitigation,
                                           {{"sys_instr", conv.instruction.text},
                                            {"conversation", render_conversation(prefix)},
                                            {"distractor", d.text}});
  return backend.complete({{MessageRole::user, prompt}});
}

std::vector<AlignmentSample> curate_mitigations(const Conversation& conv, Backend& backend,
                                                const PromptTemplates& templates, CurationMode mode) {
  return curate(conv, mode, Origin::mitigation,
                [&](const Distractor& d) { return generate_mitigation(conv, d, backend, templates); });
}

void validate(const AlignmentSample& sample) {
  if (sample.turns.empty()) throw InvariantError("alignment sample has no turns");
  for (const auto& t : sample.turns) validate(t);
  validate_alternation(sample.turns);
  for (std::size_t i = 0; i < sample.turns.size(); ++i) {
    if (sample.turns[i].origin != Origin::distractor) continue;
    if (i + 1 >= sample.turns.size() ||
        (sample.turns[i + 1].origin != Origin::refusal && sample.turns[i + 1].origin != Origin::mitigation)) {
      throw InvariantError("distractor turn " + std::to_string(i) +
                           " must be followed by a refusal or mitigation turn");
    }
  }
}

Conversation to_conversation(const AlignmentSample& sample) {
  Conversation c;
  c.id = sample.id;
  c.scenario = sample.scenario;
  c.instruction.scenario_id = sample.scenario.id;
  c.instruction.text = sample.system_instruction;
  c.turns = sample.turns;
  return c;
}

AlignmentSample sample_from_conversation(const Conversation& conv) {
  AlignmentSample s;
  s.id = conv.id;
  auto hash = conv.id.rfind('#');
  s.conversation_id = hash == std::string::npos ? conv.id : conv.id.substr(0, hash);
  s.scenario = conv.scenario;
  s.system_instruction = conv.instruction.text;
  s.turns = conv.turns;
  return s;
}

ordered_json to_chat_messages(const AlignmentSample& sample) {
  ordered_json j;
  j["id"] = sample.id;
  j["messages"] = ordered_json::array();
  j["messages"].push_back(ordered_json{{"role", "system"}, {"content", sample.system_instruction}});
  for (const auto& t : sample.turns) {
    j["messages"].push_back(
        ordered_json{{"role", t.role == Role::user ? "user" : "assistant"}, {"content", t.text}});
  }
  return j;
}

DatasetStats dataset_stats(std::span<const AlignmentSample> samples) {
  DatasetStats st;
  st.samples = samples.size();
  for (const auto& s : samples) {
    ++st.samples_per_domain[s.scenario.domain];
    for (const auto& t : s.turns) {
      ++st.turns;
      (t.role == Role::user ? st.user_turns : st.bot_turns) += 1;
      if (t.origin == Origin::distractor) ++st.distractor_turns;
    }
  }
  if (st.turns > 0) {
    st.distractor_fraction = static_cast<double>(st.distractor_turns) / static_cast<double>(st.turns);
  }
  if (st.samples > 0) {
    st.avg_turns_per_sample = static_cast<double>(st.turns) / static_cast<double>(st.samples);
  }
  return st;
}

ordered_json to_json(const DatasetStats& st) {
  ordered_json j;
  j["samples"] = st.samples;
  j["turns"] = st.turns;
  j["user_turns"] = st.user_turns;
  j["bot_turns"] = st.bot_turns;
  j["distractor_turns"] = st.distractor_turns;
  j["distractor_fraction"] = st.distractor_fraction;
  j["avg_turns_per_sample"] = st.avg_turns_per_sample;
  j["samples_per_domain"] = ordered_json::object();
  for (const auto& [d, n] : st.samples_per_domain) j["samples_per_domain"][d] = n;
  return j;
}

}  // namespace topicguard
