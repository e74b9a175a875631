#include "topicguard/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "topicguard/errors.hpp"
#include "topicguard/genpipe.hpp"
#include "topicguard/textmetrics.hpp"
#include "topicguard/util.hpp"

namespace topicguard {

using json = nlohmann::json;

std::size_t rule_index(RuleType t) {
  for (std::size_t i = 0; i < std::size(kAllRuleTypes); ++i) {
    if (kAllRuleTypes[i] == t) return i;
  }
  throw InvariantError("unknown rule type");
}

std::optional<RuleType> parse_rule_label(std::string_view label) {
  const std::string l = ascii_lower(trim(label));
  if (auto t = parse_rule_type(l)) return t;
  static const std::pair<std::string_view, RuleType> kLabels[] = {
      {"topic/subject allowed", RuleType::allowed},
      {"topic/subject disallowed", RuleType::disallowed},
      {"allowed topic", RuleType::allowed},
      {"disallowed topic", RuleType::disallowed},
      {"conversation flow", RuleType::flow},
      {"conversation tone/style", RuleType::tone},
      {"tone/style", RuleType::tone},
      {"style", RuleType::tone},
  };
  for (const auto& [name, type] : kLabels) {
    if (l == name) return type;
  }
  return std::nullopt;
}

std::vector<QuotedRule> parse_rule_annotation_reply(std::string_view reply) {
  std::vector<QuotedRule> out;
  auto parsed = parse_json_loose(strip_code_fences(reply));
  if (!parsed) return out;
  json items = *parsed;
  if (items.is_object()) {
    json inner = json::array();
    for (const auto& [k, v] : items.items()) {
      if (v.is_array()) {
        inner = v;
        break;
      }
    }
    items = inner;
  }
  if (!items.is_array()) return out;
  for (const auto& item : items) {
    if (!item.is_object()) continue;
    auto span = item.find("span");
    auto label = item.find("rule_type");
    if (label == item.end()) label = item.find("type");
    if (span == item.end() || label == item.end() || !span->is_string() || !label->is_string()) continue;
    out.push_back({span->get<std::string>(), label->get<std::string>()});
  }
  return out;
}

namespace {

struct Clause {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::vector<std::string> tokens;
};

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }

// Clauses end after , ; : . ! ? followed by whitespace or end of text.
std::vector<Clause> split_clauses(std::string_view text) {
  std::vector<Clause> out;
  std::size_t start = 0;
  auto emit = [&](std::size_t e) {
    std::size_t b = start;
    while (b < e && is_space(text[b])) ++b;
    std::size_t t = e;
    while (t > b && is_space(text[t - 1])) --t;
    if (t > b) out.push_back({b, t, tokenize(text.substr(b, t - b))});
    start = e;
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    const bool delim = c == ',' || c == ';' || c == ':' || c == '.' || c == '!' || c == '?';
    if (delim && (i + 1 == text.size() || is_space(text[i + 1]))) emit(i + 1);
  }
  emit(text.size());
  return out;
}

constexpr std::size_t kMaxClauseRun = 8;

}  // namespace

std::optional<std::pair<std::size_t, std::size_t>> locate_span(std::string_view text,
                                                               std::string_view quoted,
                                                               double min_score) {
  const std::string q = trim(quoted);
  if (q.empty()) return std::nullopt;
  if (auto pos = text.find(q); pos != std::string_view::npos) return std::pair{pos, pos + q.size()};

  const auto qtok = tokenize(q);
  if (qtok.empty()) return std::nullopt;
  const auto clauses = split_clauses(text);
  double best = -1.0;
  std::pair<std::size_t, std::size_t> best_range{0, 0};
  for (std::size_t i = 0; i < clauses.size(); ++i) {
    std::vector<std::string> run;
    for (std::size_t j = i; j < clauses.size() && j < i + kMaxClauseRun; ++j) {
      run.insert(run.end(), clauses[j].tokens.begin(), clauses[j].tokens.end());
      const double f = rouge_l(qtok, run).f;
      if (f > best) {
        best = f;
        best_range = {clauses[i].begin, clauses[j].end};
      }
    }
  }
  if (best < min_score) return std::nullopt;
  return best_range;
}

TopicalInstruction annotate_instruction_rules(const TopicalInstruction& instr, Backend& backend,
                                              const PromptTemplates& templates, double min_score) {
  const std::string prompt = fill_template(templates.rule_annotation, {{"sys_instr", instr.text}});
  ChatRequest req;
  req.model = backend.chat_model();
  req.temperature = 0.0;
  req.messages.push_back({MessageRole::user, prompt});
  const std::string reply = backend.chat(req);

  TopicalInstruction out = instr;
  out.rule_spans.emplace();
  for (const auto& rule : parse_rule_annotation_reply(reply)) {
    const auto type = parse_rule_label(rule.label);
    if (!type) {
      log_warning("instruction " + instr.scenario_id + ": unknown rule label '" + rule.label + "'");
      continue;
    }
    const auto range = locate_span(instr.text, rule.span, min_score);
    if (!range) {
      log_warning("instruction " + instr.scenario_id + ": span not found in text: " + rule.span);
      continue;
    }
    out.rule_spans->push_back(RuleSpan{range->first, range->second, *type});
  }
  return out;
}

RuleTypeDistribution rule_distribution(std::span<const TopicalInstruction> instructions) {
  RuleTypeDistribution d;
  for (const auto& instr : instructions) {
    if (!instr.rule_spans) continue;
    ++d.instructions;
    for (const auto& s : *instr.rule_spans) {
      ++d.counts[rule_index(s.type)];
      ++d.total;
    }
  }
  d.defined = d.total > 0;
  for (std::size_t i = 0; i < 4; ++i) {
    if (d.defined) d.fractions[i] = static_cast<double>(d.counts[i]) / static_cast<double>(d.total);
    if (d.instructions > 0) {
      d.per_instruction[i] = static_cast<double>(d.counts[i]) / static_cast<double>(d.instructions);
    }
  }
  return d;
}

ordered_json to_json(const RuleTypeDistribution& d) {
  ordered_json j;
  j["instructions"] = d.instructions;
  j["total_spans"] = d.total;
  j["defined"] = d.defined;
  j["by_type"] = ordered_json::object();
  for (std::size_t i = 0; i < 4; ++i) {
    j["by_type"][std::string(to_string(kAllRuleTypes[i]))] = ordered_json{
        {"count", d.counts[i]},
        {"fraction", d.defined ? ordered_json(d.fractions[i]) : ordered_json(nullptr)},
        {"per_instruction", d.per_instruction[i]}};
  }
  return j;
}

std::string rule_breakdown(const TopicalInstruction& instr) {
  if (!instr.rule_spans) {
    throw PreconditionError("instruction for " + instr.scenario_id + " has no rule annotation");
  }
  static const std::string_view kHeadings[] = {"conversation flow", "topic/subject allowed",
                                               "topic/subject disallowed", "conversation tone/style"};
  std::string out;
  for (std::size_t i = 0; i < 4; ++i) {
    out += "- ";
    out += kHeadings[i];
    out += " (" + std::string(to_string(kAllRuleTypes[i])) + "):";
    bool any = false;
    for (const auto& s : *instr.rule_spans) {
      if (s.type != kAllRuleTypes[i]) continue;
      out += any ? " | " : " ";
      out += instr.text.substr(s.begin, s.end - s.begin);
      any = true;
    }
    if (!any) out += " (none)";
    if (i + 1 < 4) out += "\n";
  }
  return out;
}

std::optional<RuleType> parse_rule_category(std::string_view reply) {
  std::string last;
  for (const auto& line : split_lines(reply)) {
    if (!trim(line).empty()) last = line;
  }
  std::optional<RuleType> found;
  for (const auto& tok : tokenize(last)) {
    auto t = parse_rule_type(tok);
    if (!t) continue;
    if (found && *found != *t) return std::nullopt;
    found = t;
  }
  return found;
}

namespace {

void finish(AttributionCounts& c) {
  const std::size_t attributed = c.total - c.unattributed;
  if (attributed == 0) return;
  for (std::size_t i = 0; i < 4; ++i) {
    c.fractions[i] = static_cast<double>(c.counts[i]) / static_cast<double>(attributed);
  }
}

ordered_json counts_json(const AttributionCounts& c) {
  ordered_json j;
  j["total"] = c.total;
  j["unattributed"] = c.unattributed;
  j["by_type"] = ordered_json::object();
  for (std::size_t i = 0; i < 4; ++i) {
    j["by_type"][std::string(to_string(kAllRuleTypes[i]))] =
        ordered_json{{"count", c.counts[i]}, {"fraction", c.fractions[i]}};
  }
  return j;
}

}  // namespace

AttributionResult attribute_distractors(const Dataset& dataset, Backend& backend,
                                        const PromptTemplates& templates, std::size_t max_parallel) {
  for (const auto& c : dataset.conversations) {
    if (!c.instruction.rule_spans) {
      throw PreconditionError("conversation " + c.id +
                              ": instruction is not rule-annotated; run the rules analysis first");
    }
  }
  struct Item {
    std::size_t conv;
    std::size_t dis;
  };
  std::vector<Item> items;
  for (std::size_t c = 0; c < dataset.conversations.size(); ++c) {
    for (std::size_t d = 0; d < dataset.conversations[c].distractors.size(); ++d) items.push_back({c, d});
  }

  std::vector<std::optional<RuleType>> types(items.size());
  parallel_for(items.size(), max_parallel, [&](std::size_t i) {
    const Conversation& conv = dataset.conversations[items[i].conv];
    const Distractor& d = conv.distractors[items[i].dis];
    const std::string prompt = fill_template(templates.rule_attribution,
                                             {{"sys_instr", conv.instruction.text},
                                              {"rule_breakdown", rule_breakdown(conv.instruction)},
                                              {"distractor", d.text}});
    ChatRequest req;
    req.model = backend.chat_model();
    req.temperature = 0.0;
    req.messages.push_back({MessageRole::user, prompt});
    types[i] = parse_rule_category(backend.chat(req));
  });

  AttributionResult r;
  r.dataset = dataset;
  for (std::size_t i = 0; i < items.size(); ++i) {
    Distractor& d = r.dataset.conversations[items[i].conv].distractors[items[i].dis];
    d.rule_type = types[i];
    AttributionCounts& c = d.source == DistractorSource::human ? r.human : r.synthetic;
    ++c.total;
    if (types[i]) {
      ++c.counts[rule_index(*types[i])];
    } else {
      ++c.unattributed;
      log_warning("distractor " + std::to_string(items[i].dis) + " of " +
                  r.dataset.conversations[items[i].conv].id + ": no rule category in reply");
    }
  }
  finish(r.synthetic);
  finish(r.human);
  return r;
}

ordered_json to_json(const AttributionResult& r) {
  return ordered_json{{"synthetic", counts_json(r.synthetic)}, {"human", counts_json(r.human)}};
}

std::size_t complexity_bin(double cosine) {
  const double x = std::clamp(cosine, -1.0, 1.0);
  const auto b = static_cast<std::size_t>(std::floor((x + 1.0) * 20.0));
  return std::min(b, kComplexityBins - 1);
}

namespace {

SourceSummary summarize(std::vector<double> values) {
  SourceSummary s;
  s.count = values.size();
  if (values.empty()) return s;
  // Sorted first so the result does not depend on input order.
  std::sort(values.begin(), values.end());
  double sum = 0.0;
  for (double v : values) {
    sum += v;
    ++s.histogram[complexity_bin(v)];
  }
  s.mean = sum / static_cast<double>(values.size());
  const std::size_t n = values.size();
  s.median = n % 2 ? values[n / 2] : (values[n / 2 - 1] + values[n / 2]) / 2.0;
  return s;
}

ordered_json summary_json(const SourceSummary& s) {
  ordered_json j;
  j["count"] = s.count;
  j["mean"] = s.mean;
  j["median"] = s.median;
  j["histogram"] = s.histogram;
  return j;
}

}  // namespace

ComplexityProfile complexity_profile(const Dataset& dataset, Backend& embedder, std::size_t batch_size) {
  if (batch_size == 0) throw PreconditionError("embedding batch size must be positive");
  ComplexityProfile p;
  std::vector<std::pair<std::string, std::string>> pairs;  // (distractor, anchor)
  for (const auto& conv : dataset.conversations) {
    for (std::size_t k = 0; k < conv.distractors.size(); ++k) {
      const Distractor& d = conv.distractors[k];
      if (d.anchor_index >= conv.turns.size() || conv.turns[d.anchor_index].role != Role::bot) {
        throw InvariantError("conversation " + conv.id + ": anchor must reference a bot turn");
      }
      p.points.push_back({conv.id, k, d.source, 0.0});
      pairs.emplace_back(d.text, conv.turns[d.anchor_index].text);
    }
  }

  // Embed each distinct text once.
  std::map<std::string, EmbeddingVector, std::less<>> cache;
  std::vector<std::string> pending;
  for (const auto& [a, b] : pairs) {
    for (const std::string* t : {&a, &b}) {
      if (cache.emplace(*t, EmbeddingVector{}).second) pending.push_back(*t);
    }
  }
  for (std::size_t off = 0; off < pending.size(); off += batch_size) {
    const std::size_t n = std::min(batch_size, pending.size() - off);
    auto vecs = embedder.embed(std::span<const std::string>(pending.data() + off, n));
    for (std::size_t i = 0; i < n; ++i) cache[pending[off + i]] = std::move(vecs[i]);
  }

  for (std::size_t i = 0; i < p.points.size(); ++i) {
    p.points[i].cosine = cosine(cache.at(pairs[i].first), cache.at(pairs[i].second));
  }
  std::sort(p.points.begin(), p.points.end(), [](const ComplexityPoint& a, const ComplexityPoint& b) {
    return std::tie(a.conversation_id, a.distractor_index) < std::tie(b.conversation_id, b.distractor_index);
  });

  std::vector<double> syn, hum, all;
  for (const auto& pt : p.points) {
    (pt.source == DistractorSource::human ? hum : syn).push_back(pt.cosine);
    all.push_back(pt.cosine);
  }
  p.synthetic = summarize(std::move(syn));
  p.human = summarize(std::move(hum));
  p.all = summarize(std::move(all));
  return p;
}

ordered_json to_json(const ComplexityProfile& p) {
  ordered_json j;
  j["bin_width"] = 0.05;
  j["synthetic"] = summary_json(p.synthetic);
  j["human"] = summary_json(p.human);
  j["all"] = summary_json(p.all);
  j["points"] = ordered_json::array();
  for (const auto& pt : p.points) {
    j["points"].push_back(ordered_json{{"conversation_id", pt.conversation_id},
                                       {"distractor_index", pt.distractor_index},
                                       {"source", to_string(pt.source)},
                                       {"cosine", pt.cosine}});
  }
  return j;
}

namespace {

std::string bin_edge(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%.2f", -1.0 + 0.05 * static_cast<double>(i));
  return buf;
}

}  // namespace

std::string histogram_csv(const ComplexityProfile& p) {
  std::string out = "bin_start,bin_end,synthetic,human\n";
  for (std::size_t i = 0; i < kComplexityBins; ++i) {
    out += bin_edge(i) + "," + bin_edge(i + 1) + "," + std::to_string(p.synthetic.histogram[i]) + "," +
           std::to_string(p.human.histogram[i]) + "\n";
  }
  return out;
}

std::string render_histogram(const ComplexityProfile& p, std::size_t width) {
  std::size_t peak = 1;
  for (std::size_t i = 0; i < kComplexityBins; ++i) {
    peak = std::max({peak, p.synthetic.histogram[i], p.human.histogram[i]});
  }
  std::ostringstream os;
  char head[160];
  std::snprintf(head, sizeof head, "synthetic: n=%zu mean=%.4f median=%.4f\nhuman:     n=%zu mean=%.4f median=%.4f\n",
                p.synthetic.count, p.synthetic.mean, p.synthetic.median, p.human.count, p.human.mean,
                p.human.median);
  os << head;
  for (std::size_t i = 0; i < kComplexityBins; ++i) {
    const auto s = p.synthetic.histogram[i];
    const auto h = p.human.histogram[i];
    if (s == 0 && h == 0) continue;
    os << bin_edge(i) << " S " << std::string(s * width / peak, '#') << " " << s << "\n";
    os << "      H " << std::string(h * width / peak, '*') << " " << h << "\n";
  }
  return os.str();
}

}  // namespace topicguard
