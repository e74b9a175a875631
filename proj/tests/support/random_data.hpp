#pragma once

// Seeded generators for property tests.

#include <random>
#include <string>
#include <vector>

#include <topicguard/core.hpp>
#include <topicguard/evalharness.hpp>

namespace topicguard::testing {

inline std::string random_sentence(std::mt19937& rng, std::size_t min_words = 3, std::size_t max_words = 12) {
  static const char* kWords[] = {"flight", "booking", "account", "balance", "refund", "policy", "claim",
                                 "doctor", "visit", "tax", "return", "order", "delivery", "the", "a",
                                 "my", "please", "can", "you", "check", "update", "when", "is", "next"};
  std::uniform_int_distribution<std::size_t> len(min_words, max_words), pick(0, std::size(kWords) - 1);
  std::string out;
  for (std::size_t i = 0, n = len(rng); i < n; ++i) out += (i ? " " : "") + std::string(kWords[pick(rng)]);
  return out;
}

// Alternating user/bot conversation with up to `max_distractors` distractors
// anchored on random bot turns (anchors may repeat).
inline Conversation random_conversation(std::mt19937& rng, std::size_t index, std::size_t max_distractors = 5) {
  static const char* kDomains[] = {"travel", "banking", "health", "insurance"};
  Conversation c;
  c.scenario = {"s" + std::to_string(index), kDomains[index % std::size(kDomains)], random_sentence(rng)};
  c.id = c.scenario.id + "/conv0";
  c.instruction = {c.scenario.id, random_sentence(rng, 10, 30), std::nullopt};
  const std::size_t pairs = std::uniform_int_distribution<std::size_t>(1, 10)(rng);
  for (std::size_t k = 0; k < pairs; ++k) {
    c.turns.push_back({Role::user, random_sentence(rng), Origin::on_topic});
    c.turns.push_back({Role::bot, random_sentence(rng), Origin::on_topic});
  }
  const std::size_t nd = std::uniform_int_distribution<std::size_t>(0, max_distractors)(rng);
  std::uniform_int_distribution<std::size_t> anchor(0, pairs - 1);
  for (std::size_t k = 0; k < nd; ++k) {
    c.distractors.push_back({2 * anchor(rng) + 1, "off topic question " + std::to_string(k) + "?",
                             k % 2 ? DistractorSource::human : DistractorSource::synthetic, std::nullopt});
  }
  return c;
}

inline std::vector<TurnVerdict> random_verdicts(std::mt19937& rng, std::size_t max_n = 60) {
  const std::size_t n = std::uniform_int_distribution<std::size_t>(0, max_n)(rng);
  std::bernoulli_distribution coin;
  std::vector<TurnVerdict> out;
  for (std::size_t i = 0; i < n; ++i) {
    TurnVerdict v;
    v.conversation_id = "c" + std::to_string(i % 7);
    v.turn_index = i;
    v.gold = coin(rng) ? Gold::distractor : Gold::on_topic;
    v.predicted = coin(rng) ? Prediction::refused : Prediction::engaged;
    if (v.predicted == Prediction::refused) v.matched_phrase = "related to the scenario";
    v.model_response = "r";
    out.push_back(std::move(v));
  }
  return out;
}

}  // namespace topicguard::testing
