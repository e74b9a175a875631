#pragma once

// A deterministic stand-in for the chat/embedding endpoints. It recognises
// each pipeline prompt by its template text and answers with replies shaped
// like real model output (numbered lists, fenced JSON, step-by-step verdicts),
// derived only from a hash of the request so replays are byte-stable.

#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <topicguard/llm_client.hpp>
#include <topicguard/mock_backend.hpp>

namespace topicguard::testing {

enum class CandidatePolicy {
  always_refuse,
  always_engage,
  perfect,    // refuses exactly the distractors
  imperfect,  // refuses most distractors, a few on-topic turns
};

struct SimOptions {
  CandidatePolicy candidate = CandidatePolicy::imperfect;
  // Scenarios listed per reply (the prompt asks for 10).
  std::size_t scenarios_per_reply = 10;
  // Every n-th conversation's first attempt opens with a bot turn.
  std::size_t malformed_every = 7;
  // Every n-th distractor reply contains one on-topic false positive.
  std::size_t false_positive_every = 3;
  std::size_t embedding_dim = 64;
};

const std::vector<std::string>& off_topic_bank();
bool is_off_topic(std::string_view text);

// Reply for one request; nullopt when the prompt is not recognised.
std::optional<std::string> sim_reply(const ChatRequest& req, const SimOptions& opts = {});

// MockBackend wired to sim_reply and hash embeddings.
std::shared_ptr<MockBackend> make_sim_backend(const SimOptions& opts = {}, std::string model = "mock");

}  // namespace topicguard::testing
