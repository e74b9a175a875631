#include <topicguard/llm_client.hpp>

#include <atomic>
#include <thread>

#include <gtest/gtest.h>

#include <topicguard/errors.hpp>
#include <topicguard/mock_backend.hpp>
#include <topicguard/util.hpp>

#include "temp_dir.hpp"

namespace topicguard {
namespace {

using json = nlohmann::json;

ChatRequest simple_request(std::string text = "hello", double temperature = 0.7) {
  ChatRequest r;
  r.model = "gpt-test";
  r.messages = {{MessageRole::system, "be brief"}, {MessageRole::user, std::move(text)}};
  r.temperature = temperature;
  return r;
}

EndpointSettings fast_settings() {
  EndpointSettings s;
  s.base_url = "http://unused";
  s.api_key = "sk-test";
  s.model_chat = "gpt-test";
  s.model_embed = "embed-test";
  s.retry.initial_delay = std::chrono::milliseconds(1);
  s.retry.max_delay = std::chrono::milliseconds(5);
  return s;
}

TEST(ChatRequestValidation, RejectsMalformedRequests) {
  ChatRequest r = simple_request();
  EXPECT_NO_THROW(validate(r));
  r.messages.push_back({MessageRole::system, "second"});
  EXPECT_THROW(validate(r), PreconditionError);
  r = simple_request();
  r.temperature = -0.1;
  EXPECT_THROW(validate(r), PreconditionError);
  r = simple_request();
  r.max_tokens = 0;
  EXPECT_THROW(validate(r), PreconditionError);
  r.messages.clear();
  r.max_tokens.reset();
  EXPECT_THROW(validate(r), PreconditionError);
}

TEST(Fingerprint, CoversModelAndMessagesOnly) {
  const auto a = simple_request("hello", 0.7);
  const auto b = simple_request("hello", 0.0);
  EXPECT_EQ(fingerprint(a), fingerprint(b));
  EXPECT_NE(fingerprint(a), fingerprint(simple_request("hello!")));
  auto c = a;
  c.model = "other";
  EXPECT_NE(fingerprint(a), fingerprint(c));
  EXPECT_EQ(fingerprint(a).size(), 64u);
}

TEST(WireJson, RoundTrip) {
  auto r = simple_request();
  r.max_tokens = 42;
  const auto back = chat_request_from_wire_json(to_wire_json(r));
  EXPECT_EQ(back.model, r.model);
  EXPECT_EQ(back.messages, r.messages);
  EXPECT_EQ(back.max_tokens, 42);
  EXPECT_EQ(to_wire_json(r)["messages"][1]["role"], "user");
}

TEST(TransientStatus, Classification) {
  for (int s : {0, 408, 409, 429, 500, 503}) EXPECT_TRUE(is_transient_status(s)) << s;
  for (int s : {400, 401, 403, 404, 422}) EXPECT_FALSE(is_transient_status(s)) << s;
}

TEST(OpenAIBackend, RetriesTransientFailuresThenSucceeds) {
  std::atomic<int> n{0};
  auto transport = std::make_unique<MockTransport>([&](const std::string& path, const json& body) {
    EXPECT_EQ(path, "/chat/completions");
    EXPECT_EQ(body["model"], "gpt-test");
    if (n++ < 2) return HttpResponse{n == 1 ? 429 : 503, "busy", std::nullopt};
    return HttpResponse{200, chat_completion_body("done"), std::nullopt};
  });
  auto* raw = transport.get();
  OpenAICompatibleBackend b(fast_settings(), std::move(transport));
  EXPECT_EQ(b.chat(simple_request()), "done");
  EXPECT_EQ(b.attempts(), 3u);
  EXPECT_EQ(raw->calls(), 3u);
  bool saw_auth = false;
  for (const auto& [k, v] : raw->last_headers()) saw_auth |= k == "Authorization" && v == "Bearer sk-test";
  EXPECT_TRUE(saw_auth);
}

TEST(OpenAIBackend, AttemptCapCountsTotalAttempts) {
  auto transport = std::make_unique<MockTransport>(
      [](const std::string&, const json&) { return HttpResponse{500, "down", std::nullopt}; });
  auto* raw = transport.get();
  auto s = fast_settings();
  s.retry.attempt_cap = 3;
  OpenAICompatibleBackend b(s, std::move(transport));
  try {
    b.chat(simple_request());
    FAIL() << "expected TransportError";
  } catch (const TransportError& e) {
    EXPECT_EQ(e.status(), 500);
  }
  EXPECT_EQ(raw->calls(), 3u);
}

TEST(OpenAIBackend, PermanentErrorIsNotRetried) {
  auto transport = std::make_unique<MockTransport>(
      [](const std::string&, const json&) { return HttpResponse{401, "no key", std::nullopt}; });
  auto* raw = transport.get();
  OpenAICompatibleBackend b(fast_settings(), std::move(transport));
  EXPECT_THROW(b.chat(simple_request()), TransportError);
  EXPECT_EQ(raw->calls(), 1u);
}

TEST(OpenAIBackend, EmptyContentIsProtocolError) {
  auto transport = std::make_unique<MockTransport>(
      [](const std::string&, const json&) { return HttpResponse{200, chat_completion_body("  "), std::nullopt}; });
  OpenAICompatibleBackend b(fast_settings(), std::move(transport));
  EXPECT_THROW(b.chat(simple_request()), ProtocolError);
}

TEST(OpenAIBackend, GarbageBodyIsProtocolError) {
  auto transport = std::make_unique<MockTransport>(
      [](const std::string&, const json&) { return HttpResponse{200, "<html>", std::nullopt}; });
  OpenAICompatibleBackend b(fast_settings(), std::move(transport));
  EXPECT_THROW(b.chat(simple_request()), ProtocolError);
}

TEST(OpenAIBackend, EmbeddingsHonourResponseIndex) {
  auto transport = std::make_unique<MockTransport>([](const std::string& path, const json& body) {
    EXPECT_EQ(path, "/embeddings");
    EXPECT_EQ(body["input"].size(), 2u);
    json resp = {{"data", json::array({{{"index", 1}, {"embedding", {0.0, 1.0}}},
                                        {{"index", 0}, {"embedding", {1.0, 0.0}}}})}};
    return HttpResponse{200, resp.dump(), std::nullopt};
  });
  OpenAICompatibleBackend b(fast_settings(), std::move(transport));
  const std::vector<std::string> texts = {"a", "b"};
  const auto out = b.embed(texts);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].values, (std::vector<double>{1.0, 0.0}));
  EXPECT_EQ(out[1].values, (std::vector<double>{0.0, 1.0}));
  EXPECT_EQ(out[0].model, "embed-test");
}

TEST(OpenAIBackend, ParallelCallsRespectGate) {
  std::atomic<int> active{0}, peak{0};
  auto transport = std::make_unique<MockTransport>([&](const std::string&, const json&) {
    const int now = ++active;
    int p = peak.load();
    while (now > p && !peak.compare_exchange_weak(p, now)) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
    --active;
    return HttpResponse{200, chat_completion_body("ok"), std::nullopt};
  });
  auto s = fast_settings();
  s.max_parallel = 2;
  OpenAICompatibleBackend b(s, std::move(transport));
  parallel_for(12, 8, [&](std::size_t i) { b.chat(simple_request("q" + std::to_string(i))); });
  EXPECT_LE(peak.load(), 2);
  EXPECT_EQ(b.attempts(), 12u);
}

TEST(MockBackend, ScriptThenResponderThenMissPolicy) {
  MockBackend strict;
  strict.add_reply(simple_request("scripted"), "from script");
  EXPECT_EQ(strict.chat(simple_request("scripted")), "from script");
  EXPECT_THROW(strict.chat(simple_request("unknown")), ScriptedMissError);

  MockBackend lenient({}, MissPolicy::fixed_default, "fallback");
  lenient.set_responder([](const ChatRequest& r) -> std::optional<std::string> {
    if (r.messages.back().content == "ping") return "pong";
    return std::nullopt;
  });
  EXPECT_EQ(lenient.chat(simple_request("ping")), "pong");
  EXPECT_EQ(lenient.chat(simple_request("other")), "fallback");
  EXPECT_EQ(lenient.chat_calls(), 2u);
  EXPECT_EQ(lenient.requests().size(), 2u);
}

TEST(HashEmbedding, DeterministicAndNormalised) {
  const auto a = hash_embedding("book a flight to Miami");
  EXPECT_EQ(a, hash_embedding("book a flight to Miami"));
  EXPECT_EQ(a.size(), 64u);
  double n = 0;
  for (double x : a) n += x * x;
  EXPECT_NEAR(n, 1.0, 1e-12);
  const auto e = hash_embedding("...");
  EXPECT_EQ(e[0], 1.0);
}

TEST(Recording, CapturedLogReplaysIdentically) {
  testing::TempDir dir;
  const auto log_path = dir.path() / "audit.jsonl";
  auto live = std::make_shared<MockBackend>();
  live->set_responder([](const ChatRequest& r) { return "echo: " + r.messages.back().content; });
  live->set_embedder([](const std::string& t) { return hash_embedding(t, 8); });
  {
    RecordingBackend rec(live, std::make_shared<AuditLog>(log_path));
    EXPECT_EQ(rec.chat(simple_request("one")), "echo: one");
    EXPECT_EQ(rec.chat(simple_request("two")), "echo: two");
    const std::vector<std::string> texts = {"alpha", "beta"};
    rec.embed(texts);
  }
  EXPECT_EQ(split_lines(read_file(log_path)).size(), 3u);

  MockBackend replay(load_mock_script(log_path));
  EXPECT_EQ(replay.chat(simple_request("two")), "echo: two");
  EXPECT_EQ(replay.chat(simple_request("one", 0.0)), "echo: one");
  const std::vector<std::string> texts = {"beta"};
  EXPECT_EQ(replay.embed(texts)[0].values, hash_embedding("beta", 8));
  EXPECT_THROW(replay.chat(simple_request("three")), ScriptedMissError);
}

TEST(Caching, ServesRepeatsAndPersists) {
  testing::TempDir dir;
  const auto store = dir.path() / "cache.jsonl";
  auto inner = std::make_shared<MockBackend>();
  inner->set_responder([](const ChatRequest& r) { return "r:" + r.messages.back().content; });
  {
    CachingBackend cache(inner, store);
    EXPECT_EQ(cache.chat(simple_request("x")), "r:x");
    EXPECT_EQ(cache.chat(simple_request("x")), "r:x");
    EXPECT_EQ(cache.hits(), 1u);
    EXPECT_EQ(cache.misses(), 1u);
  }
  EXPECT_EQ(inner->chat_calls(), 1u);
  CachingBackend reloaded(inner, store);
  EXPECT_EQ(reloaded.chat(simple_request("x")), "r:x");
  EXPECT_EQ(inner->chat_calls(), 1u);
  EXPECT_EQ(reloaded.hits(), 1u);
}

TEST(Caching, CorruptStoreReportsLine) {
  testing::TempDir dir;
  atomic_write_file(dir.path() / "bad.jsonl", "\n{oops\n");
  try {
    CachingBackend c(std::make_shared<MockBackend>(), dir.path() / "bad.jsonl");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}

}  // namespace
}  // namespace topicguard
