#pragma once

// Deterministic scripted backend and transport for offline runs and tests.

#include <atomic>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "topicguard/llm_client.hpp"

namespace topicguard {

struct MockScript {
  std::map<std::string, std::string> chat;                 // request fingerprint -> reply
  std::map<std::string, std::vector<double>> embeddings;   // text -> vector
};

// Reads an audit log (or cache store) back into a script.
MockScript load_mock_script(const std::filesystem::path& path);

enum class MissPolicy { error, fixed_default };

class MockBackend final : public Backend {
 public:
  using Responder = std::function<std::optional<std::string>(const ChatRequest&)>;
  using Embedder = std::function<std::optional<std::vector<double>>(const std::string&)>;

  explicit MockBackend(MockScript script = {}, MissPolicy miss = MissPolicy::error,
                       std::string default_reply = {});

  // Replies for requests not found in the script. Returning nullopt falls
  // through to the miss policy.
  void set_responder(Responder r);
  void set_embedder(Embedder e);
  void set_default_embedding(std::vector<double> v);
  void set_model(std::string model) { model_ = std::move(model); }
  void set_temperature(double t) { temperature_ = t; }

  void add_reply(const ChatRequest& req, std::string reply);
  void add_embedding(std::string text, std::vector<double> values);

  std::string chat_model() const override { return model_; }
  double default_temperature() const override { return temperature_; }

  std::size_t chat_calls() const { return chat_calls_; }
  std::size_t embed_calls() const { return embed_calls_; }
  std::vector<ChatRequest> requests() const;

 protected:
  std::string do_chat(const ChatRequest& req) override;
  std::vector<EmbeddingVector> do_embed(std::span<const std::string> texts) override;

 private:
  mutable std::mutex mu_;
  MockScript script_;
  MissPolicy miss_;
  std::string default_reply_;
  std::vector<double> default_embedding_;
  Responder responder_;
  Embedder embedder_;
  std::string model_ = "mock";
  double temperature_ = 0.7;
  std::vector<ChatRequest> log_;
  std::atomic<std::size_t> chat_calls_{0};
  std::atomic<std::size_t> embed_calls_{0};
};

// In-process HttpTransport driven by a handler; counts calls.
class MockTransport final : public HttpTransport {
 public:
  using Handler = std::function<HttpResponse(const std::string& path, const nlohmann::json& body)>;

  explicit MockTransport(Handler handler) : handler_(std::move(handler)) {}

  HttpResponse post_json(const std::string& path, const std::string& body,
                         const std::vector<std::pair<std::string, std::string>>& headers) override;

  std::size_t calls() const { return calls_; }
  std::vector<std::pair<std::string, std::string>> last_headers() const;

 private:
  mutable std::mutex mu_;
  Handler handler_;
  std::atomic<std::size_t> calls_{0};
  std::vector<std::pair<std::string, std::string>> last_headers_;
};

// Deterministic bag-of-words feature hashing (FNV-1a over tokens, signed
// buckets, L2-normalised). Texts without tokens map to the first basis
// vector so the norm is never zero.
std::vector<double> hash_embedding(std::string_view text, std::size_t dim = 64);

// {"choices":[{"message":{"role":"assistant","content":...}}]}
std::string chat_completion_body(const std::string& content);

}  // namespace topicguard
