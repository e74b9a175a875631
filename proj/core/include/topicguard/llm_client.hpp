#pragma once

// Chat-completion and embedding access over the OpenAI-compatible wire
// protocol, plus composable decorators (audit log, replay cache).

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace topicguard {

enum class MessageRole { system, user, assistant };
std::string_view to_string(MessageRole r);

struct ChatMessage {
  MessageRole role = MessageRole::user;
  std::string content;

  bool operator==(const ChatMessage&) const = default;
};

struct ChatRequest {
  std::string model;
  std::vector<ChatMessage> messages;
  double temperature = 0.7;
  std::optional<int> max_tokens;
};

// Throws PreconditionError: empty messages, more than one system message,
// a system message that is not first, negative temperature, max_tokens <= 0.
void validate(const ChatRequest& req);

// sha256 over the canonical {model, messages} serialization.
std::string fingerprint(const ChatRequest& req);
std::string embedding_fingerprint(std::string_view model, std::span<const std::string> texts);

nlohmann::ordered_json to_wire_json(const ChatRequest& req);
ChatRequest chat_request_from_wire_json(const nlohmann::json& j);

struct EmbeddingVector {
  std::vector<double> values;
  std::string model;

  std::size_t dim() const { return values.size(); }
  bool operator==(const EmbeddingVector&) const = default;
};

// Uniform handle for chat and embedding endpoints. Public calls check
// pre/postconditions and delegate to do_chat/do_embed.
class Backend {
 public:
  virtual ~Backend() = default;

  // Throws PreconditionError on invalid requests and ProtocolError when the
  // endpoint returns empty content.
  std::string chat(const ChatRequest& req);

  // Builds a request with this backend's model and default temperature.
  std::string complete(std::vector<ChatMessage> messages,
                       std::optional<double> temperature = std::nullopt);

  // Output has one vector per input, in order, all of equal dimension.
  std::vector<EmbeddingVector> embed(std::span<const std::string> texts);

  virtual std::string chat_model() const = 0;
  virtual std::string embed_model() const { return chat_model(); }
  virtual double default_temperature() const { return 0.7; }

 protected:
  virtual std::string do_chat(const ChatRequest& req) = 0;
  virtual std::vector<EmbeddingVector> do_embed(std::span<const std::string> texts);
};

using BackendPtr = std::shared_ptr<Backend>;

struct HttpResponse {
  int status = 0;  // 0: connection-level failure
  std::string body;
  std::optional<std::chrono::milliseconds> retry_after;
};

class HttpTransport {
 public:
  virtual ~HttpTransport() = default;
  virtual HttpResponse post_json(const std::string& path, const std::string& body,
                                 const std::vector<std::pair<std::string, std::string>>& headers) = 0;
};

// cpp-httplib client rooted at base_url (http:// or https://).
std::unique_ptr<HttpTransport> make_http_transport(const std::string& base_url,
                                                   std::chrono::seconds timeout);

struct RetryPolicy {
  int attempt_cap = 4;  // total attempts, including the first
  std::chrono::milliseconds initial_delay{500};
  double multiplier = 2.0;
  std::chrono::milliseconds max_delay{20'000};
};

// Status codes worth retrying: connection failures, 408, 409, 429 and 5xx.
bool is_transient_status(int status);

struct EndpointSettings {
  std::string base_url;
  std::string api_key;
  std::string model_chat;
  std::string model_embed;
  std::size_t max_parallel = 4;
  RetryPolicy retry;
  double temperature = 0.7;
  std::optional<int> max_tokens;
};

class OpenAICompatibleBackend final : public Backend {
 public:
  OpenAICompatibleBackend(EndpointSettings settings, std::unique_ptr<HttpTransport> transport);
  ~OpenAICompatibleBackend() override;

  std::string chat_model() const override { return settings_.model_chat; }
  std::string embed_model() const override { return settings_.model_embed; }
  double default_temperature() const override { return settings_.temperature; }

  // Number of HTTP requests issued, retries included.
  std::size_t attempts() const;

 protected:
  std::string do_chat(const ChatRequest& req) override;
  std::vector<EmbeddingVector> do_embed(std::span<const std::string> texts) override;

 private:
  nlohmann::json post_with_retry(const std::string& path, const std::string& body);

  struct Gate;
  EndpointSettings settings_;
  std::unique_ptr<HttpTransport> transport_;
  std::unique_ptr<Gate> gate_;
};

// JSONL log of {fingerprint, kind, request, response, latency_ms}. A
// captured log can be reloaded with load_mock_script().
class AuditLog {
 public:
  explicit AuditLog(const std::filesystem::path& path);
  void record_chat(const ChatRequest& req, const std::string& response, double latency_ms);
  void record_embed(std::string_view model, std::span<const std::string> texts,
                    std::span<const EmbeddingVector> vectors, double latency_ms);

 private:
  std::mutex mu_;
  std::ofstream out_;
};

// Forwards to `inner` and records each exchange in `log`.
class RecordingBackend final : public Backend {
 public:
  RecordingBackend(BackendPtr inner, std::shared_ptr<AuditLog> log);

  std::string chat_model() const override { return inner_->chat_model(); }
  std::string embed_model() const override { return inner_->embed_model(); }
  double default_temperature() const override { return inner_->default_temperature(); }

 protected:
  std::string do_chat(const ChatRequest& req) override;
  std::vector<EmbeddingVector> do_embed(std::span<const std::string> texts) override;

 private:
  BackendPtr inner_;
  std::shared_ptr<AuditLog> log_;
};

// Serves repeated requests from memory (and optionally from a persisted
// JSONL file in audit-log format). Misses go to `inner`.
class CachingBackend final : public Backend {
 public:
  explicit CachingBackend(BackendPtr inner, std::optional<std::filesystem::path> store = {});

  std::string chat_model() const override { return inner_->chat_model(); }
  std::string embed_model() const override { return inner_->embed_model(); }
  double default_temperature() const override { return inner_->default_temperature(); }

  std::size_t hits() const;
  std::size_t misses() const;

 protected:
  std::string do_chat(const ChatRequest& req) override;
  std::vector<EmbeddingVector> do_embed(std::span<const std::string> texts) override;

 private:
  BackendPtr inner_;
  std::shared_ptr<AuditLog> store_;
  mutable std::mutex mu_;
  std::map<std::string, std::string> chat_;
  std::map<std::string, std::vector<double>> embeddings_;  // keyed by text
  std::size_t hits_ = 0;
  std::size_t misses_ = 0;
};

}  // namespace topicguard
