#include "topicguard/llm_client.hpp"

#include <algorithm>
#include <cmath>
#include <semaphore>
#include <thread>

#include "topicguard/errors.hpp"
#include "topicguard/util.hpp"

namespace topicguard {

using json = nlohmann::json;
using ordered = nlohmann::ordered_json;

std::string_view to_string(MessageRole r) {
  switch (r) {
    case MessageRole::system: return "system";
    case MessageRole::user: return "user";
    case MessageRole::assistant: return "assistant";
  }
  return "?";
}

namespace {

MessageRole parse_message_role(const std::string& s) {
  if (s == "system") return MessageRole::system;
  if (s == "user") return MessageRole::user;
  if (s == "assistant") return MessageRole::assistant;
  throw ParseError("unknown message role \"" + s + "\"");
}

ordered messages_json(const std::vector<ChatMessage>& messages) {
  ordered arr = ordered::array();
  for (const auto& m : messages) {
    arr.push_back(ordered{{"role", to_string(m.role)}, {"content", m.content}});
  }
  return arr;
}

double elapsed_ms(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
      .count();
}

}  // namespace

void validate(const ChatRequest& req) {
  if (req.messages.empty()) throw PreconditionError("chat request must contain at least one message");
  for (std::size_t i = 0; i < req.messages.size(); ++i) {
    if (req.messages[i].role == MessageRole::system && i != 0) {
      throw PreconditionError("system message must be first and appear at most once");
    }
  }
  if (!(req.temperature >= 0.0)) throw PreconditionError("temperature must be >= 0");
  if (req.max_tokens && *req.max_tokens <= 0) throw PreconditionError("max_tokens must be positive");
}

std::string fingerprint(const ChatRequest& req) {
  ordered j;
  j["model"] = req.model;
  j["messages"] = messages_json(req.messages);
  return sha256_hex(j.dump());
}

std::string embedding_fingerprint(std::string_view model, std::span<const std::string> texts) {
  ordered j;
  j["model"] = model;
  j["input"] = ordered(std::vector<std::string>(texts.begin(), texts.end()));
  return sha256_hex(j.dump());
}

ordered to_wire_json(const ChatRequest& req) {
  ordered j;
  j["model"] = req.model;
  j["messages"] = messages_json(req.messages);
  j["temperature"] = req.temperature;
  if (req.max_tokens) j["max_tokens"] = *req.max_tokens;
  return j;
}

ChatRequest chat_request_from_wire_json(const json& j) {
  ChatRequest req;
  req.model = j.value("model", "");
  for (const auto& m : j.at("messages")) {
    req.messages.push_back(
        ChatMessage{parse_message_role(m.at("role").get<std::string>()), m.at("content").get<std::string>()});
  }
  req.temperature = j.value("temperature", 0.7);
  if (j.contains("max_tokens")) req.max_tokens = j["max_tokens"].get<int>();
  return req;
}

// --- Backend -----------------------------------------------------------------

std::string Backend::chat(const ChatRequest& req) {
  validate(req);
  std::string reply = do_chat(req);
  if (trim(reply).empty()) throw ProtocolError("endpoint returned empty message content");
  return reply;
}

std::string Backend::complete(std::vector<ChatMessage> messages, std::optional<double> temperature) {
  ChatRequest req;
  req.model = chat_model();
  req.messages = std::move(messages);
  req.temperature = temperature.value_or(default_temperature());
  return chat(req);
}

std::vector<EmbeddingVector> Backend::embed(std::span<const std::string> texts) {
  if (texts.empty()) throw PreconditionError("embed requires at least one text");
  for (const auto& t : texts) {
    if (t.empty()) throw PreconditionError("embed texts must be non-empty");
  }
  auto out = do_embed(texts);
  if (out.size() != texts.size()) {
    throw ProtocolError("embedding endpoint returned " + std::to_string(out.size()) +
                        " vectors for " + std::to_string(texts.size()) + " inputs");
  }
  for (const auto& v : out) {
    if (v.values.empty()) throw ProtocolError("embedding endpoint returned an empty vector");
    if (v.dim() != out.front().dim()) throw ProtocolError("embedding dimension mismatch within batch");
  }
  return out;
}

std::vector<EmbeddingVector> Backend::do_embed(std::span<const std::string>) {
  throw ConfigError("backend \"" + chat_model() + "\" does not provide embeddings");
}

// --- OpenAI-compatible backend ------------------------------------------------

bool is_transient_status(int status) {
  return status == 0 || status == 408 || status == 409 || status == 429 || status >= 500;
}

struct OpenAICompatibleBackend::Gate {
  explicit Gate(std::size_t n) : sem(static_cast<std::ptrdiff_t>(std::clamp<std::size_t>(n, 1, 1024))) {}
  std::counting_semaphore<1024> sem;
  std::atomic<std::size_t> attempts{0};
};

OpenAICompatibleBackend::OpenAICompatibleBackend(EndpointSettings settings,
                                                 std::unique_ptr<HttpTransport> transport)
    : settings_(std::move(settings)),
      transport_(std::move(transport)),
      gate_(std::make_unique<Gate>(settings_.max_parallel)) {
  if (!transport_) throw ConfigError("OpenAICompatibleBackend requires a transport");
  if (settings_.retry.attempt_cap < 1) throw ConfigError("retry_cap must be >= 1");
}

OpenAICompatibleBackend::~OpenAICompatibleBackend() = default;

std::size_t OpenAICompatibleBackend::attempts() const { return gate_->attempts; }

json OpenAICompatibleBackend::post_with_retry(const std::string& path, const std::string& body) {
  std::vector<std::pair<std::string, std::string>> headers;
  if (!settings_.api_key.empty()) headers.emplace_back("Authorization", "Bearer " + settings_.api_key);

  gate_->sem.acquire();
  struct Release {
    Gate* g;
    ~Release() { g->sem.release(); }
  } release{gate_.get()};

  auto delay = settings_.retry.initial_delay;
  HttpResponse resp;
  for (int attempt = 1;; ++attempt) {
    ++gate_->attempts;
    resp = transport_->post_json(path, body, headers);
    if (resp.status >= 200 && resp.status < 300) break;
    if (!is_transient_status(resp.status) || attempt >= settings_.retry.attempt_cap) {
      throw TransportError("POST " + path + " failed with status " + std::to_string(resp.status) +
                               " after " + std::to_string(attempt) + " attempt(s): " +
                               resp.body.substr(0, 300),
                           resp.status);
    }
    auto wait = delay;
    if (resp.retry_after) wait = std::max(wait, *resp.retry_after);
    wait = std::min(wait, settings_.retry.max_delay);
    if (wait.count() > 0) std::this_thread::sleep_for(wait);
    delay = std::chrono::milliseconds(
        static_cast<long long>(std::llround(static_cast<double>(delay.count()) * settings_.retry.multiplier)));
  }
  try {
    return json::parse(resp.body);
  } catch (const json::parse_error& e) {
    throw ProtocolError("response from " + path + " is not JSON: " + e.what());
  }
}

std::string OpenAICompatibleBackend::do_chat(const ChatRequest& req) {
  ChatRequest wire = req;
  if (!wire.max_tokens) wire.max_tokens = settings_.max_tokens;
  json resp = post_with_retry("/chat/completions", to_wire_json(wire).dump());
  try {
    const json& choices = resp.at("choices");
    if (!choices.is_array() || choices.empty()) throw ProtocolError("response has no choices");
    const json& content = choices.at(0).at("message").at("content");
    if (content.is_null()) return {};
    return content.get<std::string>();
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("unexpected chat completion shape: ") + e.what());
  }
}

std::vector<EmbeddingVector> OpenAICompatibleBackend::do_embed(std::span<const std::string> texts) {
  if (settings_.model_embed.empty()) throw ConfigError("no embedding model configured");
  ordered body;
  body["model"] = settings_.model_embed;
  body["input"] = ordered(std::vector<std::string>(texts.begin(), texts.end()));
  json resp = post_with_retry("/embeddings", body.dump());
  try {
    std::vector<EmbeddingVector> out(texts.size());
    std::vector<bool> seen(texts.size(), false);
    const json& data = resp.at("data");
    std::size_t pos = 0;
    for (const auto& item : data) {
      std::size_t idx = item.contains("index") ? item["index"].get<std::size_t>() : pos;
      ++pos;
      if (idx >= out.size() || seen[idx]) throw ProtocolError("embedding response index out of range");
      seen[idx] = true;
      out[idx].values = item.at("embedding").get<std::vector<double>>();
      out[idx].model = settings_.model_embed;
    }
    if (pos != texts.size()) {
      throw ProtocolError("embedding endpoint returned " + std::to_string(pos) + " vectors for " +
                          std::to_string(texts.size()) + " inputs");
    }
    return out;
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("unexpected embedding response shape: ") + e.what());
  }
}

// --- Audit log -----------------------------------------------------------------

AuditLog::AuditLog(const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  out_.open(path, std::ios::app | std::ios::binary);
  if (!out_) throw IoError("cannot open audit log " + path.string());
}

void AuditLog::record_chat(const ChatRequest& req, const std::string& response, double latency_ms) {
  ordered j;
  j["fingerprint"] = fingerprint(req);
  j["kind"] = "chat";
  j["request"] = to_wire_json(req);
  j["response"] = response;
  j["latency_ms"] = std::round(latency_ms * 1000.0) / 1000.0;
  std::string line = j.dump() + "\n";
  std::lock_guard lock(mu_);
  out_ << line;
  out_.flush();
}

void AuditLog::record_embed(std::string_view model, std::span<const std::string> texts,
                            std::span<const EmbeddingVector> vectors, double latency_ms) {
  ordered j;
  j["fingerprint"] = embedding_fingerprint(model, texts);
  j["kind"] = "embed";
  j["request"] = ordered{{"model", model},
                         {"input", std::vector<std::string>(texts.begin(), texts.end())}};
  ordered resp = ordered::array();
  for (const auto& v : vectors) resp.push_back(v.values);
  j["response"] = std::move(resp);
  j["latency_ms"] = std::round(latency_ms * 1000.0) / 1000.0;
  std::string line = j.dump() + "\n";
  std::lock_guard lock(mu_);
  out_ << line;
  out_.flush();
}

// --- Recording decorator ----------------------------------------------------------

RecordingBackend::RecordingBackend(BackendPtr inner, std::shared_ptr<AuditLog> log)
    : inner_(std::move(inner)), log_(std::move(log)) {
  if (!inner_ || !log_) throw ConfigError("RecordingBackend requires a backend and a log");
}

std::string RecordingBackend::do_chat(const ChatRequest& req) {
  auto start = std::chrono::steady_clock::now();
  std::string reply = inner_->chat(req);
  log_->record_chat(req, reply, elapsed_ms(start));
  return reply;
}

std::vector<EmbeddingVector> RecordingBackend::do_embed(std::span<const std::string> texts) {
  auto start = std::chrono::steady_clock::now();
  auto out = inner_->embed(texts);
  log_->record_embed(inner_->embed_model(), texts, out, elapsed_ms(start));
  return out;
}

// --- Caching decorator ---------------------------------------------------------------

CachingBackend::CachingBackend(BackendPtr inner, std::optional<std::filesystem::path> store)
    : inner_(std::move(inner)) {
  if (!inner_) throw ConfigError("CachingBackend requires a backend");
  if (store) {
    if (std::filesystem::exists(*store)) {
      std::size_t line_no = 0;
      for (const auto& line : split_lines(read_file(*store))) {
        ++line_no;
        if (trim(line).empty()) continue;
        try {
          json j = json::parse(line);
          if (j.value("kind", "chat") == "chat") {
            chat_[j.at("fingerprint").get<std::string>()] = j.at("response").get<std::string>();
          } else {
            const auto& inputs = j.at("request").at("input");
            const auto& vecs = j.at("response");
            for (std::size_t i = 0; i < inputs.size() && i < vecs.size(); ++i) {
              embeddings_[inputs[i].get<std::string>()] = vecs[i].get<std::vector<double>>();
            }
          }
        } catch (const json::exception& e) {
          throw ParseError(std::string("replay cache: ") + e.what(), line_no);
        }
      }
    }
    store_ = std::make_shared<AuditLog>(*store);
  }
}

std::size_t CachingBackend::hits() const {
  std::lock_guard lock(mu_);
  return hits_;
}

std::size_t CachingBackend::misses() const {
  std::lock_guard lock(mu_);
  return misses_;
}

std::string CachingBackend::do_chat(const ChatRequest& req) {
  const std::string fp = fingerprint(req);
  {
    std::lock_guard lock(mu_);
    if (auto it = chat_.find(fp); it != chat_.end()) {
      ++hits_;
      return it->second;
    }
    ++misses_;
  }
  auto start = std::chrono::steady_clock::now();
  std::string reply = inner_->chat(req);
  if (store_) store_->record_chat(req, reply, elapsed_ms(start));
  std::lock_guard lock(mu_);
  chat_.emplace(fp, reply);
  return reply;
}

std::vector<EmbeddingVector> CachingBackend::do_embed(std::span<const std::string> texts) {
  std::vector<EmbeddingVector> out(texts.size());
  std::vector<std::string> todo;
  {
    std::lock_guard lock(mu_);
    for (std::size_t i = 0; i < texts.size(); ++i) {
      if (auto it = embeddings_.find(texts[i]); it != embeddings_.end()) {
        out[i] = EmbeddingVector{it->second, inner_->embed_model()};
      } else if (std::find(todo.begin(), todo.end(), texts[i]) == todo.end()) {
        todo.push_back(texts[i]);
      }
    }
    if (todo.empty()) {
      ++hits_;
      return out;
    }
    ++misses_;
  }
  auto start = std::chrono::steady_clock::now();
  auto fresh = inner_->embed(todo);
  if (store_) store_->record_embed(inner_->embed_model(), todo, fresh, elapsed_ms(start));
  std::lock_guard lock(mu_);
  for (std::size_t k = 0; k < todo.size(); ++k) embeddings_[todo[k]] = fresh[k].values;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    if (out[i].values.empty()) out[i] = EmbeddingVector{embeddings_.at(texts[i]), inner_->embed_model()};
  }
  return out;
}

}  // namespace topicguard
