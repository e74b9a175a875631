#include "topicguard/mock_backend.hpp"

#include <cmath>
#include <cstdint>

#include "topicguard/errors.hpp"
#include "topicguard/textmetrics.hpp"
#include "topicguard/util.hpp"

namespace topicguard {

using json = nlohmann::json;

MockScript load_mock_script(const std::filesystem::path& path) {
  MockScript script;
  std::size_t line_no = 0;
  for (const auto& line : split_lines(read_file(path))) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      json j = json::parse(line);
      if (j.value("kind", "chat") == "chat") {
        script.chat[j.at("fingerprint").get<std::string>()] = j.at("response").get<std::string>();
      } else {
        const auto& inputs = j.at("request").at("input");
        const auto& vecs = j.at("response");
        if (inputs.size() != vecs.size()) throw ParseError("embed record input/response size mismatch");
        for (std::size_t i = 0; i < inputs.size(); ++i) {
          script.embeddings[inputs[i].get<std::string>()] = vecs[i].get<std::vector<double>>();
        }
      }
    } catch (const json::exception& e) {
      throw ParseError(std::string("mock script: ") + e.what(), line_no);
    }
  }
  return script;
}

MockBackend::MockBackend(MockScript script, MissPolicy miss, std::string default_reply)
    : script_(std::move(script)), miss_(miss), default_reply_(std::move(default_reply)) {}

void MockBackend::set_responder(Responder r) {
  std::lock_guard lock(mu_);
  responder_ = std::move(r);
}

void MockBackend::set_embedder(Embedder e) {
  std::lock_guard lock(mu_);
  embedder_ = std::move(e);
}

void MockBackend::set_default_embedding(std::vector<double> v) {
  std::lock_guard lock(mu_);
  default_embedding_ = std::move(v);
}

void MockBackend::add_reply(const ChatRequest& req, std::string reply) {
  std::lock_guard lock(mu_);
  script_.chat[fingerprint(req)] = std::move(reply);
}

void MockBackend::add_embedding(std::string text, std::vector<double> values) {
  std::lock_guard lock(mu_);
  script_.embeddings[std::move(text)] = std::move(values);
}

std::vector<ChatRequest> MockBackend::requests() const {
  std::lock_guard lock(mu_);
  return log_;
}

std::string MockBackend::do_chat(const ChatRequest& req) {
  ++chat_calls_;
  const std::string fp = fingerprint(req);
  Responder responder;
  {
    std::lock_guard lock(mu_);
    log_.push_back(req);
    if (auto it = script_.chat.find(fp); it != script_.chat.end()) return it->second;
    responder = responder_;
  }
  if (responder) {
    if (auto reply = responder(req)) return *reply;
  }
  if (miss_ == MissPolicy::fixed_default) return default_reply_;
  throw ScriptedMissError(fp);
}

std::vector<EmbeddingVector> MockBackend::do_embed(std::span<const std::string> texts) {
  ++embed_calls_;
  std::vector<EmbeddingVector> out;
  out.reserve(texts.size());
  for (const auto& text : texts) {
    std::optional<std::vector<double>> v;
    Embedder embedder;
    {
      std::lock_guard lock(mu_);
      if (auto it = script_.embeddings.find(text); it != script_.embeddings.end()) v = it->second;
      embedder = embedder_;
    }
    if (!v && embedder) v = embedder(text);
    if (!v && miss_ == MissPolicy::fixed_default && !default_embedding_.empty()) v = default_embedding_;
    if (!v) throw ScriptedMissError(embedding_fingerprint(embed_model(), std::span(&text, 1)));
    out.push_back(EmbeddingVector{std::move(*v), embed_model()});
  }
  return out;
}

HttpResponse MockTransport::post_json(const std::string& path, const std::string& body,
                                      const std::vector<std::pair<std::string, std::string>>& headers) {
  ++calls_;
  {
    std::lock_guard lock(mu_);
    last_headers_ = headers;
  }
  return handler_(path, json::parse(body));
}

std::vector<std::pair<std::string, std::string>> MockTransport::last_headers() const {
  std::lock_guard lock(mu_);
  return last_headers_;
}

std::string chat_completion_body(const std::string& content) {
  json j;
  j["choices"] = json::array({json{{"index", 0},
                                   {"message", {{"role", "assistant"}, {"content", content}}},
                                   {"finish_reason", "stop"}}});
  return j.dump();
}

std::vector<double> hash_embedding(std::string_view text, std::size_t dim) {
  if (dim == 0) throw PreconditionError("embedding dimension must be positive");
  std::vector<double> v(dim, 0.0);
  for (const auto& tok : tokenize(text)) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : tok) {
      h ^= c;
      h *= 1099511628211ull;
    }
    v[h % dim] += (h >> 63) ? -1.0 : 1.0;
  }
  double norm = 0.0;
  for (double x : v) norm += x * x;
  if (norm == 0.0) {
    v[0] = 1.0;
    return v;
  }
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

}  // namespace topicguard
