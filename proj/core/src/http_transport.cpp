#include <httplib.h>

#include <charconv>

#include "topicguard/errors.hpp"
#include "topicguard/llm_client.hpp"

namespace topicguard {

namespace {

class HttplibTransport final : public HttpTransport {
 public:
  HttplibTransport(const std::string& base_url, std::chrono::seconds timeout) {
    // Split "scheme://host[:port]/prefix" into the client origin and a path prefix.
    auto scheme_end = base_url.find("://");
    if (scheme_end == std::string::npos) throw ConfigError("base_url must include a scheme: " + base_url);
    auto path_start = base_url.find('/', scheme_end + 3);
    origin_ = base_url.substr(0, path_start);
    if (path_start != std::string::npos) prefix_ = base_url.substr(path_start);
    while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
    timeout_ = timeout;
  }

  HttpResponse post_json(const std::string& path, const std::string& body,
                         const std::vector<std::pair<std::string, std::string>>& headers) override {
    // httplib::Client is not safe for concurrent requests; one per call.
    httplib::Client client(origin_);
    client.set_connection_timeout(timeout_);
    client.set_read_timeout(timeout_);
    client.set_write_timeout(timeout_);
    httplib::Headers h;
    for (const auto& [k, v] : headers) h.emplace(k, v);

    HttpResponse out;
    auto res = client.Post(prefix_ + path, h, body, "application/json");
    if (!res) {
      out.status = 0;
      out.body = httplib::to_string(res.error());
      return out;
    }
    out.status = res->status;
    out.body = res->body;
    if (res->has_header("Retry-After")) {
      const std::string v = res->get_header_value("Retry-After");
      long long seconds = 0;
      auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), seconds);
      if (ec == std::errc{} && seconds >= 0) out.retry_after = std::chrono::seconds(seconds);
    }
    return out;
  }

 private:
  std::string origin_;
  std::string prefix_;
  std::chrono::seconds timeout_{60};
};

}  // namespace

std::unique_ptr<HttpTransport> make_http_transport(const std::string& base_url,
                                                   std::chrono::seconds timeout) {
  return std::make_unique<HttplibTransport>(base_url, timeout);
}

}  // namespace topicguard
