#include <chrono>
#include <condition_variable>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "dpe/agents.hpp"

namespace dpe::agents {

namespace {

// Caps concurrent requests per client (mutex/condvar semaphore; the C++20
// counting_semaphore needs a compile-time ceiling).
class InFlightLimiter {
 public:
  explicit InFlightLimiter(int limit) : available_(std::max(1, limit)) {}

  void acquire() {
    std::unique_lock<std::mutex> lock(mutex_);
    cv_.wait(lock, [&] { return available_ > 0; });
    --available_;
  }

  void release() {
    {
      std::lock_guard<std::mutex> lock(mutex_);
      ++available_;
    }
    cv_.notify_one();
  }

 private:
  std::mutex mutex_;
  std::condition_variable cv_;
  int available_;
};

struct InFlightGuard {
  explicit InFlightGuard(InFlightLimiter& l) : limiter(l) { limiter.acquire(); }
  ~InFlightGuard() { limiter.release(); }
  InFlightLimiter& limiter;
};

struct ParsedBase {
  std::string origin;       // scheme://host[:port]
  std::string path_prefix;  // possibly empty, no trailing slash
};

ParsedBase split_base_url(const std::string& base_url) {
  auto scheme_end = base_url.find("://");
  if (scheme_end == std::string::npos) {
    throw ConfigError("base url must include scheme: " + base_url);
  }
  auto path_start = base_url.find('/', scheme_end + 3);
  ParsedBase p;
  if (path_start == std::string::npos) {
    p.origin = base_url;
  } else {
    p.origin = base_url.substr(0, path_start);
    p.path_prefix = base_url.substr(path_start);
    while (!p.path_prefix.empty() && p.path_prefix.back() == '/') p.path_prefix.pop_back();
  }
  return p;
}

class HttpEndpoint {
 public:
  explicit HttpEndpoint(const HttpConfig& config)
      : config_(config), base_(split_base_url(config.base_url)), limiter_(config.max_in_flight) {}

  json post_json(const std::string& path, const json& body) {
    ClientError last_error("unreachable", false);
    int delay_ms = config_.retry.base_delay_ms;
    for (int attempt = 1; attempt <= config_.retry.max_attempts; ++attempt) {
      try {
        return post_once(path, body);
      } catch (const ClientError& e) {
        if (!e.retriable() || attempt == config_.retry.max_attempts) throw;
        last_error = e;
        std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms));
        delay_ms = static_cast<int>(delay_ms * config_.retry.factor);
      }
    }
    throw last_error;
  }

 private:
  json post_once(const std::string& path, const json& body) {
    InFlightGuard guard(limiter_);
    httplib::Client client(base_.origin);
    client.set_connection_timeout(std::chrono::duration<double>(config_.timeout_seconds));
    client.set_read_timeout(std::chrono::duration<double>(config_.timeout_seconds));
    client.set_write_timeout(std::chrono::duration<double>(config_.timeout_seconds));
    httplib::Headers headers;
    if (!config_.api_key.empty()) {
      headers.emplace("Authorization", "Bearer " + config_.api_key);
    }
    auto res = client.Post(base_.path_prefix + path, headers, body.dump(), "application/json");
    if (!res) {
      const bool timeout = res.error() == httplib::Error::ConnectionTimeout ||
                           res.error() == httplib::Error::Read || res.error() == httplib::Error::Write;
      throw ClientError("transport failure: " + httplib::to_string(res.error()),
                        /*retriable=*/true && (timeout || res.error() == httplib::Error::Connection));
    }
    if (res->status == 429 || res->status >= 500) {
      throw ClientError("http " + std::to_string(res->status) + " from " + path, /*retriable=*/true);
    }
    if (res->status < 200 || res->status >= 300) {
      throw ClientError("http " + std::to_string(res->status) + " from " + path + ": " + res->body,
                        /*retriable=*/false);
    }
    json parsed = json::parse(res->body, nullptr, false);
    if (parsed.is_discarded()) {
      throw ClientError("malformed response body from " + path, /*retriable=*/false);
    }
    return parsed;
  }

  HttpConfig config_;
  ParsedBase base_;
  InFlightLimiter limiter_;
};

class HttpChatClient final : public ChatClient {
 public:
  explicit HttpChatClient(const HttpConfig& config) : config_(config), endpoint_(config) {}

  ChatResponse chat(const ChatRequest& request) override {
    if (request.messages.empty()) throw InvariantError("chat request with empty message list");
    json messages = json::array();
    for (const auto& m : request.messages) {
      json content = json::array();
      content.push_back(json{{"type", "text"}, {"text", m.text}});
      for (const auto& loc : m.image_locators) {
        content.push_back(json{{"type", "image_url"}, {"image_url", json{{"url", loc}}}});
      }
      messages.push_back(json{{"role", m.role}, {"content", content}});
    }
    json body = json{{"model", request.model.empty() ? config_.model : request.model},
                     {"messages", messages},
                     {"temperature", request.temperature},
                     {"max_tokens", request.max_tokens}};
    json parsed = endpoint_.post_json("/chat/completions", body);
    ChatResponse out;
    try {
      const json& choice = parsed.at("choices").at(0);
      const json& content = choice.at("message").at("content");
      if (content.is_string()) {
        out.text = content.get<std::string>();
      } else if (content.is_array()) {
        for (const auto& part : content) {
          if (part.value("type", "") == "text") out.text += part.value("text", "");
        }
      }
      out.finish_reason = choice.value("finish_reason", "stop");
      if (parsed.contains("usage")) {
        out.usage.prompt_tokens = parsed["usage"].value("prompt_tokens", 0);
        out.usage.completion_tokens = parsed["usage"].value("completion_tokens", 0);
      }
    } catch (const json::exception& e) {
      throw ClientError(std::string("unexpected chat response shape: ") + e.what(),
                        /*retriable=*/false);
    }
    return out;
  }

 private:
  HttpConfig config_;
  HttpEndpoint endpoint_;
};

class HttpSearchClient final : public SearchClient {
 public:
  explicit HttpSearchClient(const HttpConfig& config) : endpoint_(config) {}

  SearchResult search(const SearchQuery& query) override {
    if (query.text.empty()) throw InvariantError("search query with empty text");
    std::string q = query.text;
    for (const auto& t : query.structural_tags) q += " " + t;
    json parsed = endpoint_.post_json("/images", json{{"q", q}, {"num", query.top_k}});
    SearchResult out;
    if (!parsed.contains("images") || !parsed["images"].is_array()) return out;
    for (const auto& item : parsed["images"]) {
      if (static_cast<int>(out.hits.size()) >= query.top_k) break;
      SearchHit hit;
      hit.url = item.value("link", "");
      hit.title = item.value("title", "");
      hit.width = item.value("imageWidth", 0);
      hit.height = item.value("imageHeight", 0);
      if (!hit.url.empty()) out.hits.push_back(std::move(hit));
    }
    return out;
  }

 private:
  HttpEndpoint endpoint_;
};

class HttpEditClient final : public EditClient {
 public:
  explicit HttpEditClient(const HttpConfig& config) : endpoint_(config) {}

  caps::ImageAsset edit(const std::string& instruction,
                        const std::vector<caps::ImageAsset>& inputs) override {
    if (instruction.empty() || inputs.empty()) {
      throw InvariantError("edit requires an instruction and at least one input");
    }
    json in = json::array();
    for (const auto& a : inputs) in.push_back(a.locator);
    json parsed =
        endpoint_.post_json("/images/edits", json{{"instruction", instruction}, {"inputs", in}});
    if (!parsed.contains("url") || !parsed["url"].is_string()) {
      throw ClientError("edit response missing url", /*retriable=*/false);
    }
    caps::ImageAsset out;
    out.source = caps::ImageSource::kRemoteUrl;
    out.locator = parsed["url"].get<std::string>();
    out.provenance =
        inputs.size() > 1 ? caps::Provenance::kComposed : caps::Provenance::kEdited;
    for (const auto& a : inputs) out.parent_locators.push_back(a.locator);
    return out;
  }

 private:
  HttpEndpoint endpoint_;
};

class HttpEmbedClient final : public EmbedClient {
 public:
  explicit HttpEmbedClient(const HttpConfig& config) : config_(config), endpoint_(config) {}

  std::vector<std::vector<double>> embed(const std::vector<std::string>& inputs,
                                         const std::string& modality) override {
    json body = json{{"model", config_.model}, {"input", inputs}, {"modality", modality}};
    json parsed = endpoint_.post_json("/embeddings", body);
    std::vector<std::vector<double>> out;
    try {
      for (const auto& item : parsed.at("data")) {
        out.push_back(item.at("embedding").get<std::vector<double>>());
      }
    } catch (const json::exception& e) {
      throw ClientError(std::string("unexpected embeddings response shape: ") + e.what(),
                        /*retriable=*/false);
    }
    return out;
  }

 private:
  HttpConfig config_;
  HttpEndpoint endpoint_;
};

}  // namespace

std::unique_ptr<ChatClient> make_http_chat_client(const HttpConfig& config) {
  return std::make_unique<HttpChatClient>(config);
}
std::unique_ptr<SearchClient> make_http_search_client(const HttpConfig& config) {
  return std::make_unique<HttpSearchClient>(config);
}
std::unique_ptr<EditClient> make_http_edit_client(const HttpConfig& config) {
  return std::make_unique<HttpEditClient>(config);
}
std::unique_ptr<EmbedClient> make_http_embed_client(const HttpConfig& config) {
  return std::make_unique<HttpEmbedClient>(config);
}

}  // namespace dpe::agents
