#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <thread>

#include <httplib.h>

#include "dpe/agents.hpp"

using namespace dpe;
using namespace dpe::agents;

namespace {

ChatRequest request_with_context(const json& ctx) {
  ChatRequest req;
  req.request_id = next_request_id();
  req.messages.push_back(ChatMessage{"user", append_context_block("do the thing", ctx), {}});
  return req;
}

}  // namespace

TEST_CASE("context block round-trip and tolerant response parsing") {
  const json ctx{{"kind", "x"}, {"value", 7}};
  const auto req = request_with_context(ctx);
  CHECK(extract_context_json(req) == ctx);

  CHECK(parse_json_response(R"({"a": 1})")["a"] == 1);
  CHECK(parse_json_response("prefix {\"a\": 2} suffix")["a"] == 2);
  CHECK(parse_json_response("no json at all").is_null());
}

TEST_CASE("request ids are unique per process") {
  std::set<std::uint64_t> seen;
  std::mutex mu;
  std::vector<std::thread> threads;
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([&] {
      for (int i = 0; i < 200; ++i) {
        const auto id = next_request_id();
        std::lock_guard<std::mutex> lock(mu);
        CHECK(seen.insert(id).second);
      }
    });
  }
  for (auto& th : threads) th.join();
}

TEST_CASE("synthetic world learning response") {
  SyntheticWorld w = SyntheticWorld::from_json(json{
      {"schema_version", "1.0"}, {"kind", "synthetic-world"}, {"seed", 0}, {"delta", 0.1},
      {"epoch", 0},
      {"skills", json{{"geometry-images", 0.5}, {"medical-images", 1.0}, {"statistical-charts", 0.0},
                      {"text-intensive-images", 0.5}, {"flow-diagrams", 0.5},
                      {"mathematical-formulas", 0.5}, {"spatial-maps", 0.5},
                      {"natural-scenes", 0.5}, {"daily-objects", 0.5}, {"artworks", 0.5},
                      {"architectural-images", 0.5}, {"others", 0.5}}}});

  SUBCASE("one step") {
    w.train_one(caps::Category::kGeometryImages);
    CHECK(w.skill(caps::Category::kGeometryImages) == doctest::Approx(0.55));
  }
  SUBCASE("ceiling is absorbing") {
    for (int i = 0; i < 5; ++i) w.train_one(caps::Category::kMedicalImages);
    CHECK(w.skill(caps::Category::kMedicalImages) == 1.0);
  }
  SUBCASE("closed-form recurrence from zero") {
    for (int i = 0; i < 10; ++i) w.train_one(caps::Category::kStatisticalCharts);
    CHECK(w.skill(caps::Category::kStatisticalCharts) ==
          doctest::Approx(1.0 - std::pow(0.9, 10)).epsilon(1e-12));
  }
  SUBCASE("apply_training follows dataset order and bumps the epoch") {
    caps::DatasetRecord rec;
    rec.id = "r";
    rec.image.locator = "x";
    rec.question = "q";
    rec.answer = "a";
    rec.category = caps::Category::kGeometryImages;
    const auto before = w.epoch();
    w.apply_training({rec, rec});
    CHECK(w.epoch() == before + 1);
    CHECK(w.skill(caps::Category::kGeometryImages) == doctest::Approx(1.0 - 0.5 * 0.81));
  }
  SUBCASE("seeded construction is deterministic and within range") {
    const auto a = SyntheticWorld::seeded(11, 0.02, 0.2, 0.9);
    const auto b = SyntheticWorld::seeded(11, 0.02, 0.2, 0.9);
    for (const auto& info : caps::all_categories()) {
      CHECK(a.skill(info.value) == b.skill(info.value));
      CHECK(a.skill(info.value) >= 0.2);
      CHECK(a.skill(info.value) <= 0.9);
    }
  }
}

TEST_CASE("mock chat is deterministic and digest-keyed") {
  MockHub hub(123);
  auto judge = hub.chat_client(MockRole::kJudge, 1);
  const auto req = request_with_context(json{{"kind", "quality-judge"}, {"id", "s-1"},
                                             {"question", "q"}, {"answer", "a"}});
  const auto a = judge->chat(req);
  const auto b = judge->chat(req);
  CHECK(a.text == b.text);

  // same seed, fresh hub: still identical
  MockHub hub2(123);
  CHECK(hub2.chat_client(MockRole::kJudge, 1)->chat(req).text == a.text);

  // concurrency does not change responses
  std::vector<std::string> texts(8);
  std::vector<std::thread> threads;
  for (int i = 0; i < 8; ++i) {
    threads.emplace_back([&, i] { texts[i] = judge->chat(req).text; });
  }
  for (auto& t : threads) t.join();
  for (const auto& t : texts) CHECK(t == a.text);
}

TEST_CASE("mock search") {
  MockHub hub(5);
  auto search = hub.search_client();

  SUBCASE("top_k bounds the ranked result") {
    SearchQuery q;
    q.text = "bar chart with legend";
    q.structural_tags = {"bar-chart", "legend"};
    q.top_k = 3;
    const auto result = search->search(q);
    CHECK(result.hits.size() <= 3);
    // exactly one candidate carries every required tag
    int full_matches = 0;
    for (const auto& hit : result.hits) {
      bool all = true;
      for (const auto& tag : q.structural_tags) {
        all = all && hit.title.find(tag) != std::string::npos;
      }
      full_matches += all ? 1 : 0;
    }
    CHECK(full_matches == 1);
  }
  SUBCASE("empty results are a value, not an error") {
    SearchQuery q;
    q.text = "unfindable thing";
    q.top_k = 3;
    CHECK(search->search(q).hits.empty());
  }
}

TEST_CASE("mock edit records provenance and parents in order") {
  MockHub hub(5);
  auto editor = hub.edit_client();
  caps::ImageAsset a;
  a.locator = "mock://img/aaa";
  caps::ImageAsset b;
  b.locator = "mock://img/bbb";

  const auto edited = editor->edit("crop to the legend", {a});
  CHECK(edited.provenance == caps::Provenance::kEdited);
  REQUIRE(edited.parent_locators.size() == 1);
  CHECK(edited.parent_locators[0] == "mock://img/aaa");

  const auto composed = editor->edit("stitch side by side", {a, b});
  CHECK(composed.provenance == caps::Provenance::kComposed);
  REQUIRE(composed.parent_locators.size() == 2);
  CHECK(composed.parent_locators[0] == "mock://img/aaa");
  CHECK(composed.parent_locators[1] == "mock://img/bbb");

  CHECK_THROWS_AS(editor->edit("", {a}), ClientError);
}

TEST_CASE("digest embeddings are deterministic unit vectors") {
  const auto v1 = digest_embedding("text:hello", 64);
  const auto v2 = digest_embedding("text:hello", 64);
  const auto v3 = digest_embedding("text:world", 64);
  CHECK(v1 == v2);
  CHECK(v1 != v3);
  double norm = 0.0;
  for (double x : v1) norm += x * x;
  CHECK(norm == doctest::Approx(1.0).epsilon(1e-12));
}

// ---------------------------------------------------------------------------
// HTTP backends against a loopback server
// ---------------------------------------------------------------------------

namespace {

struct TestServer {
  httplib::Server server;
  std::thread thread;
  int port = 0;

  explicit TestServer() = default;

  void start() {
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }

  ~TestServer() {
    server.stop();
    if (thread.joinable()) thread.join();
  }

  std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port) + "/v1"; }
};

HttpConfig test_http_config(const std::string& base_url) {
  HttpConfig cfg;
  cfg.base_url = base_url;
  cfg.api_key = "test-key";
  cfg.model = "test-model";
  cfg.timeout_seconds = 5.0;
  cfg.retry.base_delay_ms = 1;
  return cfg;
}

}  // namespace

TEST_CASE("http chat client speaks the chat-completions wire format") {
  TestServer ts;
  json seen_body;
  std::string seen_auth;
  ts.server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    seen_body = json::parse(req.body);
    seen_auth = req.get_header_value("Authorization");
    res.set_content(
        json{{"choices",
              json::array({json{{"message", json{{"content", "Answer: B"}}},
                           {"finish_reason", "stop"}}})},
             {"usage", json{{"prompt_tokens", 12}, {"completion_tokens", 3}}}}
            .dump(),
        "application/json");
  });
  ts.start();

  auto client = make_http_chat_client(test_http_config(ts.base_url()));
  ChatRequest req;
  req.temperature = 0.25;
  req.max_tokens = 128;
  req.messages.push_back(ChatMessage{"user", "What is marked?", {"https://img.test/1.png"}});
  const auto res = client->chat(req);

  CHECK(res.text == "Answer: B");
  CHECK(res.finish_reason == "stop");
  CHECK(res.usage.completion_tokens == 3);
  CHECK(seen_auth == "Bearer test-key");
  CHECK(seen_body["model"] == "test-model");
  CHECK(seen_body["temperature"] == doctest::Approx(0.25));
  CHECK(seen_body["max_tokens"] == 128);
  REQUIRE(seen_body["messages"].size() == 1);
  CHECK(seen_body["messages"][0]["role"] == "user");
  CHECK(seen_body["messages"][0]["content"][0]["type"] == "text");
  CHECK(seen_body["messages"][0]["content"][1]["type"] == "image_url");
  CHECK(seen_body["messages"][0]["content"][1]["image_url"]["url"] == "https://img.test/1.png");
}

TEST_CASE("http chat retries 5xx with backoff, fails fast on 4xx") {
  TestServer ts;
  std::atomic<int> calls{0};
  ts.server.Post("/v1/chat/completions", [&](const httplib::Request&, httplib::Response& res) {
    if (calls.fetch_add(1) < 2) {
      res.status = 503;
      res.set_content("overloaded", "text/plain");
      return;
    }
    res.set_content(
        json{{"choices", json::array({json{{"message", json{{"content", "ok"}}}}})}}.dump(),
        "application/json");
  });
  ts.start();

  auto client = make_http_chat_client(test_http_config(ts.base_url()));
  ChatRequest req;
  req.messages.push_back(ChatMessage{"user", "hi", {}});
  CHECK(client->chat(req).text == "ok");
  CHECK(calls.load() == 3);

  // 400 is not retriable
  TestServer bad;
  std::atomic<int> bad_calls{0};
  bad.server.Post("/v1/chat/completions", [&](const httplib::Request&, httplib::Response& res) {
    bad_calls.fetch_add(1);
    res.status = 400;
    res.set_content("nope", "text/plain");
  });
  bad.start();
  auto bad_client = make_http_chat_client(test_http_config(bad.base_url()));
  try {
    bad_client->chat(req);
    FAIL("expected ClientError");
  } catch (const ClientError& e) {
    CHECK_FALSE(e.retriable());
  }
  CHECK(bad_calls.load() == 1);
}

TEST_CASE("http chat surfaces transport failure as retriable") {
  auto cfg = test_http_config("http://127.0.0.1:1/v1");  // nothing listens here
  cfg.retry.max_attempts = 2;
  auto client = make_http_chat_client(cfg);
  ChatRequest req;
  req.messages.push_back(ChatMessage{"user", "hi", {}});
  try {
    client->chat(req);
    FAIL("expected ClientError");
  } catch (const ClientError& e) {
    CHECK(e.retriable());
  }
}

TEST_CASE("http search client wire format") {
  TestServer ts;
  json seen_body;
  ts.server.Post("/v1/images", [&](const httplib::Request& req, httplib::Response& res) {
    seen_body = json::parse(req.body);
    res.set_content(json{{"images",
                          json::array({json{{"link", "https://img.test/a.png"},
                                            {"title", "bar chart"},
                                            {"imageWidth", 800},
                                            {"imageHeight", 600}},
                                       json{{"link", "https://img.test/b.png"},
                                            {"title", "another"},
                                            {"imageWidth", 640},
                                            {"imageHeight", 480}},
                                       json{{"link", "https://img.test/c.png"}},
                                       json{{"link", "https://img.test/d.png"}}})}}
                        .dump(),
                    "application/json");
  });
  ts.start();

  auto client = make_http_search_client(test_http_config(ts.base_url()));
  SearchQuery q;
  q.text = "bar chart";
  q.structural_tags = {"legend"};
  q.top_k = 3;
  const auto result = client->search(q);
  CHECK(seen_body["q"] == "bar chart legend");
  CHECK(seen_body["num"] == 3);
  REQUIRE(result.hits.size() == 3);  // rank order preserved, truncated to top_k
  CHECK(result.hits[0].url == "https://img.test/a.png");
  CHECK(result.hits[0].width == 800);
}

TEST_CASE("http edit and embed clients") {
  TestServer ts;
  ts.server.Post("/v1/images/edits", [&](const httplib::Request& req, httplib::Response& res) {
    const json body = json::parse(req.body);
    CHECK(body.contains("instruction"));
    CHECK(body["inputs"].size() == 2);
    res.set_content(json{{"url", "https://img.test/out.png"}}.dump(), "application/json");
  });
  ts.server.Post("/v1/embeddings", [&](const httplib::Request& req, httplib::Response& res) {
    const json body = json::parse(req.body);
    json data = json::array();
    for (std::size_t i = 0; i < body["input"].size(); ++i) {
      data.push_back(json{{"embedding", json::array({0.6, 0.8})}});
    }
    res.set_content(json{{"data", data}}.dump(), "application/json");
  });
  ts.start();

  auto editor = make_http_edit_client(test_http_config(ts.base_url()));
  caps::ImageAsset a;
  a.locator = "https://img.test/a.png";
  caps::ImageAsset b;
  b.locator = "https://img.test/b.png";
  const auto out = editor->edit("stitch", {a, b});
  CHECK(out.locator == "https://img.test/out.png");
  CHECK(out.provenance == caps::Provenance::kComposed);
  CHECK(out.parent_locators == std::vector<std::string>{"https://img.test/a.png",
                                                        "https://img.test/b.png"});

  auto embedder = make_http_embed_client(test_http_config(ts.base_url()));
  const auto vectors = embedder->embed({"q1", "q2"}, "text");
  REQUIRE(vectors.size() == 2);
  CHECK(vectors[0] == std::vector<double>{0.6, 0.8});
}
