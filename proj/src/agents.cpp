#include "dpe/agents.hpp"

#include <atomic>
#include <cctype>
#include <cmath>

#include <nlohmann/json.hpp>

namespace dpe::agents {

std::uint64_t next_request_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1);
}

std::string append_context_block(std::string prompt, const json& context) {
  prompt += "\n\n```json\n";
  prompt += context.dump();
  prompt += "\n```\n";
  return prompt;
}

json extract_context_json(const ChatRequest& request) {
  for (auto it = request.messages.rbegin(); it != request.messages.rend(); ++it) {
    if (it->role != "user") continue;
    const std::string& text = it->text;
    const std::string open = "```json\n";
    std::size_t start = text.rfind(open);
    if (start == std::string::npos) continue;
    start += open.size();
    std::size_t end = text.find("\n```", start);
    if (end == std::string::npos) continue;
    json j = json::parse(text.substr(start, end - start), nullptr, false);
    if (!j.is_discarded()) return j;
  }
  return json();
}

json parse_json_response(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  if (!j.is_discarded()) return j;
  std::size_t start = text.find('{');
  std::size_t end = text.rfind('}');
  if (start != std::string::npos && end != std::string::npos && end > start) {
    j = json::parse(text.substr(start, end - start + 1), nullptr, false);
    if (!j.is_discarded()) return j;
  }
  return json();
}

std::vector<double> digest_embedding(std::string_view content, int dimension) {
  Rng rng(mix64(fnv1a64(content), fnv1a64("digest-embedding")));
  std::vector<double> v(static_cast<std::size_t>(dimension));
  double norm_sq = 0.0;
  for (auto& x : v) {
    x = rng.next_gaussian();
    norm_sq += x * x;
  }
  if (norm_sq <= 0.0) {
    v[0] = 1.0;
    return v;
  }
  const double inv = 1.0 / std::sqrt(norm_sq);
  for (auto& x : v) x *= inv;
  return v;
}

// ---------------------------------------------------------------------------
// Mock data tables
// ---------------------------------------------------------------------------

namespace {

struct CategoryFlavor {
  const char* tag_a;
  const char* tag_b;
  const char* image_phrase;
  const char* failure_pattern;
  const char* directive;
};

const CategoryFlavor& flavor_of(caps::Category c) {
  static const std::array<CategoryFlavor, caps::kNumCategories> kFlavors = {{
      {"polygon", "angle-marks", "geometry diagram with labeled angles",
       "confuses angle relations when shapes overlap",
       "use multi-shape figures and ask for derived angles"},
      {"radiograph", "annotation", "annotated medical scan",
       "misses fine-grained anatomical cues",
       "focus questions on small annotated regions"},
      {"bar-chart", "legend", "bar chart with legend",
       "ignores axis units and mismatches legend entries",
       "require reading values against labeled axes and legends"},
      {"dense-text", "columns", "document page with dense text columns",
       "drops lines in dense text regions",
       "ask for content from mid-paragraph lines"},
      {"flowchart", "decision-nodes", "flowchart with decision nodes",
       "loses edge direction across branch nodes",
       "ask for paths through multiple decisions"},
      {"equation", "derivation", "multi-step formula derivation",
       "misparses symbols and drops derivation steps",
       "include dense notation and ask for intermediate steps"},
      {"street-map", "landmarks", "street map with landmarks",
       "confuses relative orientation between landmarks",
       "ask for directional relations between marked points"},
      {"outdoor", "wildlife", "outdoor scene with multiple subjects",
       "over-relies on priors instead of visible evidence",
       "ask about details that contradict common priors"},
      {"household", "tabletop", "tabletop arrangement of household objects",
       "miscounts similar adjacent objects",
       "use clusters of near-identical objects"},
      {"painting", "brushwork", "painting with distinctive brushwork",
       "misattributes style cues",
       "contrast similar styles within one image"},
      {"building", "facade", "building facade with repeated elements",
       "confuses structural elements across floors",
       "ask about specific floors or repeated elements"},
      {"miscellaneous", "mixed-content", "image with mixed content types",
       "inconsistent grounding on atypical content",
       "combine content types in one image"},
  }};
  return kFlavors[static_cast<std::size_t>(c)];
}

const std::array<const char*, 8> kOptionWords = {"alpha", "beta",  "gamma", "delta",
                                                 "epsilon", "zeta", "eta",   "theta"};

constexpr std::string_view kUnanswerableMarker = "(described in the caption, not shown in the image)";

double unit_from_hash(std::uint64_t h) { return (splitmix64(h) >> 11) * 0x1.0p-53; }

}  // namespace

std::string mock_wrong_answer(const std::string& reference, caps::AnswerKind kind) {
  switch (kind) {
    case caps::AnswerKind::kNumeric: {
      auto v = caps::parse_leading_number(reference);
      return v ? std::to_string(*v + 1.0) : "0";
    }
    case caps::AnswerKind::kChoice: {
      char c = reference.empty() ? 'A' : static_cast<char>(std::toupper(reference[0]));
      char next = static_cast<char>('A' + ((c - 'A' + 1) % 4));
      return std::string(1, next);
    }
    case caps::AnswerKind::kExact:
      return "not determinable";
  }
  return "not determinable";
}

// ---------------------------------------------------------------------------
// Mock chat client
// ---------------------------------------------------------------------------

class MockChatClient final : public ChatClient {
 public:
  MockChatClient(MockHub* hub, MockRole role, int judge_index)
      : hub_(hub), role_(role), judge_index_(judge_index) {}

  ChatResponse chat(const ChatRequest& request) override {
    json ctx = extract_context_json(request);
    if (ctx.is_null()) {
      throw ClientError("mock chat: request carries no context block");
    }
    const std::uint64_t digest = mix64(hub_->seed_, fnv1a64(ctx.dump()));
    switch (role_) {
      case MockRole::kResponder: return respond(ctx);
      case MockRole::kStepVerifier: return verify_steps(ctx, digest);
      case MockRole::kAnalyst: return attribute(ctx);
      case MockRole::kPlanner: return plan(ctx, digest);
      case MockRole::kImageClassifier: return classify(ctx);
      case MockRole::kGenerator: return generate(ctx, digest);
      case MockRole::kValidator: return validate(ctx);
      case MockRole::kJudge: return judge(ctx, digest);
    }
    throw ClientError("mock chat: unknown role");
  }

 private:
  static ChatResponse text_response(std::string text) {
    ChatResponse r;
    r.usage.completion_tokens = static_cast<int>(text.size() / 4 + 1);
    r.text = std::move(text);
    return r;
  }

  ChatResponse respond(const json& ctx) {
    const std::string id = ctx.at("id").get<std::string>();
    std::lock_guard<std::mutex> lock(hub_->mutex_);
    auto it = hub_->pool_.find(id);
    if (it == hub_->pool_.end()) {
      throw ClientError("mock responder: instance not registered: " + id);
    }
    const auto& entry = it->second;
    const bool correct = hub_->world_.answers_correctly(entry.category, id, 0);
    const std::string answer =
        correct ? entry.reference_answer
                : mock_wrong_answer(entry.reference_answer, entry.answer_kind);
    return text_response("Examining the image and the question.\nAnswer: " + answer);
  }

  ChatResponse verify_steps(const json& ctx, std::uint64_t digest) {
    const bool final_correct = ctx.value("final_correct", false);
    json steps = json::array();
    static const std::array<const char*, 4> kNotes = {"visual grounding", "intermediate reasoning",
                                                      "arithmetic", "answer formatting"};
    for (int i = 0; i < 2; ++i) {
      const std::uint64_t h = mix64(digest, static_cast<std::uint64_t>(i));
      const bool pass = final_correct ? (h % 8 != 0) : (h % 3 == 0);
      steps.push_back(json{{"i", i}, {"pass", pass}, {"note", kNotes[h % kNotes.size()]}});
    }
    return text_response(json{{"steps", steps}}.dump());
  }

  ChatResponse attribute(const json& ctx) {
    const auto category = caps::parse_category(ctx.at("category").get<std::string>());
    const auto& f = flavor_of(category);
    json out =
        json{{"patterns", json::array({f.failure_pattern})}, {"directives", json::array({f.directive})}};
    return text_response(out.dump());
  }

  ChatResponse plan(const json& ctx, std::uint64_t digest) {
    const auto category = caps::parse_category(ctx.at("category").get<std::string>());
    const auto& f = flavor_of(category);
    static const std::array<const char*, 3> kKinds = {"multiple-choice", "numeric", "short-text"};
    const std::string kind = kKinds[digest % 3];
    const bool unit_required = kind == "numeric" && (splitmix64(digest) % 2 == 0);
    std::string image_req = std::string(f.image_phrase) + "; tags:" + f.tag_a + "," + f.tag_b;
    if (digest % 5 == 0) {
      image_req += "; compose:2";
    } else if (digest % 7 == 0) {
      image_req += "; edit:crop-highlight";
    }
    std::string answer_format;
    if (kind == "multiple-choice") {
      answer_format = "option-letter";
    } else if (kind == "numeric") {
      answer_format = unit_required ? "number-with-unit" : "number";
    } else {
      answer_format = "short-phrase";
    }
    std::string direction = "target weakness: ";
    if (ctx.contains("patterns") && ctx.at("patterns").is_array() && !ctx.at("patterns").empty()) {
      direction += ctx.at("patterns")[0].get<std::string>();
    } else {
      direction += f.failure_pattern;
    }
    json out = json{{"image_req", image_req},
                    {"question_kind", kind},
                    {"unit_required", unit_required},
                    {"structured_output", digest % 4 == 0},
                    {"answer_format", answer_format},
                    {"direction", direction}};
    return text_response(out.dump());
  }

  ChatResponse classify(const json& ctx) {
    std::vector<std::string> required =
        ctx.at("required_tags").get<std::vector<std::string>>();
    const std::string title = ctx.value("candidate_title", "");
    bool match = true;
    for (const auto& tag : required) {
      if (title.find(tag) == std::string::npos) {
        match = false;
        break;
      }
    }
    return text_response(json{{"match", match}}.dump());
  }

  ChatResponse generate(const json& ctx, std::uint64_t digest) {
    const auto category = caps::parse_category(ctx.at("category").get<std::string>());
    const auto& f = flavor_of(category);
    const std::string kind = ctx.value("question_kind", "short-text");
    const bool unit_required = ctx.value("unit_required", false);
    const std::string item = hex_tag(splitmix64(digest), 8);

    // Adversarial injection on a digest-keyed schedule.
    int injected = -1;
    {
      std::lock_guard<std::mutex> lock(hub_->mutex_);
      if (hub_->generator_malformed_rate_ > 0.0 &&
          unit_from_hash(digest ^ 0xadbeefull) < hub_->generator_malformed_rate_) {
        injected = static_cast<int>(splitmix64(digest ^ 0x77ull) % 3);
        if (injected == 0) ++hub_->injections_.wrong_category;
        if (injected == 1) ++hub_->injections_.unanswerable;
        if (injected == 2) ++hub_->injections_.missing_options;
      }
    }

    std::string depicts(caps::category_id(category));
    if (injected == 0) {
      // Claim content from a different category.
      const int shifted =
          (static_cast<int>(category) + 1 + static_cast<int>(splitmix64(digest ^ 0x99ull) % 10)) %
          caps::kNumCategories;
      depicts = caps::category_id(static_cast<caps::Category>(shifted));
    }

    json out;
    if (injected == 2) {
      // Multiple-choice answer with no options in the question text.
      out = json{{"question", "Which option matches the highlighted " + std::string(f.tag_a) +
                                  " element in item #" + item + "?"},
                 {"answer", "B"},
                 {"answer_kind", "choice"},
                 {"depicts", depicts}};
      return text_response(out.dump());
    }

    std::string suffix;
    if (injected == 1) suffix = " " + std::string(kUnanswerableMarker);

    if (kind == "multiple-choice") {
      const std::size_t base = splitmix64(digest ^ 0x1234ull) % 4;
      const char answer = static_cast<char>('A' + splitmix64(digest ^ 0x4321ull) % 4);
      std::string q = "Which label matches the highlighted " + std::string(f.tag_a) +
                      " element in item #" + item + "?" + suffix;
      for (int i = 0; i < 4; ++i) {
        q += " (";
        q += static_cast<char>('A' + i);
        q += ") ";
        q += kOptionWords[(base + static_cast<std::size_t>(i)) % kOptionWords.size()];
      }
      out = json{{"question", q},
                 {"answer", std::string(1, answer)},
                 {"answer_kind", "choice"},
                 {"depicts", depicts}};
    } else if (kind == "numeric") {
      const int value = 2 + static_cast<int>(splitmix64(digest ^ 0x5678ull) % 97);
      out = json{{"question", "How many " + std::string(f.tag_a) + " elements appear in region #" +
                                  item + "?" + suffix},
                 {"answer", std::to_string(value) + (unit_required ? " units" : "")},
                 {"answer_kind", "numeric"},
                 {"depicts", depicts}};
    } else {
      const std::string word = kOptionWords[splitmix64(digest ^ 0x9abcull) % kOptionWords.size()];
      out = json{{"question", "What label is attached to the highlighted " + std::string(f.tag_a) +
                                  " element in item #" + item + "?" + suffix},
                 {"answer", word},
                 {"answer_kind", "exact"},
                 {"depicts", depicts}};
    }
    return text_response(out.dump());
  }

  ChatResponse validate(const json& ctx) {
    const std::string planned = ctx.at("planned_category").get<std::string>();
    const std::string depicts = ctx.value("depicts", planned);
    const std::string question = ctx.value("question", "");
    const bool category_match = depicts == planned;
    const bool solvable = question.find(kUnanswerableMarker) == std::string::npos;
    return text_response(json{{"category_match", category_match}, {"solvable", solvable}}.dump());
  }

  ChatResponse judge(const json& ctx, std::uint64_t digest) {
    const std::uint64_t h = mix64(digest, static_cast<std::uint64_t>(judge_index_) + 0x33ull);
    auto score = [&](std::uint64_t salt) {
      return 5 - static_cast<int>(splitmix64(h ^ salt) % 7 == 0 ? 1 : 0);
    };
    return text_response(
        json{{"CL", score(0x1ull)}, {"S", score(0x2ull)}, {"CO", score(0x3ull)}}.dump());
  }

  MockHub* hub_;
  MockRole role_;
  int judge_index_;
};

// ---------------------------------------------------------------------------
// Mock search / edit / embed clients
// ---------------------------------------------------------------------------

class MockSearchClient final : public SearchClient {
 public:
  explicit MockSearchClient(MockHub* hub) : hub_(hub) {}

  SearchResult search(const SearchQuery& query) override {
    SearchResult result;
    if (query.text.find("unfindable") != std::string::npos) return result;
    std::string key = query.text;
    for (const auto& t : query.structural_tags) key += "|" + t;
    const std::uint64_t base = mix64(hub_->seed_, fnv1a64(key));
    const int k = std::max(1, query.top_k);
    // One candidate carries every required tag; the others are near misses
    // with degraded structure or resolution.
    const int match_index = static_cast<int>(splitmix64(base ^ 0xfeedull) % k);
    for (int i = 0; i < k; ++i) {
      const std::uint64_t h = mix64(base, static_cast<std::uint64_t>(i));
      SearchHit hit;
      hit.url = "mock://img/" + hex_tag(h, 12);
      std::string tags;
      if (i == match_index) {
        for (const auto& t : query.structural_tags) tags += t + ",";
        hit.width = 640 + static_cast<int>(splitmix64(h ^ 0x11ull) % 1280);
        hit.height = 480 + static_cast<int>(splitmix64(h ^ 0x22ull) % 960);
      } else if (!query.structural_tags.empty()) {
        tags = query.structural_tags.front() + ",off-topic,";
        const bool low_res = splitmix64(h ^ 0x33ull) % 2 == 0;
        hit.width = low_res ? 120 : 800;
        hit.height = low_res ? 96 : 600;
      } else {
        tags = "untagged,";
        hit.width = 512;
        hit.height = 512;
      }
      hit.title = "stock image tags:" + tags + " #" + hex_tag(h, 6);
      result.hits.push_back(std::move(hit));
    }
    return result;
  }

 private:
  MockHub* hub_;
};

class MockEditClient final : public EditClient {
 public:
  explicit MockEditClient(MockHub* hub) : hub_(hub) {}

  caps::ImageAsset edit(const std::string& instruction,
                        const std::vector<caps::ImageAsset>& inputs) override {
    if (instruction.empty() || inputs.empty()) {
      throw ClientError("mock edit: instruction and at least one input required");
    }
    std::string key = instruction;
    for (const auto& a : inputs) key += "|" + a.locator;
    const std::uint64_t h = mix64(hub_->seed_, fnv1a64(key));
    caps::ImageAsset out;
    out.source = caps::ImageSource::kRemoteUrl;
    out.provenance =
        inputs.size() > 1 ? caps::Provenance::kComposed : caps::Provenance::kEdited;
    out.locator = std::string("mock://") +
                  (inputs.size() > 1 ? "composed/" : "edited/") + hex_tag(h, 12);
    out.width = inputs.front().width;
    out.height = inputs.front().height;
    for (const auto& a : inputs) out.parent_locators.push_back(a.locator);
    return out;
  }

 private:
  MockHub* hub_;
};

class MockEmbedClient final : public EmbedClient {
 public:
  explicit MockEmbedClient(MockHub* hub) : hub_(hub) {}

  std::vector<std::vector<double>> embed(const std::vector<std::string>& inputs,
                                         const std::string& modality) override {
    std::vector<std::vector<double>> out;
    out.reserve(inputs.size());
    for (const auto& in : inputs) {
      out.push_back(digest_embedding(modality + ":" + in, kDimension));
    }
    return out;
  }

  static constexpr int kDimension = 64;

 private:
  MockHub* hub_ [[maybe_unused]];
};

// ---------------------------------------------------------------------------
// MockHub
// ---------------------------------------------------------------------------

MockHub::MockHub(std::uint64_t seed) : seed_(seed), world_(SyntheticWorld::seeded(seed)) {}

void MockHub::register_pool(const std::vector<caps::DiagnosticInstance>& instances) {
  std::lock_guard<std::mutex> lock(mutex_);
  for (const auto& inst : instances) {
    pool_[inst.id] = PoolEntry{inst.reference_answer, inst.answer_kind, inst.category};
  }
}

void MockHub::set_generator_malformed_rate(double rate) {
  std::lock_guard<std::mutex> lock(mutex_);
  generator_malformed_rate_ = rate;
}

MockInjectionCounts MockHub::injection_counts() const {
  std::lock_guard<std::mutex> lock(mutex_);
  return injections_;
}

std::shared_ptr<ChatClient> MockHub::chat_client(MockRole role, int judge_index) {
  return std::make_shared<MockChatClient>(this, role, judge_index);
}

std::shared_ptr<SearchClient> MockHub::search_client() {
  return std::make_shared<MockSearchClient>(this);
}

std::shared_ptr<EditClient> MockHub::edit_client() { return std::make_shared<MockEditClient>(this); }

std::shared_ptr<EmbedClient> MockHub::embed_client() { return std::make_shared<MockEmbedClient>(this); }

}  // namespace dpe::agents
