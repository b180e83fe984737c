#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>

#include "dpe/questioner.hpp"

using namespace dpe;
using namespace dpe::caps;
using namespace dpe::questioner;

namespace {

diagnosis::DiagnosticReport minimal_report(const std::array<double, kNumCategories>& raw,
                                           int iteration = 0) {
  diagnosis::DiagnosticReport report;
  report.iteration = iteration;
  report.mixture = diagnosis::MixtureVector::from_raw(raw);
  report.stats.resize(kNumCategories);
  report.failures.resize(kNumCategories);
  report.hints.resize(kNumCategories);
  for (int c = 0; c < kNumCategories; ++c) {
    const auto cat = static_cast<Category>(c);
    report.stats[c].category = cat;
    report.failures[c].category = cat;
    report.hints[c].category = cat;
    report.hints[c].directives = {"maintain difficulty"};
  }
  report.sample_size = 0;
  report.created_at = "2026-01-01T00:00:00Z";
  return report;
}

std::array<double, kNumCategories> raw_of(std::initializer_list<std::pair<int, double>> entries) {
  std::array<double, kNumCategories> w{};
  for (const auto& [idx, value] : entries) w[static_cast<std::size_t>(idx)] = value;
  return w;
}

std::array<double, kNumCategories> uniform_raw() {
  std::array<double, kNumCategories> w{};
  w.fill(1.0);
  return w;
}

AgentClients hub_clients(agents::MockHub& hub) {
  AgentClients c;
  c.planner = hub.chat_client(agents::MockRole::kPlanner);
  c.generator = hub.chat_client(agents::MockRole::kGenerator);
  c.validator = hub.chat_client(agents::MockRole::kValidator);
  c.image_classifier = hub.chat_client(agents::MockRole::kImageClassifier);
  c.search = hub.search_client();
  c.editor = hub.edit_client();
  return c;
}

GenerationConfig test_gen_config(std::uint64_t seed = 9, int concurrency = 1) {
  GenerationConfig cfg;
  cfg.seed = seed;
  cfg.concurrency = concurrency;
  cfg.progress_every = 0;
  return cfg;
}

/// Rejects solvability on every even-numbered call, accepts otherwise.
class AlternatingValidator : public agents::ChatClient {
 public:
  agents::ChatResponse chat(const agents::ChatRequest&) override {
    const int n = counter_.fetch_add(1);
    agents::ChatResponse out;
    out.text = json{{"category_match", true}, {"solvable", n % 2 == 1}}.dump();
    return out;
  }

 private:
  std::atomic<int> counter_{0};
};

class AlwaysRejectingValidator : public agents::ChatClient {
 public:
  agents::ChatResponse chat(const agents::ChatRequest&) override {
    agents::ChatResponse out;
    out.text = json{{"category_match", false}, {"solvable", false}}.dump();
    return out;
  }
};

class ConstantGenerator : public agents::ChatClient {
 public:
  agents::ChatResponse chat(const agents::ChatRequest& req) override {
    const json ctx = agents::extract_context_json(req);
    agents::ChatResponse out;
    out.text = json{{"question", "What single word labels the panel?"},
                    {"answer", "alpha"},
                    {"answer_kind", "exact"},
                    {"depicts", ctx.at("category")}}.dump();
    return out;
  }
};

/// Always plans a short-text question so ConstantGenerator output is
/// well-formed and dedup is the only rejection path.
class ShortTextPlanner : public agents::ChatClient {
 public:
  agents::ChatResponse chat(const agents::ChatRequest&) override {
    agents::ChatResponse out;
    out.text = json{{"image_req", "tabletop scene; tags:household,tabletop"},
                    {"question_kind", "short-text"},
                    {"unit_required", false},
                    {"structured_output", false},
                    {"answer_format", "short-phrase"},
                    {"direction", "target weakness: counting"}}.dump();
    return out;
  }
};

class FixtureGenerator : public agents::ChatClient {
 public:
  agents::ChatResponse chat(const agents::ChatRequest&) override {
    agents::ChatResponse out;
    out.text = json{{"question", "Which label is shown? (A) x (B) y"},
                    {"answer", "B"},
                    {"answer_kind", "choice"},
                    {"depicts", "statistical-charts"}}.dump();
    return out;
  }
};

class LowResSearch : public agents::SearchClient {
 public:
  agents::SearchResult search(const agents::SearchQuery& q) override {
    agents::SearchResult r;
    for (int i = 0; i < q.top_k; ++i) {
      agents::SearchHit hit;
      hit.url = "mock://img/lowres" + std::to_string(i);
      hit.title = "tags:";
      for (const auto& t : q.structural_tags) hit.title += t + ",";
      hit.width = 100;
      hit.height = 100;
      r.hits.push_back(hit);
    }
    return r;
  }
};

class OversizedSearch : public agents::SearchClient {
 public:
  agents::SearchResult search(const agents::SearchQuery& q) override {
    agents::SearchResult r;
    agents::SearchHit hit;
    hit.url = "mock://img/huge";
    hit.title = "tags:";
    for (const auto& t : q.structural_tags) hit.title += t + ",";
    hit.width = 4000;
    hit.height = 3000;
    hit.bytes = 64ll * 1024 * 1024;
    r.hits.push_back(hit);
    return r;
  }
};

GenerationPlan mc_plan() {
  GenerationPlan plan;
  plan.category = Category::kStatisticalCharts;
  plan.image_req = "bar chart with legend; tags:bar-chart,legend";
  plan.question_kind = QuestionKind::kMultipleChoice;
  plan.answer_format_req = "option-letter";
  plan.direction = "target weakness: legend mismatches";
  return plan;
}

}  // namespace

TEST_CASE("plan_next") {
  agents::MockHub hub(21);
  auto planner = hub.chat_client(agents::MockRole::kPlanner);

  SUBCASE("saturated ledger means done") {
    const auto report = minimal_report(raw_of({{2, 1.0}}));
    quota::QuotaLedger ledger(report.mixture, 1);
    Rng rng(1);
    auto first = plan_next(report, ledger, *planner, rng);
    REQUIRE(first.has_value());
    ledger.commit(std::move(first->first));
    CHECK_FALSE(plan_next(report, ledger, *planner, rng).has_value());
  }

  SUBCASE("forced single category") {
    const auto report = minimal_report(raw_of({{2, 1.0}}));
    quota::QuotaLedger ledger(report.mixture, 5);
    Rng rng(1);
    for (int i = 0; i < 5; ++i) {
      auto next = plan_next(report, ledger, *planner, rng);
      REQUIRE(next.has_value());
      CHECK(next->second.category == Category::kStatisticalCharts);
      CHECK_FALSE(next->second.image_req.empty());
      CHECK_FALSE(next->second.direction.empty());
      ledger.commit(std::move(next->first));
    }
  }

  SUBCASE("deficit-weighted draws approximate 3:1 over 400 draws") {
    const auto report = minimal_report(raw_of({{0, 3.0}, {1, 1.0}}));
    quota::QuotaLedger ledger(report.mixture, 400);
    REQUIRE(ledger.target(static_cast<Category>(0)) == 300);
    Rng rng(1234);
    int cat0 = 0;
    for (int i = 0; i < 400; ++i) {
      auto next = plan_next(report, ledger, *planner, rng);
      REQUIRE(next.has_value());
      if (next->second.category == static_cast<Category>(0)) ++cat0;
      // release so deficits stay constant across draws
      ledger.release(std::move(next->first));
    }
    const double freq = cat0 / 400.0;
    CHECK(freq >= 0.70);
    CHECK(freq <= 0.80);
  }
}

TEST_CASE("select_image") {
  agents::MockHub hub(31);
  auto search = hub.search_client();
  auto editor = hub.edit_client();
  auto classifier = hub.chat_client(agents::MockRole::kImageClassifier);
  ImageFilterConfig filter;

  SUBCASE("search then filter keeps the structurally matching candidate") {
    auto plan = mc_plan();
    const auto asset = select_image(plan, *search, *editor, classifier.get(), filter);
    CHECK(asset.provenance == Provenance::kSearched);
    CHECK(asset.locator.rfind("mock://img/", 0) == 0);
    CHECK(asset.width.value_or(0) >= filter.min_width);
  }

  SUBCASE("compose demands two survivors and records both parents") {
    auto plan = mc_plan();
    plan.image_req = "bar chart with legend; tags:bar-chart,legend; compose:2";
    const auto asset = select_image(plan, *search, *editor, classifier.get(), filter);
    CHECK(asset.provenance == Provenance::kComposed);
    CHECK(asset.parent_locators.size() == 2);
  }

  SUBCASE("edit hint routes through the editor") {
    auto plan = mc_plan();
    plan.image_req = "bar chart with legend; tags:bar-chart,legend; edit:crop-highlight";
    const auto asset = select_image(plan, *search, *editor, classifier.get(), filter);
    CHECK(asset.provenance == Provenance::kEdited);
    CHECK(asset.parent_locators.size() == 1);
  }

  SUBCASE("no candidate survives: empty provider") {
    auto plan = mc_plan();
    plan.image_req = "unfindable thing; tags:none";
    CHECK_THROWS_AS(select_image(plan, *search, *editor, classifier.get(), filter),
                    NoCandidateError);
  }

  SUBCASE("resolution floor drops low-res candidates") {
    LowResSearch lowres;
    auto plan = mc_plan();
    CHECK_THROWS_AS(select_image(plan, lowres, *editor, classifier.get(), filter), NoCandidateError);
  }

  SUBCASE("byte ceiling drops oversized candidates") {
    OversizedSearch oversized;
    auto plan = mc_plan();
    CHECK_THROWS_AS(select_image(plan, oversized, *editor, classifier.get(), filter),
                    NoCandidateError);
  }
}

TEST_CASE("generate_question") {
  agents::MockHub hub(41);
  auto generator = hub.chat_client(agents::MockRole::kGenerator);
  diagnosis::GenerationHint hints;
  hints.category = Category::kStatisticalCharts;
  hints.directives = {"focus on legends"};
  caps::ImageAsset image;
  image.locator = "mock://img/test";

  SUBCASE("multiple-choice carries its option set") {
    auto plan = mc_plan();
    const auto out = generate_question(image, plan, hints, *generator);
    CHECK(out.answer_kind == AnswerKind::kChoice);
    CHECK(out.question.find("(A)") != std::string::npos);
    CHECK(out.question.find("(B)") != std::string::npos);
    REQUIRE(out.answer.size() == 1);
    CHECK(out.answer[0] >= 'A');
    CHECK(out.answer[0] <= 'D');
  }

  SUBCASE("numeric with unit") {
    auto plan = mc_plan();
    plan.question_kind = QuestionKind::kNumeric;
    plan.unit_required = true;
    plan.answer_format_req = "number-with-unit";
    const auto out = generate_question(image, plan, hints, *generator);
    CHECK(out.answer_kind == AnswerKind::kNumeric);
    CHECK(caps::parse_leading_number(out.answer).has_value());
    CHECK(out.answer.find("units") != std::string::npos);
  }

  SUBCASE("scripted fixture passes through verbatim") {
    FixtureGenerator fixture;
    const auto out = generate_question(image, mc_plan(), hints, fixture);
    CHECK(out.question == "Which label is shown? (A) x (B) y");
    CHECK(out.answer == "B");
    CHECK(out.answer_kind == AnswerKind::kChoice);
  }
}

TEST_CASE("local gates") {
  CandidateSample c;
  c.plan = mc_plan();
  c.question = "Which label? (A) x (B) y (C) z";
  c.answer = "B";
  c.answer_kind = AnswerKind::kChoice;

  SUBCASE("well-formed multiple choice passes") {
    CHECK(check_verifiability(c));
    CHECK(check_format(c));
  }
  SUBCASE("multiple-choice question without options fails format, not verifiability") {
    c.question = "Which label is shown?";
    CHECK(check_verifiability(c));
    CHECK_FALSE(check_format(c));
  }
  SUBCASE("answer letter outside the option set fails format") {
    c.answer = "D";
    CHECK_FALSE(check_format(c));
  }
  SUBCASE("kind mismatch with the plan fails format") {
    c.answer_kind = AnswerKind::kNumeric;
    c.answer = "42";
    CHECK_FALSE(check_format(c));
  }
  SUBCASE("numeric unit requirement") {
    c.plan.question_kind = QuestionKind::kNumeric;
    c.plan.unit_required = true;
    c.plan.answer_format_req = "number-with-unit";
    c.answer_kind = AnswerKind::kNumeric;
    c.answer = "42";
    CHECK_FALSE(check_format(c));
    c.answer = "42 units";
    CHECK(check_format(c));
  }
  SUBCASE("unverifiable answers") {
    c.answer = "maybe B or C";
    CHECK_FALSE(check_verifiability(c));
    c.answer_kind = AnswerKind::kNumeric;
    c.answer = "no number";
    CHECK_FALSE(check_verifiability(c));
    c.answer_kind = AnswerKind::kExact;
    c.answer = "   ";
    CHECK_FALSE(check_verifiability(c));
  }
}

TEST_CASE("validate sets agent gates") {
  agents::MockHub hub(51);
  auto validator = hub.chat_client(agents::MockRole::kValidator);

  CandidateSample c;
  c.plan = mc_plan();
  c.category = c.plan.category;
  c.image.locator = "mock://img/x";
  c.question = "Which label? (A) x (B) y";
  c.answer = "A";
  c.answer_kind = AnswerKind::kChoice;
  c.depicts = "statistical-charts";

  SUBCASE("clean candidate: all gates 1") {
    const auto out = validate(c, *validator);
    CHECK(out.gates.category_ok);
    CHECK(out.gates.solvable);
    CHECK(out.gates.verifiable);
    CHECK(out.gates.format_ok);
    CHECK(out.gates.accepted());
  }
  SUBCASE("category drift trips g_cat") {
    c.depicts = "natural-scenes";
    const auto out = validate(c, *validator);
    CHECK_FALSE(out.gates.category_ok);
    CHECK_FALSE(out.gates.accepted());
  }
  SUBCASE("insufficient grounding trips g_sol") {
    c.question = "Which label? (A) x (B) y (described in the caption, not shown in the image)";
    const auto out = validate(c, *validator);
    CHECK_FALSE(out.gates.solvable);
    CHECK_FALSE(out.gates.accepted());
  }
  SUBCASE("validator transport failure leaves the candidate unvalidated") {
    class Down : public agents::ChatClient {
      agents::ChatResponse chat(const agents::ChatRequest&) override {
        throw ClientError("down", true);
      }
    } down;
    const auto out = validate(c, down);
    CHECK_FALSE(out.gates.validated);
    CHECK_FALSE(out.gates.accepted());
  }
  SUBCASE("any single gate at 0 rejects (product rule)") {
    for (int mask = 0; mask < 16; ++mask) {
      GateResults g;
      g.validated = true;
      g.category_ok = mask & 1;
      g.solvable = mask & 2;
      g.verifiable = mask & 4;
      g.format_ok = mask & 8;
      CHECK(g.accepted() == (mask == 15));
    }
  }
}

TEST_CASE("generate_dataset") {
  SUBCASE("M=12 uniform with all-accepting mocks gives exactly one per category") {
    agents::MockHub hub(61);
    const auto report = minimal_report(uniform_raw());
    const auto outcome = generate_dataset(report, 12, hub_clients(hub), test_gen_config());
    CHECK(outcome.records.size() == 12);
    std::array<int, kNumCategories> counts{};
    for (const auto& rec : outcome.records) counts[static_cast<int>(rec.category)]++;
    for (int c = 0; c < kNumCategories; ++c) CHECK(counts[c] == 1);
    CHECK(outcome.manifest.accepted == 12);
    CHECK(outcome.manifest.gate_rejects.total() == 0);
    for (int v : outcome.manifest.shortfall) CHECK(v == 0);
  }

  SUBCASE("50% deterministic rejection consumes retries, not quota") {
    agents::MockHub hub(62);
    auto clients = hub_clients(hub);
    clients.validator = std::make_shared<AlternatingValidator>();
    const auto report = minimal_report(uniform_raw());
    const auto outcome = generate_dataset(report, 20, clients, test_gen_config());
    CHECK(outcome.records.size() == 20);
    std::array<int, kNumCategories> counts{};
    for (const auto& rec : outcome.records) counts[static_cast<int>(rec.category)]++;
    quota::QuotaLedger expected(report.mixture, 20);
    for (int c = 0; c < kNumCategories; ++c) {
      CHECK(counts[c] == expected.target(static_cast<Category>(c)));
    }
    CHECK(outcome.manifest.rejected == 20);
    CHECK(outcome.manifest.gate_rejects.sol == 20);
  }

  SUBCASE("retry budget zero with an always-rejecting validator reports full shortfall") {
    agents::MockHub hub(63);
    auto clients = hub_clients(hub);
    clients.validator = std::make_shared<AlwaysRejectingValidator>();
    auto cfg = test_gen_config();
    cfg.retry_budget = 0;
    const auto report = minimal_report(uniform_raw());
    const auto outcome = generate_dataset(report, 12, clients, cfg);
    CHECK(outcome.records.empty());
    int shortfall_total = 0;
    for (int c = 0; c < kNumCategories; ++c) {
      CHECK(outcome.manifest.shortfall[c] == 1);
      shortfall_total += outcome.manifest.shortfall[c];
    }
    CHECK(shortfall_total == 12);
  }

  SUBCASE("always-rejecting validator with retries still terminates with shortfall") {
    agents::MockHub hub(64);
    auto clients = hub_clients(hub);
    clients.validator = std::make_shared<AlwaysRejectingValidator>();
    auto cfg = test_gen_config();
    cfg.retry_budget = 2;
    const auto report = minimal_report(raw_of({{0, 1.0}}));
    const auto outcome = generate_dataset(report, 4, clients, cfg);
    CHECK(outcome.records.empty());
    CHECK(outcome.manifest.shortfall[0] == 4);
    CHECK(outcome.manifest.rejected == 8);
  }

  SUBCASE("accounting identity holds under concurrent forfeits") {
    // Validator rejects two of three candidates; with a tight retry budget a
    // fraction of slots is forfeited while workers race over the capacity.
    class MostlyRejectingValidator : public agents::ChatClient {
     public:
      agents::ChatResponse chat(const agents::ChatRequest&) override {
        const int n = counter_.fetch_add(1);
        agents::ChatResponse out;
        out.text = json{{"category_match", true}, {"solvable", n % 3 == 2}}.dump();
        return out;
      }

     private:
      std::atomic<int> counter_{0};
    };
    agents::MockHub hub(72);
    auto clients = hub_clients(hub);
    clients.validator = std::make_shared<MostlyRejectingValidator>();
    auto cfg = test_gen_config(9, 4);
    cfg.retry_budget = 1;
    const auto report = minimal_report(uniform_raw());
    const auto outcome = generate_dataset(report, 24, clients, cfg);
    std::array<int, kNumCategories> counts{};
    for (const auto& rec : outcome.records) counts[static_cast<int>(rec.category)]++;
    quota::QuotaLedger expected(report.mixture, 24);
    for (int c = 0; c < kNumCategories; ++c) {
      CHECK(counts[c] + outcome.manifest.shortfall[c] ==
            expected.target(static_cast<Category>(c)));
    }
    CHECK(outcome.manifest.accepted + outcome.manifest.rejected >= 24);
  }

  SUBCASE("unparseable generator output consumes attempts, then the slot is abandoned") {
    class GarbageGenerator : public agents::ChatClient {
      agents::ChatResponse chat(const agents::ChatRequest&) override {
        agents::ChatResponse out;
        out.text = "not json at all";
        return out;
      }
    };
    agents::MockHub hub(69);
    auto clients = hub_clients(hub);
    clients.generator = std::make_shared<GarbageGenerator>();
    auto cfg = test_gen_config();
    cfg.retry_budget = 3;
    const auto report = minimal_report(raw_of({{1, 1.0}}));
    const auto outcome = generate_dataset(report, 2, clients, cfg);
    CHECK(outcome.records.empty());
    CHECK(outcome.manifest.shortfall[1] == 2);
    CHECK(outcome.manifest.rejected == 6);  // parse failures, no gate attribution
    CHECK(outcome.manifest.gate_rejects.total() == 0);
  }

  SUBCASE("a planner outage aborts the run as a client failure") {
    class DownPlanner : public agents::ChatClient {
      agents::ChatResponse chat(const agents::ChatRequest&) override {
        throw ClientError("planner unreachable", true);
      }
    };
    agents::MockHub hub(70);
    auto clients = hub_clients(hub);
    clients.planner = std::make_shared<DownPlanner>();
    const auto report = minimal_report(uniform_raw());
    CHECK_THROWS_AS(generate_dataset(report, 12, clients, test_gen_config()), ClientError);
  }

  SUBCASE("exact question dedup rejects repeats") {
    agents::MockHub hub(65);
    auto clients = hub_clients(hub);
    clients.planner = std::make_shared<ShortTextPlanner>();
    clients.generator = std::make_shared<ConstantGenerator>();
    auto cfg = test_gen_config();
    const auto report = minimal_report(raw_of({{4, 1.0}}));
    const auto outcome = generate_dataset(report, 3, clients, cfg);
    CHECK(outcome.records.size() == 1);
    CHECK(outcome.manifest.shortfall[4] == 2);
    CHECK(outcome.manifest.gate_rejects.total() == 0);  // dedup is not a gate
  }

  SUBCASE("output is invariant to the concurrency level") {
    auto run_with = [](int concurrency) {
      agents::MockHub hub(66);
      const auto report = minimal_report(uniform_raw());
      return generate_dataset(report, 36, hub_clients(hub), test_gen_config(9, concurrency));
    };
    const auto serial = run_with(1);
    const auto parallel = run_with(4);
    REQUIRE(serial.records.size() == parallel.records.size());
    for (std::size_t i = 0; i < serial.records.size(); ++i) {
      CHECK(serial.records[i].to_json().dump() == parallel.records[i].to_json().dump());
    }
    CHECK(serial.manifest.to_json().dump() == parallel.manifest.to_json().dump());
  }

  SUBCASE("gate soundness and provenance completeness over the output") {
    agents::MockHub hub(67);
    const auto report = minimal_report(uniform_raw());
    const auto outcome = generate_dataset(report, 48, hub_clients(hub), test_gen_config(4, 3));
    CHECK(outcome.records.size() == 48);
    bool saw_composed = false;
    bool saw_edited = false;
    for (const auto& rec : outcome.records) {
      const auto& gates = rec.meta.at("gates");
      CHECK(gates.at("cat") == 1);
      CHECK(gates.at("sol") == 1);
      CHECK(gates.at("ver") == 1);
      CHECK(gates.at("fmt") == 1);
      switch (rec.image.provenance) {
        case Provenance::kComposed:
          saw_composed = true;
          CHECK(rec.image.parent_locators.size() >= 2);
          break;
        case Provenance::kEdited:
          saw_edited = true;
          CHECK(rec.image.parent_locators.size() == 1);
          break;
        case Provenance::kSearched:
          CHECK(rec.image.parent_locators.empty());
          break;
        case Provenance::kSeed:
          FAIL("generated data cannot carry seed provenance");
      }
      // answers stay mechanically checkable
      CHECK(caps::compare_answers(rec.answer, rec.answer, rec.answer_kind));
    }
    CHECK(saw_composed);
    CHECK(saw_edited);
  }

  SUBCASE("adversarial generator: gates catch every malformed candidate") {
    agents::MockHub hub(68);
    hub.set_generator_malformed_rate(0.3);
    auto cfg = test_gen_config();
    cfg.retry_budget = 8;
    const auto report = minimal_report(uniform_raw());
    const auto outcome = generate_dataset(report, 60, hub_clients(hub), cfg);
    CHECK(outcome.records.size() == 60);
    const auto injections = hub.injection_counts();
    CHECK(injections.total() > 0);
    CHECK(outcome.manifest.gate_rejects.cat == injections.wrong_category);
    CHECK(outcome.manifest.gate_rejects.sol == injections.unanswerable);
    CHECK(outcome.manifest.gate_rejects.fmt == injections.missing_options);
    CHECK(outcome.manifest.gate_rejects.ver == 0);
    CHECK(outcome.manifest.rejected == injections.total());
  }
}

TEST_CASE("manifest json shape") {
  agents::MockHub hub(71);
  const auto report = minimal_report(uniform_raw(), 2);
  const auto outcome = generate_dataset(report, 12, hub_clients(hub), test_gen_config());
  const json j = outcome.manifest.to_json();
  CHECK(j["iteration"] == 2);
  CHECK(j["budget"] == 12);
  CHECK(j["accepted"] == 12);
  CHECK(j["shortfall"].empty());
  CHECK(j["gate_reject_histogram"].contains("cat"));
  CHECK(j["mixture"].size() == 12);
  CHECK(j.contains("schema_version"));
}
