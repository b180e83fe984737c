#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dpe/analysis.hpp"

using namespace dpe;
using namespace dpe::analysis;

namespace {

EmbeddingSet set_of(std::vector<std::vector<double>> vectors) {
  EmbeddingSet set;
  set.modality = "text";
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    set.ids.push_back("v" + std::to_string(i));
  }
  set.vectors = std::move(vectors);
  return set;
}

/// Brute-force ordered-pair mean with a wide accumulator; structurally
/// independent of the production kernel.
long double diversity_oracle(const EmbeddingSet& set) {
  long double total = 0.0L;
  const std::size_t n = set.size();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      double dot = 0.0, ni = 0.0, nj = 0.0;
      for (std::size_t k = 0; k < set.vectors[i].size(); ++k) {
        dot += set.vectors[i][k] * set.vectors[j][k];
        ni += set.vectors[i][k] * set.vectors[i][k];
        nj += set.vectors[j][k] * set.vectors[j][k];
      }
      total += 1.0L - static_cast<long double>(dot / (std::sqrt(ni) * std::sqrt(nj)));
    }
  }
  return total / (static_cast<long double>(n) * static_cast<long double>(n - 1));
}

EmbeddingSet random_set(std::size_t n, int dim, Rng& rng) {
  std::vector<std::vector<double>> vectors;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> v(static_cast<std::size_t>(dim));
    for (auto& x : v) x = rng.next_gaussian();
    vectors.push_back(std::move(v));
  }
  return set_of(std::move(vectors));
}

caps::DatasetRecord record_of(const std::string& id, const std::string& question) {
  caps::DatasetRecord rec;
  rec.id = id;
  rec.image.locator = "mock://img/" + id;
  rec.question = question;
  rec.answer = "7";
  rec.answer_kind = caps::AnswerKind::kNumeric;
  rec.category = caps::Category::kDailyObjects;
  return rec;
}

}  // namespace

TEST_CASE("diversity on hand-built sets") {
  SUBCASE("identical vectors score exactly zero") {
    const auto set = set_of({{0.3, 0.4}, {0.3, 0.4}, {0.3, 0.4}});
    CHECK(diversity(set) == 0.0);
    CHECK(diversity_serial(set) == 0.0);
  }
  SUBCASE("orthogonal pair scores exactly one") {
    const auto set = set_of({{1.0, 0.0}, {0.0, 2.0}});
    CHECK(diversity(set) == 1.0);
  }
  SUBCASE("three vectors with pairwise cosines (1, 0, 0)") {
    const auto set = set_of({{1.0, 0.0}, {1.0, 0.0}, {0.0, 1.0}});
    CHECK(diversity(set) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(static_cast<double>(diversity_oracle(set)) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(diversity(set_of({{1.0, 0.0}})), InvariantError);
    CHECK_THROWS_AS(diversity(set_of({{1.0, 0.0}, {0.0, 0.0}})), InvariantError);
    auto ragged = set_of({{1.0, 0.0}, {1.0}});
    CHECK_THROWS_AS(diversity(ragged), InvariantError);
  }
}

TEST_CASE("diversity properties on random sets") {
  Rng rng(0x1dea);

  SUBCASE("oracle equivalence and serial/parallel bit-identity") {
    for (int trial = 0; trial < 25; ++trial) {
      const std::size_t n = 2 + rng.below(120);
      const int dim = 1 + static_cast<int>(rng.below(64));
      const auto set = random_set(n, dim, rng);
      const double fast = diversity(set);
      CHECK(fast == diversity_serial(set));
      CHECK(std::fabs(fast - static_cast<double>(diversity_oracle(set))) <= 1e-12);
      CHECK(fast >= 0.0);
      CHECK(fast <= 2.0);
    }
  }
  SUBCASE("permutation invariance") {
    auto set = random_set(40, 16, rng);
    const double before = diversity(set);
    Rng shuffle_rng(1);
    for (std::size_t i = set.vectors.size(); i > 1; --i) {
      std::swap(set.vectors[i - 1], set.vectors[shuffle_rng.below(i)]);
    }
    CHECK(diversity(set) == doctest::Approx(before).epsilon(1e-12));
  }
  SUBCASE("positive rescaling of any vector leaves the score unchanged") {
    auto set = random_set(30, 8, rng);
    const double before = diversity(set);
    for (std::size_t i = 0; i < set.vectors.size(); i += 3) {
      const double s = 0.01 + 100.0 * rng.next_double();
      for (auto& x : set.vectors[i]) x *= s;
    }
    CHECK(diversity(set) == doctest::Approx(before).epsilon(1e-11));
  }
}

TEST_CASE("quality scoring") {
  SUBCASE("single judge at the ceiling") {
    QualityRating r;
    r.sample_id = "s";
    r.judges.push_back({"j0", 5, 5, 5});
    CHECK(sample_quality_score(r) == 5.0);
  }
  SUBCASE("aspect mean") {
    QualityRating r;
    r.sample_id = "s";
    r.judges.push_back({"j0", 4, 3, 5});
    CHECK(sample_quality_score(r) == doctest::Approx(4.0));
  }
  SUBCASE("mean of per-judge means") {
    QualityRating r;
    r.sample_id = "s";
    r.judges.push_back({"j0", 5, 5, 5});
    r.judges.push_back({"j1", 3, 3, 3});
    CHECK(sample_quality_score(r) == doctest::Approx(4.0));
  }
  SUBCASE("bounds enforced") {
    QualityRating r;
    r.sample_id = "s";
    r.judges.push_back({"j0", 6, 5, 5});
    CHECK_THROWS_AS(sample_quality_score(r), InvariantError);
    r.judges[0] = {"j0", 0, 5, 5};
    CHECK_THROWS_AS(sample_quality_score(r), InvariantError);
  }
  SUBCASE("corpus QS stays within [1,5] on random ratings") {
    Rng rng(0x9991);
    std::vector<QualityRating> ratings;
    for (int i = 0; i < 200; ++i) {
      QualityRating r;
      r.sample_id = "s" + std::to_string(i);
      const int judges = 1 + static_cast<int>(rng.below(3));
      for (int j = 0; j < judges; ++j) {
        r.judges.push_back({"j" + std::to_string(j), 1 + static_cast<int>(rng.below(5)),
                            1 + static_cast<int>(rng.below(5)),
                            1 + static_cast<int>(rng.below(5))});
      }
      ratings.push_back(std::move(r));
    }
    const auto summary = quality_score(ratings);
    CHECK(summary.qs >= 1.0);
    CHECK(summary.qs <= 5.0);
    CHECK(summary.n == 200);
  }
}

namespace {

class ConstantJudge : public agents::ChatClient {
 public:
  explicit ConstantJudge(std::string text) : text_(std::move(text)) {}
  agents::ChatResponse chat(const agents::ChatRequest&) override {
    agents::ChatResponse out;
    out.text = text_;
    return out;
  }

 private:
  std::string text_;
};

class FailingEmbedder : public agents::EmbedClient {
 public:
  explicit FailingEmbedder(std::string fail_substring) : fail_(std::move(fail_substring)) {}
  std::vector<std::vector<double>> embed(const std::vector<std::string>& inputs,
                                         const std::string& modality) override {
    for (const auto& in : inputs) {
      if (in.find(fail_) != std::string::npos) throw ClientError("embedding backend refused", false);
    }
    std::vector<std::vector<double>> out;
    for (const auto& in : inputs) out.push_back(agents::digest_embedding(modality + ":" + in, 16));
    return out;
  }

 private:
  std::string fail_;
};

}  // namespace

TEST_CASE("judge_questions") {
  std::vector<caps::DatasetRecord> dataset;
  for (int i = 0; i < 40; ++i) {
    dataset.push_back(record_of("s" + std::to_string(i), "Question " + std::to_string(i) + "?"));
  }

  SUBCASE("constant scripted judges give corpus QS 5 and full coverage") {
    std::vector<std::shared_ptr<agents::ChatClient>> judges = {
        std::make_shared<ConstantJudge>(R"({"CL":5,"S":5,"CO":5})"),
        std::make_shared<ConstantJudge>(R"({"CL":5,"S":5,"CO":5})"),
        std::make_shared<ConstantJudge>(R"({"CL":5,"S":5,"CO":5})")};
    JudgeConfig cfg;
    cfg.n_sample = 20;
    cfg.seed = 4;
    json coverage;
    const auto ratings = judge_questions(dataset, judges, cfg, &coverage);
    REQUIRE(ratings.size() == 20);
    CHECK(quality_score(ratings).qs == 5.0);
    CHECK(coverage["sampled"] == 20);
    CHECK(coverage["omitted"] == 0);
  }
  SUBCASE("an unparseable judge is omitted; remaining judges carry the sample") {
    std::vector<std::shared_ptr<agents::ChatClient>> judges = {
        std::make_shared<ConstantJudge>(R"({"CL":5,"S":5,"CO":5})"),
        std::make_shared<ConstantJudge>("I decline to answer in JSON"),
        std::make_shared<ConstantJudge>(R"({"CL":3,"S":3,"CO":3})")};
    JudgeConfig cfg;
    cfg.n_sample = 10;
    cfg.seed = 4;
    json coverage;
    const auto ratings = judge_questions(dataset, judges, cfg, &coverage);
    REQUIRE(ratings.size() == 10);
    for (const auto& r : ratings) {
      CHECK(r.judges.size() == 2);
      CHECK(sample_quality_score(r) == doctest::Approx(4.0));
    }
    CHECK(coverage["omitted"] == 10);
  }
  SUBCASE("out-of-range judge scores are dropped as unparseable") {
    std::vector<std::shared_ptr<agents::ChatClient>> judges = {
        std::make_shared<ConstantJudge>(R"({"CL":9,"S":5,"CO":5})")};
    JudgeConfig cfg;
    cfg.n_sample = 5;
    cfg.seed = 4;
    json coverage;
    const auto ratings = judge_questions(dataset, judges, cfg, &coverage);
    CHECK(ratings.empty());
    CHECK(coverage["samples_without_rating"] == 5);
  }
  SUBCASE("mock hub judges stay near the ceiling") {
    agents::MockHub hub(17);
    std::vector<std::shared_ptr<agents::ChatClient>> judges;
    for (int i = 0; i < 3; ++i) judges.push_back(hub.chat_client(agents::MockRole::kJudge, i));
    JudgeConfig cfg;
    cfg.n_sample = 40;
    cfg.seed = 4;
    const auto ratings = judge_questions(dataset, judges, cfg, nullptr);
    const auto summary = quality_score(ratings);
    CHECK(summary.qs > 4.0);
    CHECK(summary.qs <= 5.0);
  }
}

TEST_CASE("embed_corpus") {
  std::vector<caps::DatasetRecord> dataset;
  for (int i = 0; i < 30; ++i) {
    dataset.push_back(record_of("s" + std::to_string(i), "Question " + std::to_string(i % 10) + "?"));
  }
  agents::MockHub hub(19);
  auto embedder = hub.embed_client();

  SUBCASE("one vector per record, identical questions embed identically") {
    const auto set = embed_corpus(dataset, *embedder, "text", 4);
    REQUIRE(set.size() == 30);
    CHECK(set.dimension() == 64);
    // records 0 and 10 share a question
    CHECK(set.vectors[0] == set.vectors[10]);
    CHECK(set.vectors[0] != set.vectors[1]);
  }
  SUBCASE("image modality embeds locators, which are unique here") {
    const auto set = embed_corpus(dataset, *embedder, "image", 4);
    CHECK(set.vectors[0] != set.vectors[10]);
  }
  SUBCASE("per-record failures are skipped and reported") {
    FailingEmbedder flaky("Question 3");
    std::vector<std::string> skipped;
    const auto set = embed_corpus(dataset, flaky, "text", 4, &skipped);
    CHECK(set.size() == 27);  // questions 3, 13, 23 fail
    REQUIRE(skipped.size() == 3);
    CHECK(skipped[0] == "s3");
  }
  SUBCASE("modality validation") {
    CHECK_THROWS_AS(embed_corpus(dataset, *embedder, "audio", 4), ConfigError);
    CHECK_THROWS_AS(embed_corpus({}, *embedder, "text", 4), MissingInputError);
  }
}

TEST_CASE("reports and exports") {
  const auto set = set_of({{1.0, 0.0}, {0.0, 1.0}});
  const json report = diversity_report(set, diversity(set));
  CHECK(report["n"] == 2);
  CHECK(report["dimension"] == 2);
  CHECK(report["diversity"] == 1.0);
  CHECK(report["modality"] == "text");
  CHECK(report.contains("schema_version"));

  const auto path = std::filesystem::temp_directory_path() / "dpe_vectors_test.csv";
  export_vectors_csv(path, set);
  const auto lines = read_lines(path);
  REQUIRE(lines.size() == 3);
  CHECK(lines[0] == "id,c0,c1");
  CHECK(lines[1].rfind("v0,", 0) == 0);
  std::filesystem::remove(path);

  QualitySummary summary;
  summary.n = 3;
  summary.qs = 4.5;
  summary.mean_clarity = 4.0;
  summary.mean_solvability = 4.5;
  summary.mean_correctness = 5.0;
  const json qj = summary.to_json(json{{"omitted", 0}});
  CHECK(qj["per_aspect_means"]["CL"] == 4.0);
  CHECK(qj["qs"] == 4.5);
}
