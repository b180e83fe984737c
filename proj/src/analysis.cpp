#include "dpe/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include <nlohmann/json.hpp>

namespace dpe::analysis {

void EmbeddingSet::validate() const {
  if (ids.size() != vectors.size()) throw InvariantError("embedding ids/vectors size mismatch");
  if (!vectors.empty()) {
    const std::size_t d = vectors.front().size();
    if (d < 1) throw InvariantError("embedding dimension must be >= 1");
    for (const auto& v : vectors) {
      if (v.size() != d) throw InvariantError("inconsistent embedding dimensions");
      for (double x : v) {
        if (!std::isfinite(x)) throw InvariantError("non-finite embedding component");
      }
    }
  }
}

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

struct KahanSum {
  double sum = 0.0;
  double carry = 0.0;
  void add(double x) {
    const double y = x - carry;
    const double t = sum + y;
    carry = (t - sum) - y;
    sum = t;
  }
};

/// Distance mass of row i against rows j > i. The denominator uses
/// sqrt(dii * djj); for identical vectors sqrt(d*d) == d in IEEE
/// round-to-nearest, so self-similar pairs contribute exactly zero.
double row_distance_sum(const EmbeddingSet& set, const std::vector<double>& self_dots,
                        std::size_t i) {
  KahanSum acc;
  for (std::size_t j = i + 1; j < set.size(); ++j) {
    const double cos_ij =
        dot(set.vectors[i], set.vectors[j]) / std::sqrt(self_dots[i] * self_dots[j]);
    acc.add(1.0 - cos_ij);
  }
  return acc.sum;
}

std::vector<double> checked_self_dots(const EmbeddingSet& set) {
  set.validate();
  if (set.size() < 2) throw InvariantError("diversity needs at least 2 vectors");
  std::vector<double> self_dots(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    self_dots[i] = dot(set.vectors[i], set.vectors[i]);
    if (!(self_dots[i] > 0.0)) {
      throw InvariantError("zero-norm embedding at index " + std::to_string(i));
    }
  }
  return self_dots;
}

double combine_rows(const std::vector<double>& row_sums, std::size_t n) {
  KahanSum total;
  for (double r : row_sums) total.add(r);
  // Ordered-pair double counting cancels: mean = 2 * sum_{i<j} / (N(N-1)).
  return 2.0 * total.sum / (static_cast<double>(n) * static_cast<double>(n - 1));
}

}  // namespace

double diversity_serial(const EmbeddingSet& set) {
  const auto self_dots = checked_self_dots(set);
  std::vector<double> row_sums(set.size(), 0.0);
  for (std::size_t i = 0; i < set.size(); ++i) {
    row_sums[i] = row_distance_sum(set, self_dots, i);
  }
  return combine_rows(row_sums, set.size());
}

double diversity(const EmbeddingSet& set) {
  const auto self_dots = checked_self_dots(set);
  std::vector<double> row_sums(set.size(), 0.0);
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 16)
#endif
  for (std::size_t i = 0; i < set.size(); ++i) {
    row_sums[i] = row_distance_sum(set, self_dots, i);
  }
  // Rows combine in index order, so the score is thread-count independent
  // and matches the serial reference bit for bit.
  return combine_rows(row_sums, set.size());
}

EmbeddingSet embed_corpus(const std::vector<caps::DatasetRecord>& dataset,
                          agents::EmbedClient& embedder, const std::string& modality,
                          int concurrency, std::vector<std::string>* skipped_ids) {
  if (dataset.empty()) throw MissingInputError("cannot embed an empty dataset");
  if (modality != "text" && modality != "image") {
    throw ConfigError("embedding modality must be 'text' or 'image'");
  }
  std::vector<std::optional<std::vector<double>>> slots(dataset.size());
  parallel_for(dataset.size(), concurrency, [&](std::size_t i) {
    const std::string& content =
        modality == "text" ? dataset[i].question : dataset[i].image.locator;
    try {
      auto vectors = embedder.embed({content}, modality);
      if (vectors.size() == 1 && !vectors.front().empty()) {
        slots[i] = std::move(vectors.front());
      }
    } catch (const ClientError&) {
      // Skipped records are reported below.
    }
  });
  EmbeddingSet set;
  set.modality = modality;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (slots[i]) {
      set.ids.push_back(dataset[i].id);
      set.vectors.push_back(std::move(*slots[i]));
    } else if (skipped_ids != nullptr) {
      skipped_ids->push_back(dataset[i].id);
    }
  }
  set.validate();
  return set;
}

json diversity_report(const EmbeddingSet& set, double score) {
  return json{{"schema_version", std::string(kSchemaVersion)},
              {"modality", set.modality},
              {"n", set.size()},
              {"dimension", set.dimension()},
              {"diversity", score}};
}

void export_vectors_csv(const std::filesystem::path& path, const EmbeddingSet& set) {
  std::string out = "id";
  for (int k = 0; k < set.dimension(); ++k) out += ",c" + std::to_string(k);
  out += "\n";
  char buf[64];
  for (std::size_t i = 0; i < set.size(); ++i) {
    out += set.ids[i];
    for (double x : set.vectors[i]) {
      std::snprintf(buf, sizeof(buf), ",%.17g", x);
      out += buf;
    }
    out += "\n";
  }
  write_text_file(path, out);
}

// ---------------------------------------------------------------------------
// Quality
// ---------------------------------------------------------------------------

double sample_quality_score(const QualityRating& rating) {
  if (rating.judges.empty()) throw InvariantError("quality rating without judges");
  double sum = 0.0;
  for (const auto& s : rating.judges) {
    for (int v : {s.clarity, s.solvability, s.correctness}) {
      if (v < 1 || v > 5) throw InvariantError("judge score outside [1,5]");
    }
    sum += static_cast<double>(s.clarity + s.solvability + s.correctness) / 3.0;
  }
  return sum / static_cast<double>(rating.judges.size());
}

QualitySummary quality_score(const std::vector<QualityRating>& ratings) {
  if (ratings.empty()) throw MissingInputError("quality_score needs at least one rating");
  QualitySummary out;
  out.n = static_cast<int>(ratings.size());
  double qs_sum = 0.0;
  double cl = 0.0, s = 0.0, co = 0.0;
  long judge_count = 0;
  for (const auto& r : ratings) {
    qs_sum += sample_quality_score(r);
    for (const auto& j : r.judges) {
      cl += j.clarity;
      s += j.solvability;
      co += j.correctness;
      ++judge_count;
    }
  }
  out.qs = qs_sum / static_cast<double>(ratings.size());
  out.mean_clarity = cl / static_cast<double>(judge_count);
  out.mean_solvability = s / static_cast<double>(judge_count);
  out.mean_correctness = co / static_cast<double>(judge_count);
  return out;
}

json QualitySummary::to_json(const json& coverage) const {
  return json{{"schema_version", std::string(kSchemaVersion)},
              {"n", n},
              {"per_aspect_means",
               json{{"CL", mean_clarity}, {"S", mean_solvability}, {"CO", mean_correctness}}},
              {"qs", qs},
              {"coverage", coverage}};
}

namespace {

/// Fixed rubric prompt; versioned with the repo so scores compare across runs.
constexpr std::string_view kJudgeRubric =
    "Rate the question/answer pair for an image-grounded training dataset on a 5-point Likert "
    "scale (1 worst, 5 best) along three aspects: Clarity (CL) - the question is unambiguous and "
    "well-formed; Solvability (S) - the question is answerable from the image alone with complete "
    "information; Correctness (CO) - the reference answer is consistent with the image. Return "
    "JSON {\"CL\": int, \"S\": int, \"CO\": int}.";

std::vector<std::size_t> sample_indices(std::size_t pool, std::size_t take, std::uint64_t seed) {
  std::vector<std::size_t> indices(pool);
  std::iota(indices.begin(), indices.end(), 0);
  Rng rng(mix64(seed, fnv1a64("judge-sample")));
  take = std::min(take, pool);
  for (std::size_t i = 0; i < take; ++i) {
    const std::size_t j = i + rng.below(indices.size() - i);
    std::swap(indices[i], indices[j]);
  }
  indices.resize(take);
  return indices;
}

}  // namespace

std::vector<QualityRating> judge_questions(
    const std::vector<caps::DatasetRecord>& dataset,
    const std::vector<std::shared_ptr<agents::ChatClient>>& judges, const JudgeConfig& config,
    json* coverage_out) {
  if (dataset.empty()) throw MissingInputError("judge_questions needs a non-empty dataset");
  if (judges.empty()) throw ConfigError("judge_questions needs at least one judge");
  if (config.n_sample < 1) throw ConfigError("n_sample must be >= 1");

  const auto indices =
      sample_indices(dataset.size(), static_cast<std::size_t>(config.n_sample), config.seed);
  const std::size_t jobs = indices.size() * judges.size();
  std::vector<std::optional<JudgeScores>> scores(jobs);

  parallel_for(jobs, config.concurrency, [&](std::size_t job) {
    const std::size_t sample_pos = job / judges.size();
    const std::size_t judge_idx = job % judges.size();
    const auto& rec = dataset[indices[sample_pos]];
    agents::ChatRequest req;
    req.request_id = agents::next_request_id();
    std::string prompt = std::string(kJudgeRubric);
    prompt = agents::append_context_block(
        std::move(prompt), json{{"kind", "quality-judge"},
                                {"judge", judge_idx},
                                {"id", rec.id},
                                {"question", rec.question},
                                {"answer", rec.answer}});
    req.messages.push_back(agents::ChatMessage{"user", std::move(prompt), {rec.image.locator}});
    try {
      const json parsed = agents::parse_json_response(judges[judge_idx]->chat(req).text);
      if (!parsed.contains("CL") || !parsed.contains("S") || !parsed.contains("CO")) return;
      JudgeScores s;
      s.judge = "judge-" + std::to_string(judge_idx);
      s.clarity = parsed["CL"].get<int>();
      s.solvability = parsed["S"].get<int>();
      s.correctness = parsed["CO"].get<int>();
      if (s.clarity < 1 || s.clarity > 5 || s.solvability < 1 || s.solvability > 5 ||
          s.correctness < 1 || s.correctness > 5) {
        return;
      }
      scores[job] = std::move(s);
    } catch (const ClientError&) {
      // Omitted; recorded in the coverage report.
    }
  });

  std::vector<QualityRating> ratings;
  int omissions = 0;
  int samples_without_rating = 0;
  for (std::size_t sample_pos = 0; sample_pos < indices.size(); ++sample_pos) {
    QualityRating rating;
    rating.sample_id = dataset[indices[sample_pos]].id;
    for (std::size_t judge_idx = 0; judge_idx < judges.size(); ++judge_idx) {
      auto& slot = scores[sample_pos * judges.size() + judge_idx];
      if (slot) {
        rating.judges.push_back(std::move(*slot));
      } else {
        ++omissions;
      }
    }
    if (rating.judges.empty()) {
      ++samples_without_rating;
    } else {
      ratings.push_back(std::move(rating));
    }
  }
  if (coverage_out != nullptr) {
    *coverage_out = json{{"sampled", indices.size()},
                         {"judges", judges.size()},
                         {"ratings_expected", jobs},
                         {"ratings_returned", jobs - static_cast<std::size_t>(omissions)},
                         {"omitted", omissions},
                         {"samples_without_rating", samples_without_rating}};
  }
  return ratings;
}

}  // namespace dpe::analysis
