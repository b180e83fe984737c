/// @file analysis.hpp
/// Evaluation instruments for generated corpora: embedding-based diversity
/// (mean pairwise cosine distance) and multi-judge question-quality scoring
/// on a 5-point rubric. The diversity kernel has an OpenMP implementation
/// and a serial reference that produce bit-identical results.
#pragma once

#include <memory>

#include "dpe/agents.hpp"
#include "dpe/capability.hpp"
#include "dpe/common.hpp"

namespace dpe::analysis {

// ---------------------------------------------------------------------------
// Embeddings and diversity
// ---------------------------------------------------------------------------

struct EmbeddingSet {
  std::vector<std::string> ids;
  std::vector<std::vector<double>> vectors;  // equal dimension, all finite
  std::string modality;                      // "text" | "image"

  std::size_t size() const { return vectors.size(); }
  int dimension() const { return vectors.empty() ? 0 : static_cast<int>(vectors.front().size()); }

  /// |ids| == |vectors|, d >= 1, every component finite.
  void validate() const;
};

/// Mean pairwise cosine distance over ordered pairs,
///   (1 / (N(N-1))) * sum_{i != j} (1 - cos(z_i, z_j)),
/// equal to the unordered-pair mean by symmetry. Result lies in [0, 2].
/// Requires N >= 2 and no zero-norm vector. A set of identical vectors
/// scores exactly 0; an orthogonal pair scores exactly 1.
double diversity(const EmbeddingSet& set);

/// Serial reference, bit-identical to diversity(); kept for tests and the
/// kernel benchmark.
double diversity_serial(const EmbeddingSet& set);

/// One embedding per record via the embedding endpoint; mock backends derive
/// deterministic unit-norm vectors from content digests. Failed records are
/// skipped and reported through skipped_ids.
EmbeddingSet embed_corpus(const std::vector<caps::DatasetRecord>& dataset,
                          agents::EmbedClient& embedder, const std::string& modality,
                          int concurrency = 8, std::vector<std::string>* skipped_ids = nullptr);

json diversity_report(const EmbeddingSet& set, double score);
void export_vectors_csv(const std::filesystem::path& path, const EmbeddingSet& set);

// ---------------------------------------------------------------------------
// Question quality
// ---------------------------------------------------------------------------

struct JudgeScores {
  std::string judge;
  int clarity = 0;      // CL, 1..5
  int solvability = 0;  // S
  int correctness = 0;  // CO
};

struct QualityRating {
  std::string sample_id;
  std::vector<JudgeScores> judges;  // at least one
};

/// Per-sample QS: mean over judges of (CL + S + CO) / 3.
double sample_quality_score(const QualityRating& rating);

struct QualitySummary {
  int n = 0;
  double mean_clarity = 0.0;
  double mean_solvability = 0.0;
  double mean_correctness = 0.0;
  double qs = 0.0;  // corpus QS: mean of per-sample QS

  json to_json(const json& coverage) const;
};

QualitySummary quality_score(const std::vector<QualityRating>& ratings);

struct JudgeConfig {
  int n_sample = 200;
  std::uint64_t seed = 0;
  int concurrency = 8;
};

/// Samples n_sample records deterministically and collects (CL, S, CO) from
/// each judge under the fixed rubric prompt. Unparseable or failed judge
/// output omits that judge's rating for that sample; omissions land in the
/// coverage report.
std::vector<QualityRating> judge_questions(
    const std::vector<caps::DatasetRecord>& dataset,
    const std::vector<std::shared_ptr<agents::ChatClient>>& judges, const JudgeConfig& config,
    json* coverage_out = nullptr);

}  // namespace dpe::analysis
