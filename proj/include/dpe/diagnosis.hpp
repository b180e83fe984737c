/// @file diagnosis.hpp
/// The diagnostic stage: samples a diagnostic set, scores the model's
/// answers step-aware, aggregates per-category accuracy, attributes
/// failures, and emits the structured report driving the next generation
/// round (mixture vector, failure patterns, generation hints).
#pragma once

#include <optional>

#include "dpe/agents.hpp"
#include "dpe/capability.hpp"
#include "dpe/common.hpp"

namespace dpe::diagnosis {

// ---------------------------------------------------------------------------
// Per-category aggregates
// ---------------------------------------------------------------------------

struct CategoryStats {
  caps::Category category = caps::Category::kOthers;
  int count = 0;    // scored instances only
  int correct = 0;  // scalar-1 instances
  std::vector<std::string> error_ids;

  /// Undefined (nullopt) when no instance of this category was scored.
  std::optional<double> accuracy() const {
    if (count == 0) return std::nullopt;
    return static_cast<double>(correct) / static_cast<double>(count);
  }
};

struct FailurePattern {
  caps::Category category = caps::Category::kOthers;
  std::vector<std::string> patterns;
  std::vector<std::string> evidence_ids;
};

struct GenerationHint {
  caps::Category category = caps::Category::kOthers;
  std::vector<std::string> directives;
};

// ---------------------------------------------------------------------------
// Accuracy -> raw weight step function. Monotone non-increasing and strictly
// positive so no category ever starves; the bounded ratio limits mixture
// whiplash between iterations.
// ---------------------------------------------------------------------------

class WeightBands {
 public:
  /// weights[i] applies to accuracy in [thresholds[i-1], thresholds[i]);
  /// the final weight applies at or above the last threshold.
  WeightBands(std::vector<double> thresholds, std::vector<double> weights, double default_weight);

  /// Acc < 0.3 -> 4.0; [0.3,0.5) -> 3.0; [0.5,0.7) -> 2.0; [0.7,0.9) -> 1.0;
  /// >= 0.9 -> 0.5; undefined -> 1.0.
  static WeightBands defaults();

  double eval(double accuracy) const;
  double default_weight() const { return default_weight_; }

  json to_json() const;
  static WeightBands from_json(const json& j);

 private:
  std::vector<double> thresholds_;
  std::vector<double> weights_;
  double default_weight_;
};

// ---------------------------------------------------------------------------
// Mixture vector over the full taxonomy
// ---------------------------------------------------------------------------

struct MixtureVector {
  std::array<double, caps::kNumCategories> weights{};      // normalized, sums to 1
  std::array<double, caps::kNumCategories> raw_weights{};  // band outputs

  static MixtureVector from_raw(const std::array<double, caps::kNumCategories>& raw);
  static MixtureVector uniform();

  double weight(caps::Category c) const { return weights[static_cast<std::size_t>(c)]; }

  /// Simplex invariant: weights sum to 1 within 1e-9 and are non-negative.
  void validate() const;
};

struct DiagnosticReport {
  int iteration = 0;
  MixtureVector mixture;
  std::vector<CategoryStats> stats;       // one entry per category, canonical order
  std::vector<FailurePattern> failures;   // same shape
  std::vector<GenerationHint> hints;      // same shape
  int sample_size = 0;
  std::string created_at;

  const CategoryStats& stats_for(caps::Category c) const;
  const FailurePattern& failures_for(caps::Category c) const;
  const GenerationHint& hints_for(caps::Category c) const;

  json to_json() const;
  static DiagnosticReport from_json(const json& j);
};

// ---------------------------------------------------------------------------
// Scoring results
// ---------------------------------------------------------------------------

enum class ScoreStatus {
  kScored,
  kUnscored,  // transport failure; excluded from counts, never counted wrong
};

struct ScoreOutcome {
  std::string id;
  ScoreStatus status = ScoreStatus::kUnscored;
  caps::Verdict verdict;
  std::string response;
  std::string note;  // failure reason for unscored instances
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

struct DiagnoseConfig {
  int sample_size = 200;
  std::uint64_t seed = 0;
  WeightBands bands = WeightBands::defaults();
  caps::NumericTolerance tolerance;
  int concurrency = 8;
  int max_examples_per_category = 8;  // failure triples sent to the analyst
};

/// Uniform draw of min(n, |pool|) instances without replacement,
/// deterministic under the seed. Throws MissingInputError on an empty pool.
std::vector<caps::DiagnosticInstance> sample_diagnostic_set(
    const std::vector<caps::DiagnosticInstance>& pool, int n, std::uint64_t seed);

/// One response per instance; the scalar comes from the mechanical
/// final-answer comparison under the instance's answer kind. The step
/// verifier, when provided, contributes step assessments for attribution.
/// Transport failures surface as kUnscored, never as scalar 0.
std::vector<ScoreOutcome> score_responses(const std::vector<caps::DiagnosticInstance>& instances,
                                          agents::ChatClient& responder,
                                          agents::ChatClient* step_verifier,
                                          const DiagnoseConfig& config);

/// Per-category counts and accuracy over scored instances; all 12 categories
/// present, zero-count ones flagged undefined. Throws on unknown ids.
std::vector<CategoryStats> aggregate(const std::vector<ScoreOutcome>& outcomes,
                                     const std::vector<caps::DiagnosticInstance>& instances);

/// Failure patterns and generation hints per category. Analyst transport
/// failure degrades to empty patterns with a warning; the loop never aborts
/// on attribution failure. Error-free categories get an empty pattern and a
/// "maintain difficulty" hint.
std::pair<std::vector<FailurePattern>, std::vector<GenerationHint>> attribute_failures(
    const std::vector<CategoryStats>& stats, const std::vector<caps::DiagnosticInstance>& instances,
    const std::vector<ScoreOutcome>& outcomes, agents::ChatClient& analyst,
    const DiagnoseConfig& config);

/// Raw weight = bands(Acc_c), or the default weight when undefined;
/// normalized onto the simplex.
MixtureVector accuracy_to_mixture(const std::vector<CategoryStats>& stats, const WeightBands& bands);

/// sample -> score -> aggregate -> attribute -> mixture, composed.
DiagnosticReport diagnose(const std::vector<caps::DiagnosticInstance>& pool,
                          agents::ChatClient& responder, agents::ChatClient* step_verifier,
                          agents::ChatClient& analyst, const DiagnoseConfig& config, int iteration,
                          const Clock& clock);

}  // namespace dpe::diagnosis
