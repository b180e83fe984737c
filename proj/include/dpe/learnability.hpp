/// @file learnability.hpp
/// Maximum-entropy learnability analysis: rollout-based pass-rate
/// estimation, the soft value of a binary-reward prompt, the exact reverse
/// KL to the reward-tilted optimum, its second-order bound, and the
/// difficulty-aware keep/drop filter that retains moderately difficult
/// samples.
#pragma once

#include <functional>

#include "dpe/capability.hpp"
#include "dpe/common.hpp"

namespace dpe::learnability {

// ---------------------------------------------------------------------------
// Closed-form quantities for binary rewards
// ---------------------------------------------------------------------------

/// V*(p, beta) = beta * log((1-p) + p * exp(1/beta)), evaluated in the
/// shifted form 1 + beta * log(p + (1-p) * exp(-1/beta)) for p > 0 so small
/// beta cannot overflow. Exact at the endpoints: V*(0) = 0, V*(1) = 1.
double soft_value(double p, double beta);

/// KL(pi_init || pi*) = (V*(p, beta) - p) / beta. Zero at p = 0 and p = 1.
double kl_exact(double p, double beta);

/// Second-order term p(1-p) / (2 beta^2). Symmetric around p = 0.5 and
/// maximal there. Despite its derivation as a bound, it exceeds the exact
/// KL on part of the (p, beta) range; callers get both values and a
/// bound_holds flag rather than an assertion.
double kl_lower_bound(double p, double beta);

// ---------------------------------------------------------------------------
// Profiles
// ---------------------------------------------------------------------------

struct LearnabilityProfile {
  std::string sample_id;
  double pass_rate = 0.0;
  int rollouts_used = 0;
  double soft_value = 0.0;
  double kl_exact = 0.0;
  double kl_bound = 0.0;
  double beta = 0.0;
  bool bound_holds = false;  // kl_exact >= kl_bound - 1e-12
  bool kept = false;

  json to_json() const;
  static LearnabilityProfile from_json(const json& j);
};

// ---------------------------------------------------------------------------
// Pass-rate estimation
// ---------------------------------------------------------------------------

/// Anything that can answer a training sample repeatedly under the
/// pre-update policy. Implementations must be safe for concurrent calls and
/// deterministic in (sample id, rollout index).
class RolloutPolicy {
 public:
  virtual ~RolloutPolicy() = default;
  virtual std::string rollout_answer(const caps::DatasetRecord& sample, int rollout_index) = 0;
};

/// Verdict for one rollout answer; nullopt marks a verifier failure, which
/// excludes the rollout from both numerator and denominator.
using RolloutVerifier =
    std::function<std::optional<bool>(const caps::DatasetRecord& sample, const std::string& answer)>;

/// The default verifier: the shared mechanical comparison routine.
RolloutVerifier mechanical_verifier(caps::NumericTolerance tol = {});

struct PassRateEstimate {
  double pass_rate = 0.0;
  int rollouts_used = 0;
  int verifier_failures = 0;
};

/// p = (# rollouts with reward 1) / (# verified rollouts). Throws
/// ClientError when every rollout fails verification.
PassRateEstimate estimate_pass_rate(const caps::DatasetRecord& sample, RolloutPolicy& policy,
                                    int rollouts, const RolloutVerifier& verifier);

// ---------------------------------------------------------------------------
// Difficulty-aware filter
// ---------------------------------------------------------------------------

struct FilterConfig {
  int rollouts = 8;     // G_est
  double p_lo = 0.2;
  double p_hi = 0.8;
  double beta = 0.05;   // profile bookkeeping only
  caps::NumericTolerance tolerance;

  void validate() const;
};

struct FilterOutcome {
  std::vector<caps::DatasetRecord> kept;
  std::vector<LearnabilityProfile> profiles;  // one per input sample, input order
};

/// Keeps samples whose estimated pass rate falls inside [p_lo, p_hi] and
/// emits a profile per sample. An empty kept set is a warning, not an
/// error. Per-sample estimation runs in parallel; output order follows
/// input order.
FilterOutcome filter_dataset(const std::vector<caps::DatasetRecord>& dataset, RolloutPolicy& policy,
                             const RolloutVerifier& verifier, const FilterConfig& config);

}  // namespace dpe::learnability
