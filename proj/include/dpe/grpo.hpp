/// @file grpo.hpp
/// Group-relative policy optimization at desk scale: the clipped surrogate
/// objective with group-normalized advantages and KL regularization against
/// a frozen reference policy, over an abstract policy interface. A tabular
/// softmax policy provides exact distributions, analytic gradients, and
/// closed-form fixed points for numeric verification.
///
/// Batch objective and gradient come in a serial reference implementation
/// and an OpenMP variant; the parallel variant computes per-group terms
/// independently and combines them in group order, so results do not depend
/// on thread count.
#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <span>

#include "dpe/common.hpp"

namespace dpe::grpo {

using Trajectory = std::vector<int>;

struct GrpoConfig {
  double clip_epsilon = 0.2;  // may be +infinity to disable clipping
  double kl_beta = 0.05;
  int group_size = 8;
  double learning_rate = 0.5;
  int epochs_per_batch = 1;
  double std_floor = 1e-8;

  void validate() const;
  json to_json() const;
  static GrpoConfig from_json(const json& j);
};

// ---------------------------------------------------------------------------
// Policy interface
// ---------------------------------------------------------------------------

class Policy {
 public:
  virtual ~Policy() = default;

  virtual std::size_t num_parameters() const = 0;
  virtual std::vector<double> parameters() const = 0;
  virtual void set_parameters(std::span<const double> params) = 0;

  virtual std::vector<Trajectory> sample(int prompt, int count, Rng& rng) const = 0;

  /// log pi(o_t | x, o_<t) for every token of y.
  virtual std::vector<double> token_log_probs(int prompt, const Trajectory& y) const = 0;

  /// Dense gradient of log pi(o_t | x, o_<t) with respect to the parameter
  /// vector. Required by the analytic trainer.
  virtual std::vector<double> token_log_prob_grad(int prompt, const Trajectory& y,
                                                  std::size_t t) const = 0;

  /// Per-step action distribution for tabular policies; nullopt otherwise.
  virtual std::optional<std::vector<double>> full_distribution(int) const { return std::nullopt; }

  /// Exact sequence-level KL(this || reference) for a prompt when both
  /// policies are tabular; nullopt otherwise.
  virtual std::optional<double> exact_kl(int, const Policy&) const { return std::nullopt; }

  /// Gradient of exact_kl with respect to this policy's parameters.
  virtual std::optional<std::vector<double>> exact_kl_grad(int, const Policy&) const {
    return std::nullopt;
  }

  virtual std::unique_ptr<Policy> clone() const = 0;
};

// ---------------------------------------------------------------------------
// Trajectory groups
// ---------------------------------------------------------------------------

struct TrajectoryGroup {
  int prompt = 0;
  std::vector<Trajectory> trajectories;
  std::vector<double> rewards;
  std::vector<std::vector<double>> old_logp;
  std::vector<std::vector<double>> cur_logp;
  std::vector<std::vector<double>> init_logp;
  std::vector<double> advantages;
  bool degenerate = false;  // reward variance under the floor; skipped downstream
};

/// Group-normalized advantages: (r_i - mean) / max(pop_std, floor). When the
/// population std falls below the floor every advantage is zero and the
/// group is degenerate. Requires at least two rewards.
std::vector<double> group_advantages(std::span<const double> rewards, double std_floor);

/// Fills advantages/degenerate from the group's rewards.
void normalize_group(TrajectoryGroup& group, double std_floor);

// ---------------------------------------------------------------------------
// Objective and gradient
// ---------------------------------------------------------------------------

/// Clipped-surrogate objective for a single group:
///   (1/G) sum_i (1/|y_i|) sum_t min(rho * A_i, clip(rho, 1-eps, 1+eps) * A_i)
///   - beta * KL(pi_theta || pi_init)
/// with rho = exp(cur_logp - old_logp) and the trajectory advantage
/// broadcast to every token. KL is exact when both policies are supplied
/// and support it, otherwise the per-token estimator exp(d) - d - 1 with
/// d = init_logp - cur_logp.
double surrogate_objective(const TrajectoryGroup& group, const GrpoConfig& config,
                           const Policy* policy = nullptr, const Policy* init_policy = nullptr);

/// Mean surrogate over groups. Serial reference implementation.
double batch_objective_serial(std::span<const TrajectoryGroup> groups, const GrpoConfig& config,
                              const Policy* policy = nullptr, const Policy* init_policy = nullptr);

/// OpenMP variant; bit-identical to the serial reference.
double batch_objective(std::span<const TrajectoryGroup> groups, const GrpoConfig& config,
                       const Policy* policy = nullptr, const Policy* init_policy = nullptr);

/// Gradient of the mean surrogate with respect to the policy parameters.
std::vector<double> batch_gradient_serial(std::span<const TrajectoryGroup> groups,
                                          const GrpoConfig& config, const Policy& policy,
                                          const Policy& init_policy);

std::vector<double> batch_gradient(std::span<const TrajectoryGroup> groups,
                                   const GrpoConfig& config, const Policy& policy,
                                   const Policy& init_policy);

// ---------------------------------------------------------------------------
// Updates
// ---------------------------------------------------------------------------

struct StepReport {
  double j_before = 0.0;
  double j_after = 0.0;
  double kl = 0.0;
  double clip_fraction = 0.0;
  double mean_abs_advantage = 0.0;
  int effective_groups = 0;
};

/// One ascent step on the batch. Refreshes cur_logp in the groups after the
/// update so repeated calls implement multiple epochs over one rollout batch.
StepReport policy_gradient_step(Policy& policy, std::vector<TrajectoryGroup>& groups,
                                const GrpoConfig& config, const Policy& init_policy);

/// Normalized pi_init(y) * exp(r(y) / beta). A constant reward leaves the
/// distribution unchanged.
std::vector<double> tilted_optimal_policy(std::span<const double> init_distribution,
                                          std::span<const double> rewards, double beta);

/// Exhaustive-expectation objective for single-token tabular policies:
///   J(theta) = E_{pi_theta}[r] - beta * KL(pi_theta || pi_init).
/// Its gradient vanishes exactly at the tilted optimal policy.
double exact_unclipped_objective(const Policy& policy, const Policy& init_policy, int prompt,
                                 std::span<const double> reward_per_token, double beta);
std::vector<double> exact_unclipped_gradient(const Policy& policy, const Policy& init_policy,
                                             int prompt, std::span<const double> reward_per_token,
                                             double beta);

// ---------------------------------------------------------------------------
// Toy policy: tabular softmax over a finite answer vocabulary per prompt.
// Trajectories are single-token by default; chain mode draws several i.i.d.
// tokens per trajectory to exercise the per-token loop.
// ---------------------------------------------------------------------------

class TabularSoftmaxPolicy final : public Policy {
 public:
  TabularSoftmaxPolicy(int num_prompts, int vocab_size, int chain_len = 1);

  int num_prompts() const { return num_prompts_; }
  int vocab_size() const { return vocab_size_; }
  int chain_len() const { return chain_len_; }

  /// Sets the prompt's softmax row so its distribution equals probs.
  void set_distribution(int prompt, std::span<const double> probs);

  std::vector<double> distribution(int prompt) const;

  std::size_t num_parameters() const override;
  std::vector<double> parameters() const override;
  void set_parameters(std::span<const double> params) override;
  std::vector<Trajectory> sample(int prompt, int count, Rng& rng) const override;
  std::vector<double> token_log_probs(int prompt, const Trajectory& y) const override;
  std::vector<double> token_log_prob_grad(int prompt, const Trajectory& y,
                                          std::size_t t) const override;
  std::optional<std::vector<double>> full_distribution(int prompt) const override;
  std::optional<double> exact_kl(int prompt, const Policy& reference) const override;
  std::optional<std::vector<double>> exact_kl_grad(int prompt, const Policy& reference) const override;
  std::unique_ptr<Policy> clone() const override;

 private:
  std::vector<double> log_softmax_row(int prompt) const;

  int num_prompts_;
  int vocab_size_;
  int chain_len_;
  std::vector<double> logits_;  // num_prompts x vocab_size, row-major
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Binary reward for a rollout; nullopt marks a verifier failure (the whole
/// group is skipped and logged).
using RewardFn = std::function<std::optional<double>(int prompt, const Trajectory& y)>;

struct TrainOptions {
  int steps = 20;  // rollout batches; pi_old refreshes per batch
  std::uint64_t seed = 0;
  bool parallel_rollouts = true;
};

struct TrainResult {
  std::vector<StepReport> steps;
  int skipped_groups = 0;  // verifier failures
};

/// Rolls out group_size trajectories per prompt under a frozen snapshot,
/// verifies rewards, normalizes advantages, and applies epochs_per_batch
/// ascent steps per rollout batch. pi_init is snapshotted once at entry and
/// held fixed for the KL term.
TrainResult train_iteration(Policy& policy, const std::vector<int>& prompts, const RewardFn& reward,
                            const GrpoConfig& config, const TrainOptions& options);

// ---------------------------------------------------------------------------
// Checkpoints: flat parameter vector plus config, versioned header.
// ---------------------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, const TabularSoftmaxPolicy& policy,
                     const GrpoConfig& config);
std::pair<TabularSoftmaxPolicy, GrpoConfig> load_checkpoint(const std::filesystem::path& path);

}  // namespace dpe::grpo
