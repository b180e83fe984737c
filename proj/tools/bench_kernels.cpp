// Benchmark comparing the OpenMP kernels against their serial references:
// the pairwise-cosine diversity score and the GRPO batch objective/gradient.
// Also verifies that parallel and serial paths agree bit for bit.

#include <chrono>
#include <cstdio>
#include <functional>

#include "dpe/analysis.hpp"
#include "dpe/grpo.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace {

using Clock = std::chrono::steady_clock;

double time_best_of(int reps, const std::function<void()>& fn) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = Clock::now();
    fn();
    const auto t1 = Clock::now();
    best = std::min(best, std::chrono::duration<double>(t1 - t0).count());
  }
  return best;
}

dpe::analysis::EmbeddingSet random_embeddings(std::size_t n, int dim, std::uint64_t seed) {
  dpe::Rng rng(seed);
  dpe::analysis::EmbeddingSet set;
  set.modality = "text";
  for (std::size_t i = 0; i < n; ++i) {
    set.ids.push_back("v" + std::to_string(i));
    std::vector<double> v(static_cast<std::size_t>(dim));
    for (auto& x : v) x = rng.next_gaussian();
    set.vectors.push_back(std::move(v));
  }
  return set;
}

std::vector<dpe::grpo::TrajectoryGroup> random_groups(const dpe::grpo::TabularSoftmaxPolicy& policy,
                                                      int num_prompts, int group_size,
                                                      std::uint64_t seed) {
  dpe::Rng rng(seed);
  std::vector<dpe::grpo::TrajectoryGroup> groups;
  for (int p = 0; p < num_prompts; ++p) {
    dpe::grpo::TrajectoryGroup g;
    g.prompt = p;
    g.trajectories = policy.sample(p, group_size, rng);
    for (const auto& y : g.trajectories) {
      g.rewards.push_back(static_cast<double>(rng.below(2)));
      auto lp = policy.token_log_probs(p, y);
      g.old_logp.push_back(lp);
      g.init_logp.push_back(lp);
      // Perturbed current log-probs so ratios are not trivially 1.
      for (auto& v : lp) v += 0.05 * (rng.next_double() - 0.5);
      g.cur_logp.push_back(lp);
    }
    dpe::grpo::normalize_group(g, 1e-8);
    groups.push_back(std::move(g));
  }
  return groups;
}

}  // namespace

int main() {
#ifdef _OPENMP
  std::printf("OpenMP enabled, max threads = %d\n\n", omp_get_max_threads());
#else
  std::printf("OpenMP disabled: parallel kernels fall back to serial\n\n");
#endif

  {
    const auto set = random_embeddings(1500, 256, 0x5eedull);
    double serial_result = 0.0, parallel_result = 0.0;
    const double t_serial =
        time_best_of(3, [&] { serial_result = dpe::analysis::diversity_serial(set); });
    const double t_parallel =
        time_best_of(3, [&] { parallel_result = dpe::analysis::diversity(set); });
    std::printf("diversity (N=%zu, d=%d)\n", set.size(), set.dimension());
    std::printf("  serial    %8.2f ms   score %.15f\n", t_serial * 1e3, serial_result);
    std::printf("  parallel  %8.2f ms   score %.15f\n", t_parallel * 1e3, parallel_result);
    std::printf("  speedup   %8.2fx   bit-identical: %s\n\n", t_serial / t_parallel,
                serial_result == parallel_result ? "yes" : "NO");
  }

  {
    const int prompts = 384;
    dpe::grpo::TabularSoftmaxPolicy policy(prompts, 8, 4);
    dpe::grpo::TabularSoftmaxPolicy init = policy;
    const auto groups = random_groups(policy, prompts, 8, 0xbeefull);
    dpe::grpo::GrpoConfig cfg;

    double j_serial = 0.0, j_parallel = 0.0;
    const double t_obj_serial = time_best_of(
        3, [&] { j_serial = dpe::grpo::batch_objective_serial(groups, cfg, &policy, &init); });
    const double t_obj_parallel =
        time_best_of(3, [&] { j_parallel = dpe::grpo::batch_objective(groups, cfg, &policy, &init); });
    std::printf("grpo batch objective (%d groups, G=8, |y|=4)\n", prompts);
    std::printf("  serial    %8.2f ms   J %.15f\n", t_obj_serial * 1e3, j_serial);
    std::printf("  parallel  %8.2f ms   J %.15f\n", t_obj_parallel * 1e3, j_parallel);
    std::printf("  speedup   %8.2fx   bit-identical: %s\n\n", t_obj_serial / t_obj_parallel,
                j_serial == j_parallel ? "yes" : "NO");

    std::vector<double> g_serial, g_parallel;
    const double t_grad_serial = time_best_of(
        3, [&] { g_serial = dpe::grpo::batch_gradient_serial(groups, cfg, policy, init); });
    const double t_grad_parallel =
        time_best_of(3, [&] { g_parallel = dpe::grpo::batch_gradient(groups, cfg, policy, init); });
    double max_diff = 0.0;
    for (std::size_t k = 0; k < g_serial.size(); ++k) {
      max_diff = std::max(max_diff, std::fabs(g_serial[k] - g_parallel[k]));
    }
    std::printf("grpo batch gradient (%zu parameters)\n", g_serial.size());
    std::printf("  serial    %8.2f ms\n", t_grad_serial * 1e3);
    std::printf("  parallel  %8.2f ms\n", t_grad_parallel * 1e3);
    std::printf("  speedup   %8.2fx   max |diff| = %.3g (%s)\n", t_grad_serial / t_grad_parallel,
                max_diff, max_diff == 0.0 ? "bit-identical" : "DIFFERS");
  }
  return 0;
}
