/// @file pipeline.hpp
/// Orchestration of the full loop: diagnose -> allocate+generate -> filter
/// -> train, iterated, with per-stage artifacts persisted under the
/// workspace and a journal for resumption. Also hosts the synthetic-world
/// simulation comparing diagnosis-guided against uniform mixtures, and the
/// analysis entry points used by the CLI.
#pragma once

#include "dpe/agents.hpp"
#include "dpe/analysis.hpp"
#include "dpe/workspace.hpp"

namespace dpe::runtime {

/// Fixed epoch used for timestamps in mock runs so artifacts are
/// byte-identical across runs (2026-01-01T00:00:00Z).
inline constexpr std::int64_t kMockEpoch = 1767225600;

enum class MixtureMode { kDiagnosis, kUniform };

/// Deterministic single-image QA pool spanning all categories; the seeded
/// stand-in for a real diagnostic pool in mock runs.
std::vector<caps::DatasetRecord> make_synthetic_pool(std::uint64_t seed, int per_category);

/// Rollout policy backed by the synthetic world: answers correctly with
/// probability equal to the current per-category skill.
class WorldRolloutPolicy final : public learnability::RolloutPolicy {
 public:
  explicit WorldRolloutPolicy(const agents::SyntheticWorld& world) : world_(world) {}
  std::string rollout_answer(const caps::DatasetRecord& sample, int rollout_index) override;

 private:
  const agents::SyntheticWorld& world_;
};

/// Rollout policy backed by a chat client (service mode).
class ChatRolloutPolicy final : public learnability::RolloutPolicy {
 public:
  explicit ChatRolloutPolicy(std::shared_ptr<agents::ChatClient> client)
      : client_(std::move(client)) {}
  std::string rollout_answer(const caps::DatasetRecord& sample, int rollout_index) override;

 private:
  std::shared_ptr<agents::ChatClient> client_;
};

struct EvolveOptions {
  MixtureMode mixture_mode = MixtureMode::kDiagnosis;
  bool force = false;
  /// Stop after completing this (iteration, stage); used to exercise
  /// resumption. No summary is written when halting early.
  std::optional<std::pair<int, Stage>> halt_after;
};

class Pipeline {
 public:
  explicit Pipeline(RunConfig config);

  const RunConfig& config() const { return config_; }
  const Workspace& workspace() const { return workspace_; }
  const Clock& clock() const { return *clock_; }

  /// Mock hub (mock mode only; null otherwise). Exposed for tests and the
  /// adversarial acceptance runs.
  agents::MockHub* mock_hub() { return hub_.get(); }

  // Stage runners. Each reads its inputs from the workspace, writes its
  // artifacts there, and returns the in-memory result.
  diagnosis::DiagnosticReport run_diagnose(int iteration);
  questioner::GenerationOutcome run_generate(int iteration,
                                             MixtureMode mode = MixtureMode::kDiagnosis);
  learnability::FilterOutcome run_filter(int iteration);
  grpo::TrainResult run_train(int iteration);

  /// The composed loop with journaled resumption.
  void evolve(const EvolveOptions& options = {});

  /// Paired simulation: evolve under the diagnosis-guided mixture and under
  /// a uniform mixture with identical seeds, then compare final per-category
  /// skills. Returns the comparison report (also persisted).
  json simulate(bool force = false);

  json run_diversity(const std::filesystem::path& dataset_path, const std::string& modality,
                     const std::filesystem::path& output_dir);
  json run_quality(const std::filesystem::path& dataset_path, int n_sample,
                   const std::filesystem::path& output_dir);

  void write_summary();

 private:
  std::vector<caps::DiagnosticInstance> load_pool();
  agents::SyntheticWorld world_at_iteration_start(int iteration);
  std::shared_ptr<agents::ChatClient> chat_for(const std::string& role,
                                               const std::string& model_override = "");
  questioner::AgentClients agent_clients();

  RunConfig config_;
  Workspace workspace_;
  std::unique_ptr<Clock> clock_;
  std::unique_ptr<agents::MockHub> hub_;
};

}  // namespace dpe::runtime
