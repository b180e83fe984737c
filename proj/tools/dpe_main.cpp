// dpe — diagnostic-driven progressive evolution pipeline.
//
// Subcommands map one-to-one onto pipeline stages; `evolve` runs the full
// loop with journaled resumption and `simulate` compares diagnosis-guided
// against uniform data mixtures on the synthetic world.

#include <iostream>

#include <CLI11.hpp>

#include "dpe/pipeline.hpp"

namespace {

using dpe::runtime::ConfigFile;
using dpe::runtime::Pipeline;
using dpe::runtime::RunConfig;

struct GlobalArgs {
  std::string config_path;
  std::string workspace;
  long long seed = -1;
  bool mock = false;
  bool force = false;
};

RunConfig build_config(const GlobalArgs& args) {
  if (!args.config_path.empty() && !std::filesystem::exists(args.config_path)) {
    throw dpe::ConfigError("config file not found: " + args.config_path);
  }
  ConfigFile file = args.config_path.empty() ? ConfigFile::empty()
                                             : ConfigFile::load(args.config_path);
  RunConfig cfg = RunConfig::from_file(file);
  if (!args.workspace.empty()) cfg.workspace = args.workspace;
  if (args.seed >= 0) cfg.seed = static_cast<std::uint64_t>(args.seed);
  if (args.mock) cfg.mock = true;
  cfg.validate();
  return cfg;
}

void print_mixture(const dpe::diagnosis::DiagnosticReport& report) {
  std::cout << "iteration " << report.iteration << ", sample_size " << report.sample_size << "\n";
  for (const auto& info : dpe::caps::all_categories()) {
    const auto& stats = report.stats_for(info.value);
    std::cout << "  " << info.id << ": n=" << stats.count << " acc=";
    if (auto acc = stats.accuracy()) {
      std::cout << *acc;
    } else {
      std::cout << "-";
    }
    std::cout << " alpha=" << report.mixture.weight(info.value) << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diagnostic-driven progressive evolution pipeline"};
  app.require_subcommand(1);

  GlobalArgs globals;
  app.add_option("--config", globals.config_path, "Config file (key = value sections)");
  app.add_option("--workspace", globals.workspace, "Workspace directory");
  app.add_option("--seed", globals.seed, "Seed override");
  app.add_flag("--mock", globals.mock, "Force deterministic mock clients");
  app.add_flag("--force", globals.force, "Re-run completed stages");

  int iteration = 0;
  bool uniform_mixture = false;
  std::string input_path;
  std::string modality = "text";
  int n_sample = 200;
  std::string output_dir;

  auto* cmd_diagnose = app.add_subcommand("diagnose", "Sample, score, and build the report");
  cmd_diagnose->add_option("--iteration", iteration, "Iteration index");

  auto* cmd_generate = app.add_subcommand("generate", "Generate the quota-exact training set");
  cmd_generate->add_option("--iteration", iteration, "Iteration index");
  cmd_generate->add_flag("--uniform-mixture", uniform_mixture,
                         "Ignore the diagnosed mixture and allocate uniformly");

  auto* cmd_filter = app.add_subcommand("filter", "Difficulty-aware learnability filter");
  cmd_filter->add_option("--iteration", iteration, "Iteration index");

  auto* cmd_train = app.add_subcommand("train", "Group-relative policy update on the kept set");
  cmd_train->add_option("--iteration", iteration, "Iteration index");

  auto* cmd_evolve = app.add_subcommand("evolve", "Run the full loop for all iterations");
  cmd_evolve->add_flag("--uniform-mixture", uniform_mixture,
                       "Use a uniform mixture in every iteration");

  auto* cmd_simulate =
      app.add_subcommand("simulate", "Compare diagnosis-guided vs uniform mixtures (mock world)");

  auto* cmd_diversity = app.add_subcommand("diversity", "Mean pairwise cosine distance of a dataset");
  cmd_diversity->add_option("--input", input_path, "Dataset JSONL")->required();
  cmd_diversity->add_option("--modality", modality, "text | image");
  cmd_diversity->add_option("--out", output_dir, "Output directory (default: workspace/analysis)");

  auto* cmd_quality = app.add_subcommand("quality", "Multi-judge question quality scoring");
  cmd_quality->add_option("--input", input_path, "Dataset JSONL")->required();
  cmd_quality->add_option("--n", n_sample, "Sample size");
  cmd_quality->add_option("--out", output_dir, "Output directory (default: workspace/analysis)");

  CLI11_PARSE(app, argc, argv);

  try {
    RunConfig cfg = build_config(globals);
    Pipeline pipeline(cfg);
    const std::filesystem::path analysis_dir =
        output_dir.empty() ? cfg.workspace / "analysis" : std::filesystem::path(output_dir);

    // Stage subcommands are journaled no-ops once completed, unless --force.
    dpe::runtime::Journal journal(pipeline.workspace().journal_path());
    const auto stage_gate = [&](dpe::runtime::Stage stage,
                                const std::filesystem::path& artifact) {
      if (globals.force) return false;
      if (journal.is_done(iteration, stage) && std::filesystem::exists(artifact)) {
        std::cout << dpe::runtime::stage_id(stage) << " already completed for iteration "
                  << iteration << " (" << artifact.string() << "); use --force to re-run\n";
        return true;
      }
      return false;
    };

    if (cmd_diagnose->parsed()) {
      if (!stage_gate(dpe::runtime::Stage::kDiagnose, pipeline.workspace().report_path(iteration))) {
        auto report = pipeline.run_diagnose(iteration);
        journal.mark_done(iteration, dpe::runtime::Stage::kDiagnose, pipeline.clock());
        print_mixture(report);
        std::cout << "report: " << pipeline.workspace().report_path(iteration).string() << "\n";
      }
    } else if (cmd_generate->parsed()) {
      if (!stage_gate(dpe::runtime::Stage::kGenerate, pipeline.workspace().dataset_path(iteration))) {
        auto outcome = pipeline.run_generate(
            iteration, uniform_mixture ? dpe::runtime::MixtureMode::kUniform
                                       : dpe::runtime::MixtureMode::kDiagnosis);
        journal.mark_done(iteration, dpe::runtime::Stage::kGenerate, pipeline.clock());
        std::cout << "accepted " << outcome.manifest.accepted << ", rejected "
                  << outcome.manifest.rejected << "\n"
                  << "dataset: " << pipeline.workspace().dataset_path(iteration).string() << "\n";
      }
    } else if (cmd_filter->parsed()) {
      if (!stage_gate(dpe::runtime::Stage::kFilter,
                      pipeline.workspace().train_dataset_path(iteration))) {
        auto outcome = pipeline.run_filter(iteration);
        journal.mark_done(iteration, dpe::runtime::Stage::kFilter, pipeline.clock());
        std::cout << "kept " << outcome.kept.size() << " of " << outcome.profiles.size() << "\n"
                  << "profiles: " << pipeline.workspace().profiles_path(iteration).string() << "\n";
      }
    } else if (cmd_train->parsed()) {
      if (!stage_gate(dpe::runtime::Stage::kTrain,
                      pipeline.workspace().checkpoint_path(iteration))) {
        auto result = pipeline.run_train(iteration);
        journal.mark_done(iteration, dpe::runtime::Stage::kTrain, pipeline.clock());
        std::cout << "steps " << result.steps.size() << ", skipped groups "
                  << result.skipped_groups << "\n"
                  << "checkpoint: " << pipeline.workspace().checkpoint_path(iteration).string()
                  << "\n";
      }
    } else if (cmd_evolve->parsed()) {
      dpe::runtime::EvolveOptions options;
      options.force = globals.force;
      options.mixture_mode = uniform_mixture ? dpe::runtime::MixtureMode::kUniform
                                             : dpe::runtime::MixtureMode::kDiagnosis;
      pipeline.evolve(options);
      std::cout << "summary: " << pipeline.workspace().summary_path().string() << "\n";
    } else if (cmd_simulate->parsed()) {
      auto comparison = pipeline.simulate(globals.force);
      std::cout << "guided min skill:  " << comparison["guided"]["min_skill"] << "\n"
                << "uniform min skill: " << comparison["uniform"]["min_skill"] << "\n"
                << "delta:             " << comparison["min_skill_delta"] << "\n"
                << "comparison: " << (cfg.workspace / "comparison.json").string() << "\n";
    } else if (cmd_diversity->parsed()) {
      auto report = pipeline.run_diversity(input_path, modality, analysis_dir);
      std::cout << "diversity(" << modality << ") = " << report["diversity"] << " over n="
                << report["n"] << "\n";
    } else if (cmd_quality->parsed()) {
      auto report = pipeline.run_quality(input_path, n_sample, analysis_dir);
      std::cout << "QS = " << report["qs"] << " over n=" << report["n"] << "\n";
    }
  } catch (const dpe::Error& e) {
    std::cerr << "dpe: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "dpe: unexpected error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
