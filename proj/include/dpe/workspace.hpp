/// @file workspace.hpp
/// Run configuration (key-value file with sections plus environment
/// overrides), the on-disk workspace layout, and the append-only stage
/// journal that makes the evolve loop resumable.
#pragma once

#include <map>

#include "dpe/common.hpp"
#include "dpe/diagnosis.hpp"
#include "dpe/grpo.hpp"
#include "dpe/learnability.hpp"
#include "dpe/questioner.hpp"

namespace dpe::runtime {

// ---------------------------------------------------------------------------
// Config file: "[section]" headers, "key = value" lines, '#' comments.
// Environment variables DPE_<SECTION>_<KEY> override file values.
// ---------------------------------------------------------------------------

class ConfigFile {
 public:
  static ConfigFile load(const std::filesystem::path& path);
  static ConfigFile empty() { return ConfigFile(); }

  std::string get(const std::string& section, const std::string& key,
                  const std::string& fallback) const;
  long long get_int(const std::string& section, const std::string& key, long long fallback) const;
  double get_double(const std::string& section, const std::string& key, double fallback) const;
  bool get_bool(const std::string& section, const std::string& key, bool fallback) const;
  std::vector<double> get_doubles(const std::string& section, const std::string& key,
                                  const std::vector<double>& fallback) const;

 private:
  std::optional<std::string> lookup(const std::string& section, const std::string& key) const;
  std::map<std::string, std::map<std::string, std::string>> sections_;
};

struct WorldConfig {
  double delta = 0.02;
  double skill_lo = 0.2;
  double skill_hi = 0.9;
};

struct RunConfig {
  int iterations = 3;
  int diagnostic_n = 200;
  long long budget = 4000;
  std::uint64_t seed = 1;
  bool mock = false;
  bool fixed_diagnostic_draw = false;  // default: fresh draw per iteration
  int concurrency = 4;
  std::filesystem::path workspace = "workspace";
  std::filesystem::path pool_path;  // seed/diagnostic pool JSONL

  diagnosis::WeightBands bands = diagnosis::WeightBands::defaults();
  learnability::FilterConfig filter;
  grpo::GrpoConfig grpo;
  int train_steps = 12;
  questioner::GenerationConfig generation;
  WorldConfig world;

  // HTTP client settings; credentials come from the environment only.
  std::string chat_base_url;
  std::string search_base_url;
  std::string edit_base_url;
  std::string embed_base_url;
  std::map<std::string, std::string> role_models;  // role -> model identifier
  std::vector<std::string> judge_models;           // independent judges for quality scoring

  static RunConfig from_file(const ConfigFile& file);
  void validate() const;

  /// Per-iteration diagnostic seed: fresh by default, pinned when
  /// fixed_diagnostic_draw is set.
  std::uint64_t diagnostic_seed(int iteration) const;
};

// ---------------------------------------------------------------------------
// Workspace layout
// ---------------------------------------------------------------------------

struct Workspace {
  std::filesystem::path root;

  std::filesystem::path iteration_dir(int k) const;
  std::filesystem::path report_path(int k) const { return iteration_dir(k) / "report.json"; }
  std::filesystem::path dataset_path(int k) const { return iteration_dir(k) / "dataset.jsonl"; }
  std::filesystem::path manifest_path(int k) const { return iteration_dir(k) / "manifest.json"; }
  std::filesystem::path train_dataset_path(int k) const {
    return iteration_dir(k) / "train_dataset.jsonl";
  }
  std::filesystem::path profiles_path(int k) const { return iteration_dir(k) / "profiles.jsonl"; }
  std::filesystem::path metrics_path(int k) const { return iteration_dir(k) / "metrics.jsonl"; }
  std::filesystem::path checkpoint_path(int k) const { return iteration_dir(k) / "checkpoint.json"; }
  std::filesystem::path world_path(int k) const { return iteration_dir(k) / "world.json"; }
  std::filesystem::path journal_path() const { return root / "journal.jsonl"; }
  std::filesystem::path summary_path() const { return root / "summary.json"; }
  std::filesystem::path default_pool_path() const { return root / "seed_pool.jsonl"; }

  void ensure_root() const;
};

// ---------------------------------------------------------------------------
// Stage journal
// ---------------------------------------------------------------------------

enum class Stage { kDiagnose, kGenerate, kFilter, kTrain };

std::string_view stage_id(Stage s);

class Journal {
 public:
  explicit Journal(std::filesystem::path path) : path_(std::move(path)) {}

  bool is_done(int iteration, Stage stage) const;
  void mark_done(int iteration, Stage stage, const Clock& clock);
  void clear();

 private:
  std::filesystem::path path_;
};

}  // namespace dpe::runtime
