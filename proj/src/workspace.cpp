#include "dpe/workspace.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>

#include <nlohmann/json.hpp>

namespace dpe::runtime {

namespace {

std::string trim_copy(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return std::string(s);
}

std::string upper_copy(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// ConfigFile
// ---------------------------------------------------------------------------

ConfigFile ConfigFile::load(const std::filesystem::path& path) {
  ConfigFile cfg;
  std::string section = "run";
  std::size_t lineno = 0;
  for (const auto& raw : read_lines(path)) {
    ++lineno;
    std::string line = trim_copy(raw);
    if (line.empty() || line[0] == '#') continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": malformed section header");
      }
      section = trim_copy(std::string_view(line).substr(1, line.size() - 2));
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim_copy(std::string_view(line).substr(0, eq));
    const std::string value = trim_copy(std::string_view(line).substr(eq + 1));
    if (key.empty()) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": empty key");
    }
    cfg.sections_[section][key] = value;
  }
  return cfg;
}

std::optional<std::string> ConfigFile::lookup(const std::string& section,
                                              const std::string& key) const {
  const std::string env_name = "DPE_" + upper_copy(section) + "_" + upper_copy(key);
  if (const char* env = std::getenv(env_name.c_str()); env != nullptr && *env != '\0') {
    return std::string(env);
  }
  auto sec = sections_.find(section);
  if (sec == sections_.end()) return std::nullopt;
  auto it = sec->second.find(key);
  if (it == sec->second.end()) return std::nullopt;
  return it->second;
}

std::string ConfigFile::get(const std::string& section, const std::string& key,
                            const std::string& fallback) const {
  return lookup(section, key).value_or(fallback);
}

long long ConfigFile::get_int(const std::string& section, const std::string& key,
                              long long fallback) const {
  auto v = lookup(section, key);
  if (!v) return fallback;
  try {
    return std::stoll(*v);
  } catch (const std::exception&) {
    throw ConfigError(section + "." + key + ": not an integer: '" + *v + "'");
  }
}

double ConfigFile::get_double(const std::string& section, const std::string& key,
                              double fallback) const {
  auto v = lookup(section, key);
  if (!v) return fallback;
  try {
    return std::stod(*v);
  } catch (const std::exception&) {
    throw ConfigError(section + "." + key + ": not a number: '" + *v + "'");
  }
}

bool ConfigFile::get_bool(const std::string& section, const std::string& key, bool fallback) const {
  auto v = lookup(section, key);
  if (!v) return fallback;
  std::string s = *v;
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError(section + "." + key + ": not a boolean: '" + *v + "'");
}

std::vector<double> ConfigFile::get_doubles(const std::string& section, const std::string& key,
                                            const std::vector<double>& fallback) const {
  auto v = lookup(section, key);
  if (!v) return fallback;
  std::vector<double> out;
  std::size_t start = 0;
  while (start <= v->size()) {
    std::size_t comma = v->find(',', start);
    const std::string piece = trim_copy(
        std::string_view(*v).substr(start, comma == std::string::npos ? v->size() - start
                                                                      : comma - start));
    if (!piece.empty()) {
      try {
        out.push_back(std::stod(piece));
      } catch (const std::exception&) {
        throw ConfigError(section + "." + key + ": not a number list: '" + *v + "'");
      }
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// RunConfig
// ---------------------------------------------------------------------------

RunConfig RunConfig::from_file(const ConfigFile& f) {
  RunConfig c;
  c.iterations = static_cast<int>(f.get_int("run", "iterations", c.iterations));
  c.diagnostic_n = static_cast<int>(f.get_int("run", "diagnostic_n", c.diagnostic_n));
  c.budget = f.get_int("run", "budget", c.budget);
  c.seed = static_cast<std::uint64_t>(f.get_int("run", "seed", static_cast<long long>(c.seed)));
  c.mock = f.get_bool("run", "mock", c.mock);
  c.fixed_diagnostic_draw = f.get_bool("run", "fixed_diagnostic_draw", c.fixed_diagnostic_draw);
  c.concurrency = static_cast<int>(f.get_int("run", "concurrency", c.concurrency));
  c.workspace = f.get("run", "workspace", c.workspace.string());
  c.pool_path = f.get("paths", "pool", "");

  c.bands = diagnosis::WeightBands(
      f.get_doubles("bands", "thresholds", {0.3, 0.5, 0.7, 0.9}),
      f.get_doubles("bands", "weights", {4.0, 3.0, 2.0, 1.0, 0.5}),
      f.get_double("bands", "default_weight", 1.0));

  c.filter.rollouts = static_cast<int>(f.get_int("filter", "rollouts", c.filter.rollouts));
  c.filter.p_lo = f.get_double("filter", "p_lo", c.filter.p_lo);
  c.filter.p_hi = f.get_double("filter", "p_hi", c.filter.p_hi);
  c.filter.beta = f.get_double("filter", "beta", c.filter.beta);

  c.grpo.clip_epsilon = f.get_double("grpo", "clip_epsilon", c.grpo.clip_epsilon);
  c.grpo.kl_beta = f.get_double("grpo", "kl_beta", c.grpo.kl_beta);
  c.grpo.group_size = static_cast<int>(f.get_int("grpo", "group_size", c.grpo.group_size));
  c.grpo.learning_rate = f.get_double("grpo", "learning_rate", c.grpo.learning_rate);
  c.grpo.epochs_per_batch =
      static_cast<int>(f.get_int("grpo", "epochs_per_batch", c.grpo.epochs_per_batch));
  c.grpo.std_floor = f.get_double("grpo", "std_floor", c.grpo.std_floor);
  c.train_steps = static_cast<int>(f.get_int("grpo", "train_steps", c.train_steps));

  c.generation.retry_budget =
      static_cast<int>(f.get_int("generation", "retry_budget", c.generation.retry_budget));
  c.generation.image_filter.top_k =
      static_cast<int>(f.get_int("generation", "top_k", c.generation.image_filter.top_k));
  c.generation.image_filter.min_width =
      static_cast<int>(f.get_int("generation", "min_width", c.generation.image_filter.min_width));
  c.generation.image_filter.min_height =
      static_cast<int>(f.get_int("generation", "min_height", c.generation.image_filter.min_height));
  c.generation.image_filter.max_bytes =
      f.get_int("generation", "max_bytes", c.generation.image_filter.max_bytes);
  c.generation.dedup_questions = f.get_bool("generation", "dedup", c.generation.dedup_questions);

  c.world.delta = f.get_double("world", "delta", c.world.delta);
  c.world.skill_lo = f.get_double("world", "skill_lo", c.world.skill_lo);
  c.world.skill_hi = f.get_double("world", "skill_hi", c.world.skill_hi);

  c.chat_base_url = f.get("clients", "chat_base_url", "");
  c.search_base_url = f.get("clients", "search_base_url", "");
  c.edit_base_url = f.get("clients", "edit_base_url", "");
  c.embed_base_url = f.get("clients", "embed_base_url", "");
  for (const char* role : {"responder", "step_verifier", "analyst", "planner", "generator",
                           "validator", "classifier", "judge", "embedder"}) {
    const std::string model = f.get("clients", std::string(role) + "_model", "");
    if (!model.empty()) c.role_models[role] = model;
  }
  const std::string judges = f.get("clients", "judge_models", "");
  std::size_t start = 0;
  while (start <= judges.size() && !judges.empty()) {
    std::size_t comma = judges.find(',', start);
    const std::string piece = trim_copy(std::string_view(judges).substr(
        start, comma == std::string::npos ? judges.size() - start : comma - start));
    if (!piece.empty()) c.judge_models.push_back(piece);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  c.validate();
  return c;
}

void RunConfig::validate() const {
  if (iterations < 1) throw ConfigError("iterations must be >= 1");
  if (diagnostic_n < 1) throw ConfigError("diagnostic_n must be >= 1");
  if (budget < 1) throw ConfigError("budget must be >= 1");
  if (concurrency < 1) throw ConfigError("concurrency must be >= 1");
  if (train_steps < 1) throw ConfigError("train_steps must be >= 1");
  if (workspace.empty()) throw ConfigError("workspace must be set");
  filter.validate();
  grpo.validate();
  if (!(world.delta >= 0.0 && world.delta <= 1.0)) throw ConfigError("world delta outside [0,1]");
  if (!(world.skill_lo >= 0.0 && world.skill_hi <= 1.0 && world.skill_lo <= world.skill_hi)) {
    throw ConfigError("world skill range invalid");
  }
}

std::uint64_t RunConfig::diagnostic_seed(int iteration) const {
  if (fixed_diagnostic_draw) return mix64(seed, fnv1a64("diagnostic-fixed"));
  return mix64(mix64(seed, fnv1a64("diagnostic-iter")), static_cast<std::uint64_t>(iteration));
}

// ---------------------------------------------------------------------------
// Workspace
// ---------------------------------------------------------------------------

std::filesystem::path Workspace::iteration_dir(int k) const {
  return root / "iterations" / std::to_string(k);
}

void Workspace::ensure_root() const {
  std::error_code ec;
  std::filesystem::create_directories(root, ec);
  if (ec) throw ConfigError("workspace is not writable: " + root.string());
}

// ---------------------------------------------------------------------------
// Journal
// ---------------------------------------------------------------------------

std::string_view stage_id(Stage s) {
  switch (s) {
    case Stage::kDiagnose: return "diagnose";
    case Stage::kGenerate: return "generate";
    case Stage::kFilter: return "filter";
    case Stage::kTrain: return "train";
  }
  return "diagnose";
}

bool Journal::is_done(int iteration, Stage stage) const {
  if (!std::filesystem::exists(path_)) return false;
  for (const auto& j : read_jsonl(path_)) {
    if (j.value("iteration", -1) == iteration && j.value("stage", "") == stage_id(stage) &&
        j.value("status", "") == "done") {
      return true;
    }
  }
  return false;
}

void Journal::mark_done(int iteration, Stage stage, const Clock& clock) {
  std::ofstream out(path_, std::ios::app);
  if (!out) throw InvariantError("cannot append to journal: " + path_.string());
  json j{{"iteration", iteration},
         {"stage", std::string(stage_id(stage))},
         {"status", "done"},
         {"at", format_rfc3339(clock.now_epoch_seconds())}};
  out << j.dump() << "\n";
}

void Journal::clear() {
  std::error_code ec;
  std::filesystem::remove(path_, ec);
}

}  // namespace dpe::runtime
