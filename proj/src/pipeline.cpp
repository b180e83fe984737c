#include "dpe/pipeline.hpp"

#include <algorithm>
#include <cstdlib>
#include <iostream>

#include <nlohmann/json.hpp>

namespace dpe::runtime {

// ---------------------------------------------------------------------------
// Synthetic pool
// ---------------------------------------------------------------------------

namespace {

const std::array<const char*, 8> kLabelWords = {"alpha", "beta",  "gamma", "delta",
                                                "epsilon", "zeta", "eta",   "theta"};

}  // namespace

std::vector<caps::DatasetRecord> make_synthetic_pool(std::uint64_t seed, int per_category) {
  if (per_category < 1) throw ConfigError("pool needs at least one instance per category");
  std::vector<caps::DatasetRecord> pool;
  pool.reserve(static_cast<std::size_t>(per_category) * caps::kNumCategories);
  for (const auto& info : caps::all_categories()) {
    for (int i = 0; i < per_category; ++i) {
      const std::uint64_t h =
          mix64(mix64(seed, fnv1a64(info.id)), static_cast<std::uint64_t>(i));
      caps::DatasetRecord rec;
      rec.id = "pool-" + std::string(info.id) + "-" + std::to_string(i);
      rec.image.source = caps::ImageSource::kRemoteUrl;
      rec.image.locator = "mock://seed/" + hex_tag(h, 12);
      rec.image.provenance = caps::Provenance::kSeed;
      rec.category = info.value;
      const std::string item = hex_tag(splitmix64(h), 6);
      switch (i % 3) {
        case 0: {
          const char answer = static_cast<char>('A' + splitmix64(h ^ 0x1ull) % 4);
          rec.question = "Which option is marked in panel #" + item +
                         "? (A) alpha (B) beta (C) gamma (D) delta";
          rec.answer = std::string(1, answer);
          rec.answer_kind = caps::AnswerKind::kChoice;
          break;
        }
        case 1: {
          rec.question = "How many highlighted items appear in panel #" + item + "?";
          rec.answer = std::to_string(2 + splitmix64(h ^ 0x2ull) % 97);
          rec.answer_kind = caps::AnswerKind::kNumeric;
          break;
        }
        default: {
          rec.question = "What single word labels panel #" + item + "?";
          rec.answer = kLabelWords[splitmix64(h ^ 0x3ull) % kLabelWords.size()];
          rec.answer_kind = caps::AnswerKind::kExact;
          break;
        }
      }
      rec.meta = json::object();
      pool.push_back(std::move(rec));
    }
  }
  return pool;
}

// ---------------------------------------------------------------------------
// Rollout policies
// ---------------------------------------------------------------------------

std::string WorldRolloutPolicy::rollout_answer(const caps::DatasetRecord& sample,
                                               int rollout_index) {
  const bool correct = world_.answers_correctly(sample.category, sample.id, rollout_index + 1);
  return correct ? sample.answer : agents::mock_wrong_answer(sample.answer, sample.answer_kind);
}

std::string ChatRolloutPolicy::rollout_answer(const caps::DatasetRecord& sample,
                                              int rollout_index) {
  agents::ChatRequest req;
  req.request_id = agents::next_request_id();
  req.temperature = 0.8;  // rollouts need sampling variety
  std::string prompt =
      "Answer the question about the attached image. Give the final answer on its own line as "
      "'Answer: <answer>'.\n\nQuestion: " +
      sample.question;
  prompt = agents::append_context_block(
      std::move(prompt),
      json{{"kind", "rollout"}, {"id", sample.id}, {"rollout", rollout_index}});
  req.messages.push_back(agents::ChatMessage{"user", std::move(prompt), {sample.image.locator}});
  return client_->chat(req).text;
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

Pipeline::Pipeline(RunConfig config) : config_(std::move(config)), workspace_{config_.workspace} {
  config_.validate();
  workspace_.ensure_root();
  if (config_.mock) {
    clock_ = std::make_unique<FixedClock>(kMockEpoch);
    hub_ = std::make_unique<agents::MockHub>(mix64(config_.seed, fnv1a64("mock-hub")));
  } else {
    clock_ = std::make_unique<SystemClock>();
  }
}

std::shared_ptr<agents::ChatClient> Pipeline::chat_for(const std::string& role,
                                                       const std::string& model_override) {
  if (hub_) {
    using agents::MockRole;
    static const std::map<std::string, MockRole> kRoles = {
        {"responder", MockRole::kResponder},   {"step_verifier", MockRole::kStepVerifier},
        {"analyst", MockRole::kAnalyst},       {"planner", MockRole::kPlanner},
        {"classifier", MockRole::kImageClassifier}, {"generator", MockRole::kGenerator},
        {"validator", MockRole::kValidator},   {"judge", MockRole::kJudge}};
    return hub_->chat_client(kRoles.at(role));
  }
  agents::HttpConfig http;
  http.base_url = config_.chat_base_url;
  if (const char* env = std::getenv(agents::kEnvChatBaseUrl); env != nullptr && *env != '\0') {
    http.base_url = env;
  }
  if (http.base_url.empty()) {
    throw ConfigError("no chat base url configured; set clients.chat_base_url or " +
                      std::string(agents::kEnvChatBaseUrl) + " (or run with --mock)");
  }
  if (const char* key = std::getenv(agents::kEnvChatApiKey)) http.api_key = key;
  http.model = model_override;
  if (http.model.empty()) {
    if (auto it = config_.role_models.find(role); it != config_.role_models.end()) {
      http.model = it->second;
    }
  }
  if (http.model.empty()) http.model = config_.role_models.count("responder")
                                           ? config_.role_models.at("responder")
                                           : "default";
  http.max_in_flight = config_.concurrency;
  return std::shared_ptr<agents::ChatClient>(agents::make_http_chat_client(http));
}

questioner::AgentClients Pipeline::agent_clients() {
  questioner::AgentClients c;
  c.planner = chat_for("planner");
  c.generator = chat_for("generator");
  c.validator = chat_for("validator");
  c.image_classifier = chat_for("classifier");
  if (hub_) {
    c.search = hub_->search_client();
    c.editor = hub_->edit_client();
  } else {
    agents::HttpConfig search_http;
    search_http.base_url = config_.search_base_url;
    if (const char* key = std::getenv(agents::kEnvSearchApiKey)) search_http.api_key = key;
    if (search_http.base_url.empty()) {
      throw ConfigError("no search base url configured; set clients.search_base_url");
    }
    agents::HttpConfig edit_http;
    edit_http.base_url = config_.edit_base_url;
    if (const char* key = std::getenv(agents::kEnvEditApiKey)) edit_http.api_key = key;
    if (edit_http.base_url.empty()) {
      throw ConfigError("no edit base url configured; set clients.edit_base_url");
    }
    c.search = std::shared_ptr<agents::SearchClient>(agents::make_http_search_client(search_http));
    c.editor = std::shared_ptr<agents::EditClient>(agents::make_http_edit_client(edit_http));
  }
  return c;
}

std::vector<caps::DiagnosticInstance> Pipeline::load_pool() {
  std::filesystem::path pool_path =
      config_.pool_path.empty() ? workspace_.default_pool_path() : config_.pool_path;
  if (!std::filesystem::exists(pool_path)) {
    throw MissingInputError("seed pool not found: " + pool_path.string());
  }
  std::vector<caps::DiagnosticInstance> instances;
  for (const auto& rec : caps::load_dataset(pool_path)) {
    instances.push_back(caps::DiagnosticInstance::from_record(rec));
  }
  if (instances.empty()) throw MissingInputError("seed pool is empty: " + pool_path.string());
  return instances;
}

agents::SyntheticWorld Pipeline::world_at_iteration_start(int iteration) {
  if (iteration == 0) {
    return agents::SyntheticWorld::seeded(mix64(config_.seed, fnv1a64("world")),
                                          config_.world.delta, config_.world.skill_lo,
                                          config_.world.skill_hi);
  }
  const auto prev = workspace_.world_path(iteration - 1);
  if (!std::filesystem::exists(prev)) {
    throw MissingInputError("world state for iteration " + std::to_string(iteration) +
                            " requires " + prev.string());
  }
  return agents::SyntheticWorld::from_json(json::parse(read_text_file(prev)));
}

diagnosis::DiagnosticReport Pipeline::run_diagnose(int iteration) {
  auto pool = load_pool();
  if (hub_) {
    hub_->set_world(world_at_iteration_start(iteration));
    hub_->register_pool(pool);
  }
  diagnosis::DiagnoseConfig dc;
  dc.sample_size = config_.diagnostic_n;
  dc.seed = config_.diagnostic_seed(iteration);
  dc.bands = config_.bands;
  dc.concurrency = config_.concurrency;
  auto responder = chat_for("responder");
  auto verifier = chat_for("step_verifier");
  auto analyst = chat_for("analyst");
  auto report = diagnosis::diagnose(pool, *responder, verifier.get(), *analyst, dc, iteration,
                                    *clock_);
  write_text_file(workspace_.report_path(iteration), report.to_json().dump(2) + "\n");
  return report;
}

questioner::GenerationOutcome Pipeline::run_generate(int iteration, MixtureMode mode) {
  const auto report_path = workspace_.report_path(iteration);
  if (!std::filesystem::exists(report_path)) {
    throw MissingInputError("diagnose has not produced " + report_path.string());
  }
  auto report = diagnosis::DiagnosticReport::from_json(json::parse(read_text_file(report_path)));
  if (mode == MixtureMode::kUniform) {
    report.mixture = diagnosis::MixtureVector::uniform();
  }
  questioner::GenerationConfig gen = config_.generation;
  gen.seed = mix64(mix64(config_.seed, fnv1a64("generate")), static_cast<std::uint64_t>(iteration));
  gen.concurrency = config_.concurrency;
  auto outcome = questioner::generate_dataset(report, config_.budget, agent_clients(), gen);
  caps::save_dataset(workspace_.dataset_path(iteration), outcome.records);
  write_text_file(workspace_.manifest_path(iteration), outcome.manifest.to_json().dump(2) + "\n");
  return outcome;
}

learnability::FilterOutcome Pipeline::run_filter(int iteration) {
  const auto dataset_path = workspace_.dataset_path(iteration);
  if (!std::filesystem::exists(dataset_path)) {
    throw MissingInputError("generate has not produced " + dataset_path.string());
  }
  const auto dataset = caps::load_dataset(dataset_path);

  learnability::FilterOutcome outcome;
  if (hub_) {
    auto world = world_at_iteration_start(iteration);
    WorldRolloutPolicy policy(world);
    outcome = learnability::filter_dataset(dataset, policy, learnability::mechanical_verifier(),
                                           config_.filter);
  } else {
    ChatRolloutPolicy policy(chat_for("responder"));
    outcome = learnability::filter_dataset(dataset, policy, learnability::mechanical_verifier(),
                                           config_.filter);
  }
  caps::save_dataset(workspace_.train_dataset_path(iteration), outcome.kept);
  std::vector<json> profile_lines;
  profile_lines.reserve(outcome.profiles.size());
  for (const auto& p : outcome.profiles) profile_lines.push_back(p.to_json());
  write_jsonl(workspace_.profiles_path(iteration), profile_lines);
  return outcome;
}

grpo::TrainResult Pipeline::run_train(int iteration) {
  const auto kept_path = workspace_.train_dataset_path(iteration);
  if (!std::filesystem::exists(kept_path)) {
    throw MissingInputError("filter has not produced " + kept_path.string());
  }
  const auto kept = caps::load_dataset(kept_path);

  // Per-sample initial correctness probability: the world skill in mock
  // mode, the measured pass rate otherwise.
  std::map<std::string, double> init_p;
  std::optional<agents::SyntheticWorld> world;
  if (hub_) {
    world = world_at_iteration_start(iteration);
    for (const auto& rec : kept) init_p[rec.id] = world->skill(rec.category);
  } else {
    for (const auto& j : read_jsonl(workspace_.profiles_path(iteration))) {
      const auto p = learnability::LearnabilityProfile::from_json(j);
      init_p[p.sample_id] = p.pass_rate;
    }
  }

  constexpr int kVocab = 4;
  grpo::TrainResult result;
  const int num_prompts = std::max<int>(1, static_cast<int>(kept.size()));
  grpo::TabularSoftmaxPolicy policy(num_prompts, kVocab);
  std::vector<int> correct_token(static_cast<std::size_t>(num_prompts), 0);

  if (!kept.empty()) {
    for (std::size_t i = 0; i < kept.size(); ++i) {
      const double p = std::clamp(init_p.count(kept[i].id) ? init_p[kept[i].id] : 0.5, 0.02, 0.98);
      correct_token[i] = static_cast<int>(splitmix64(fnv1a64(kept[i].id)) % kVocab);
      std::vector<double> dist(kVocab, (1.0 - p) / (kVocab - 1));
      dist[correct_token[i]] = p;
      policy.set_distribution(static_cast<int>(i), dist);
    }
    std::vector<int> prompts(kept.size());
    for (std::size_t i = 0; i < prompts.size(); ++i) prompts[i] = static_cast<int>(i);
    grpo::RewardFn reward = [&correct_token](int prompt,
                                             const grpo::Trajectory& y) -> std::optional<double> {
      for (int tok : y) {
        if (tok != correct_token[static_cast<std::size_t>(prompt)]) return 0.0;
      }
      return 1.0;
    };
    grpo::TrainOptions options;
    options.steps = config_.train_steps;
    options.seed = mix64(mix64(config_.seed, fnv1a64("train")), static_cast<std::uint64_t>(iteration));
    result = grpo::train_iteration(policy, prompts, reward, config_.grpo, options);
  }

  std::vector<json> metric_lines;
  for (std::size_t step = 0; step < result.steps.size(); ++step) {
    const auto& s = result.steps[step];
    metric_lines.push_back(json{{"iter", iteration},
                                {"step", step},
                                {"J", s.j_after},
                                {"kl", s.kl},
                                {"clip_frac", s.clip_fraction},
                                {"mean_abs_adv", s.mean_abs_advantage},
                                {"effective_groups", s.effective_groups}});
  }
  write_jsonl(workspace_.metrics_path(iteration), metric_lines);
  grpo::save_checkpoint(workspace_.checkpoint_path(iteration), policy, config_.grpo);

  if (world) {
    world->apply_training(kept);
    write_text_file(workspace_.world_path(iteration), world->to_json().dump(2) + "\n");
  }
  return result;
}

// ---------------------------------------------------------------------------
// Evolve loop
// ---------------------------------------------------------------------------

void Pipeline::evolve(const EvolveOptions& options) {
  Journal journal(workspace_.journal_path());
  if (options.force) journal.clear();

  const auto stage_artifact = [&](int k, Stage s) -> std::filesystem::path {
    switch (s) {
      case Stage::kDiagnose: return workspace_.report_path(k);
      case Stage::kGenerate: return workspace_.dataset_path(k);
      case Stage::kFilter: return workspace_.train_dataset_path(k);
      case Stage::kTrain: return workspace_.checkpoint_path(k);
    }
    return {};
  };

  for (int k = 0; k < config_.iterations; ++k) {
    for (Stage stage : {Stage::kDiagnose, Stage::kGenerate, Stage::kFilter, Stage::kTrain}) {
      const bool done =
          !options.force && journal.is_done(k, stage) && std::filesystem::exists(stage_artifact(k, stage));
      if (!done) {
        switch (stage) {
          case Stage::kDiagnose: run_diagnose(k); break;
          case Stage::kGenerate: run_generate(k, options.mixture_mode); break;
          case Stage::kFilter: run_filter(k); break;
          case Stage::kTrain: run_train(k); break;
        }
        journal.mark_done(k, stage, *clock_);
      }
      if (options.halt_after && options.halt_after->first == k &&
          options.halt_after->second == stage) {
        return;
      }
    }
  }
  write_summary();
}

void Pipeline::write_summary() {
  json rows = json::array();
  for (int k = 0; k < config_.iterations; ++k) {
    const auto report =
        diagnosis::DiagnosticReport::from_json(json::parse(read_text_file(workspace_.report_path(k))));
    std::optional<agents::SyntheticWorld> world;
    if (std::filesystem::exists(workspace_.world_path(k))) {
      world = agents::SyntheticWorld::from_json(json::parse(read_text_file(workspace_.world_path(k))));
    }
    for (const auto& info : caps::all_categories()) {
      const auto& stats = report.stats_for(info.value);
      json row{{"iteration", k},
               {"category", std::string(info.id)},
               {"count", stats.count},
               {"alpha", report.mixture.weight(info.value)}};
      const auto acc = stats.accuracy();
      row["accuracy"] = acc ? json(*acc) : json(nullptr);
      if (world) row["skill_after"] = world->skill(info.value);
      rows.push_back(std::move(row));
    }
  }
  json summary{{"schema_version", std::string(kSchemaVersion)},
               {"kind", "evolve-summary"},
               {"iterations", config_.iterations},
               {"rows", rows}};
  write_text_file(workspace_.summary_path(), summary.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

json Pipeline::simulate(bool force) {
  // Shared pool for both arms.
  std::filesystem::path pool_path =
      config_.pool_path.empty() ? workspace_.default_pool_path() : config_.pool_path;
  if (!std::filesystem::exists(pool_path)) {
    if (!config_.mock) {
      throw MissingInputError("seed pool not found: " + pool_path.string());
    }
    caps::save_dataset(pool_path,
                       make_synthetic_pool(mix64(config_.seed, fnv1a64("pool")), 100));
  }

  const auto arm_config = [&](const char* name) {
    RunConfig arm = config_;
    arm.workspace = workspace_.root / name;
    arm.pool_path = pool_path;
    return arm;
  };

  Pipeline guided(arm_config("guided"));
  EvolveOptions guided_options;
  guided_options.mixture_mode = MixtureMode::kDiagnosis;
  guided_options.force = force;
  guided.evolve(guided_options);

  Pipeline uniform(arm_config("uniform"));
  EvolveOptions uniform_options;
  uniform_options.mixture_mode = MixtureMode::kUniform;
  uniform_options.force = force;
  uniform.evolve(uniform_options);

  const int last = config_.iterations - 1;
  const auto guided_world = agents::SyntheticWorld::from_json(
      json::parse(read_text_file(guided.workspace().world_path(last))));
  const auto uniform_world = agents::SyntheticWorld::from_json(
      json::parse(read_text_file(uniform.workspace().world_path(last))));
  const auto initial_world =
      agents::SyntheticWorld::seeded(mix64(config_.seed, fnv1a64("world")), config_.world.delta,
                                     config_.world.skill_lo, config_.world.skill_hi);

  const auto first_report = diagnosis::DiagnosticReport::from_json(
      json::parse(read_text_file(guided.workspace().report_path(0))));
  const caps::Category weakest = initial_world.weakest_category();
  double max_alpha = 0.0;
  for (double a : first_report.mixture.weights) max_alpha = std::max(max_alpha, a);
  const bool weakest_gets_max =
      first_report.mixture.weight(weakest) >= max_alpha - 1e-12;

  const auto skills_json = [](const agents::SyntheticWorld& w) {
    json out = json::object();
    for (const auto& info : caps::all_categories()) {
      out[std::string(info.id)] = w.skill(info.value);
    }
    return out;
  };

  json comparison{
      {"schema_version", std::string(kSchemaVersion)},
      {"kind", "simulation-comparison"},
      {"iterations", config_.iterations},
      {"budget_per_iteration", config_.budget},
      {"initial", json{{"skills", skills_json(initial_world)},
                       {"min_skill", initial_world.min_skill()},
                       {"weakest_category", std::string(caps::category_id(weakest))}}},
      {"guided", json{{"skills", skills_json(guided_world)}, {"min_skill", guided_world.min_skill()}}},
      {"uniform",
       json{{"skills", skills_json(uniform_world)}, {"min_skill", uniform_world.min_skill()}}},
      {"min_skill_delta", guided_world.min_skill() - uniform_world.min_skill()},
      {"iter1_weakest_gets_max_alpha", weakest_gets_max}};
  write_text_file(workspace_.root / "comparison.json", comparison.dump(2) + "\n");
  return comparison;
}

// ---------------------------------------------------------------------------
// Analysis entry points
// ---------------------------------------------------------------------------

json Pipeline::run_diversity(const std::filesystem::path& dataset_path, const std::string& modality,
                             const std::filesystem::path& output_dir) {
  if (!std::filesystem::exists(dataset_path)) {
    throw MissingInputError("dataset not found: " + dataset_path.string());
  }
  const auto dataset = caps::load_dataset(dataset_path);
  std::shared_ptr<agents::EmbedClient> embedder;
  if (hub_) {
    embedder = hub_->embed_client();
  } else {
    agents::HttpConfig http;
    http.base_url = config_.embed_base_url.empty() ? config_.chat_base_url : config_.embed_base_url;
    if (const char* key = std::getenv(agents::kEnvChatApiKey)) http.api_key = key;
    if (http.base_url.empty()) throw ConfigError("no embedding base url configured");
    if (auto it = config_.role_models.find("embedder"); it != config_.role_models.end()) {
      http.model = it->second;
    }
    embedder = std::shared_ptr<agents::EmbedClient>(agents::make_http_embed_client(http));
  }
  std::vector<std::string> skipped;
  const auto set = analysis::embed_corpus(dataset, *embedder, modality, config_.concurrency, &skipped);
  const double score = analysis::diversity(set);
  json report = analysis::diversity_report(set, score);
  report["skipped"] = skipped;
  std::filesystem::create_directories(output_dir);
  write_text_file(output_dir / ("diversity_" + modality + ".json"), report.dump(2) + "\n");
  analysis::export_vectors_csv(output_dir / ("vectors_" + modality + ".csv"), set);
  return report;
}

json Pipeline::run_quality(const std::filesystem::path& dataset_path, int n_sample,
                           const std::filesystem::path& output_dir) {
  if (!std::filesystem::exists(dataset_path)) {
    throw MissingInputError("dataset not found: " + dataset_path.string());
  }
  const auto dataset = caps::load_dataset(dataset_path);
  std::vector<std::shared_ptr<agents::ChatClient>> judges;
  if (hub_) {
    for (int i = 0; i < 3; ++i) judges.push_back(hub_->chat_client(agents::MockRole::kJudge, i));
  } else if (!config_.judge_models.empty()) {
    for (const auto& model : config_.judge_models) {
      judges.push_back(chat_for("judge", model));
    }
  } else {
    judges.push_back(chat_for("judge"));
  }
  analysis::JudgeConfig jc;
  jc.n_sample = n_sample;
  jc.seed = mix64(config_.seed, fnv1a64("judge"));
  jc.concurrency = config_.concurrency;
  json coverage;
  const auto ratings = analysis::judge_questions(dataset, judges, jc, &coverage);
  if (ratings.empty()) throw ClientError("no judge returned a usable rating");
  const auto summary = analysis::quality_score(ratings);
  json report = summary.to_json(coverage);
  std::filesystem::create_directories(output_dir);
  write_text_file(output_dir / "quality.json", report.dump(2) + "\n");
  return report;
}

}  // namespace dpe::runtime
