#include "dpe/diagnosis.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>
#include <numeric>

#include <nlohmann/json.hpp>

namespace dpe::diagnosis {

namespace {

json category_map_to_json(const std::array<double, caps::kNumCategories>& values) {
  json out = json::object();
  for (const auto& info : caps::all_categories()) {
    out[std::string(info.id)] = values[static_cast<std::size_t>(info.value)];
  }
  return out;
}

std::array<double, caps::kNumCategories> category_map_from_json(const json& j) {
  std::array<double, caps::kNumCategories> out{};
  for (const auto& [key, value] : j.items()) {
    out[static_cast<std::size_t>(caps::parse_category(key))] = value.get<double>();
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// WeightBands
// ---------------------------------------------------------------------------

WeightBands::WeightBands(std::vector<double> thresholds, std::vector<double> weights,
                         double default_weight)
    : thresholds_(std::move(thresholds)), weights_(std::move(weights)),
      default_weight_(default_weight) {
  if (weights_.size() != thresholds_.size() + 1) {
    throw ConfigError("weight bands need exactly one more weight than thresholds");
  }
  for (std::size_t i = 0; i + 1 < thresholds_.size(); ++i) {
    if (!(thresholds_[i] < thresholds_[i + 1])) {
      throw ConfigError("band thresholds must be strictly increasing");
    }
  }
  for (double t : thresholds_) {
    if (!(t > 0.0 && t < 1.0)) throw ConfigError("band thresholds must lie in (0,1)");
  }
  for (std::size_t i = 0; i + 1 < weights_.size(); ++i) {
    if (weights_[i] < weights_[i + 1]) {
      throw ConfigError("band weights must be monotone non-increasing in accuracy");
    }
  }
  for (double w : weights_) {
    if (!(w > 0.0)) throw ConfigError("band weights must be strictly positive");
  }
  if (!(default_weight_ > 0.0)) throw ConfigError("default band weight must be strictly positive");
}

WeightBands WeightBands::defaults() {
  return WeightBands({0.3, 0.5, 0.7, 0.9}, {4.0, 3.0, 2.0, 1.0, 0.5}, 1.0);
}

double WeightBands::eval(double accuracy) const {
  for (std::size_t i = 0; i < thresholds_.size(); ++i) {
    if (accuracy < thresholds_[i]) return weights_[i];
  }
  return weights_.back();
}

json WeightBands::to_json() const {
  return json{{"thresholds", thresholds_}, {"weights", weights_}, {"default_weight", default_weight_}};
}

WeightBands WeightBands::from_json(const json& j) {
  return WeightBands(j.at("thresholds").get<std::vector<double>>(),
                     j.at("weights").get<std::vector<double>>(),
                     j.at("default_weight").get<double>());
}

// ---------------------------------------------------------------------------
// MixtureVector
// ---------------------------------------------------------------------------

MixtureVector MixtureVector::from_raw(const std::array<double, caps::kNumCategories>& raw) {
  double total = 0.0;
  for (double w : raw) {
    if (w < 0.0 || !std::isfinite(w)) throw InvariantError("raw mixture weight negative or non-finite");
    total += w;
  }
  if (total <= 0.0) throw InvariantError("all raw mixture weights are zero");
  MixtureVector m;
  m.raw_weights = raw;
  for (std::size_t i = 0; i < raw.size(); ++i) m.weights[i] = raw[i] / total;
  m.validate();
  return m;
}

MixtureVector MixtureVector::uniform() {
  std::array<double, caps::kNumCategories> raw{};
  raw.fill(1.0);
  return from_raw(raw);
}

void MixtureVector::validate() const {
  double sum = 0.0;
  for (double w : weights) {
    if (w < 0.0 || !std::isfinite(w)) throw InvariantError("mixture weight negative or non-finite");
    sum += w;
  }
  if (std::fabs(sum - 1.0) > 1e-9) {
    throw InvariantError("mixture weights sum to " + std::to_string(sum) + ", expected 1");
  }
}

// ---------------------------------------------------------------------------
// DiagnosticReport
// ---------------------------------------------------------------------------

const CategoryStats& DiagnosticReport::stats_for(caps::Category c) const {
  return stats.at(static_cast<std::size_t>(c));
}
const FailurePattern& DiagnosticReport::failures_for(caps::Category c) const {
  return failures.at(static_cast<std::size_t>(c));
}
const GenerationHint& DiagnosticReport::hints_for(caps::Category c) const {
  return hints.at(static_cast<std::size_t>(c));
}

json DiagnosticReport::to_json() const {
  json stats_json = json::array();
  for (const auto& s : stats) {
    json entry = json{{"category", caps::category_id(s.category)},
                      {"count", s.count},
                      {"error_ids", s.error_ids}};
    auto acc = s.accuracy();
    entry["accuracy"] = acc ? json(*acc) : json(nullptr);
    stats_json.push_back(std::move(entry));
  }
  json failures_json = json::array();
  for (const auto& f : failures) {
    failures_json.push_back(json{{"category", caps::category_id(f.category)},
                                 {"patterns", f.patterns},
                                 {"evidence_ids", f.evidence_ids}});
  }
  json hints_json = json::array();
  for (const auto& h : hints) {
    hints_json.push_back(
        json{{"category", caps::category_id(h.category)}, {"directives", h.directives}});
  }
  return json{{"schema_version", std::string(kSchemaVersion)},
              {"iteration", iteration},
              {"sample_size", sample_size},
              {"mixture", category_map_to_json(mixture.weights)},
              {"raw_weights", category_map_to_json(mixture.raw_weights)},
              {"stats", stats_json},
              {"failures", failures_json},
              {"hints", hints_json},
              {"created_at", created_at}};
}

DiagnosticReport DiagnosticReport::from_json(const json& j) {
  check_schema_version(j, "diagnostic report");
  DiagnosticReport r;
  r.iteration = j.at("iteration").get<int>();
  r.sample_size = j.at("sample_size").get<int>();
  r.created_at = j.at("created_at").get<std::string>();
  r.mixture.weights = category_map_from_json(j.at("mixture"));
  r.mixture.raw_weights = category_map_from_json(j.at("raw_weights"));
  r.mixture.validate();
  r.stats.resize(caps::kNumCategories);
  for (const auto& entry : j.at("stats")) {
    CategoryStats s;
    s.category = caps::parse_category(entry.at("category").get<std::string>());
    s.count = entry.at("count").get<int>();
    s.error_ids = entry.at("error_ids").get<std::vector<std::string>>();
    if (entry.at("accuracy").is_null()) {
      s.correct = 0;
      if (s.count != 0) throw InvariantError("null accuracy with non-zero count");
    } else {
      s.correct = static_cast<int>(std::lround(entry.at("accuracy").get<double>() * s.count));
    }
    r.stats[static_cast<std::size_t>(s.category)] = std::move(s);
  }
  r.failures.resize(caps::kNumCategories);
  for (const auto& entry : j.at("failures")) {
    FailurePattern f;
    f.category = caps::parse_category(entry.at("category").get<std::string>());
    f.patterns = entry.at("patterns").get<std::vector<std::string>>();
    f.evidence_ids = entry.at("evidence_ids").get<std::vector<std::string>>();
    r.failures[static_cast<std::size_t>(f.category)] = std::move(f);
  }
  r.hints.resize(caps::kNumCategories);
  for (const auto& entry : j.at("hints")) {
    GenerationHint h;
    h.category = caps::parse_category(entry.at("category").get<std::string>());
    h.directives = entry.at("directives").get<std::vector<std::string>>();
    r.hints[static_cast<std::size_t>(h.category)] = std::move(h);
  }
  for (int i = 0; i < caps::kNumCategories; ++i) {
    r.stats[i].category = static_cast<caps::Category>(i);
    r.failures[i].category = static_cast<caps::Category>(i);
    r.hints[i].category = static_cast<caps::Category>(i);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

std::vector<caps::DiagnosticInstance> sample_diagnostic_set(
    const std::vector<caps::DiagnosticInstance>& pool, int n, std::uint64_t seed) {
  if (pool.empty()) throw MissingInputError("diagnostic pool is empty");
  if (n < 1) throw ConfigError("diagnostic sample size must be >= 1");
  const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(n), pool.size());
  std::vector<std::size_t> indices(pool.size());
  std::iota(indices.begin(), indices.end(), 0);
  Rng rng(mix64(seed, fnv1a64("diagnostic-sample")));
  // Partial Fisher-Yates: the first `take` slots are the sample.
  for (std::size_t i = 0; i < take; ++i) {
    const std::size_t j = i + rng.below(indices.size() - i);
    std::swap(indices[i], indices[j]);
  }
  std::vector<caps::DiagnosticInstance> out;
  out.reserve(take);
  for (std::size_t i = 0; i < take; ++i) out.push_back(pool[indices[i]]);
  return out;
}

namespace {

agents::ChatRequest make_responder_request(const caps::DiagnosticInstance& inst) {
  agents::ChatRequest req;
  req.request_id = agents::next_request_id();
  std::string prompt =
      "Answer the question about the attached image. Reason step by step, then give the final "
      "answer on its own line as 'Answer: <answer>'.\n\nQuestion: " +
      inst.question;
  prompt = agents::append_context_block(
      std::move(prompt), json{{"kind", "diagnostic-question"}, {"id", inst.id}});
  req.messages.push_back(agents::ChatMessage{"user", std::move(prompt), {inst.image.locator}});
  return req;
}

agents::ChatRequest make_verifier_request(const caps::DiagnosticInstance& inst,
                                          const std::string& response, bool final_correct) {
  agents::ChatRequest req;
  req.request_id = agents::next_request_id();
  std::string prompt =
      "Assess the reasoning steps in the response below against the reference answer. Return JSON "
      "{\"steps\": [{\"i\": <index>, \"pass\": <bool>, \"note\": <short text>}]}.";
  prompt = agents::append_context_block(
      std::move(prompt), json{{"kind", "step-verify"},
                              {"id", inst.id},
                              {"question", inst.question},
                              {"response", response},
                              {"reference", inst.reference_answer},
                              {"answer_kind", caps::answer_kind_id(inst.answer_kind)},
                              {"final_correct", final_correct}});
  req.messages.push_back(agents::ChatMessage{"user", std::move(prompt), {}});
  return req;
}

}  // namespace

std::vector<ScoreOutcome> score_responses(const std::vector<caps::DiagnosticInstance>& instances,
                                          agents::ChatClient& responder,
                                          agents::ChatClient* step_verifier,
                                          const DiagnoseConfig& config) {
  std::vector<ScoreOutcome> outcomes(instances.size());
  parallel_for(instances.size(), config.concurrency, [&](std::size_t i) {
    const auto& inst = instances[i];
    ScoreOutcome& out = outcomes[i];
    out.id = inst.id;
    std::string response;
    try {
      response = responder.chat(make_responder_request(inst)).text;
    } catch (const ClientError& e) {
      out.status = ScoreStatus::kUnscored;
      out.note = e.what();
      return;
    }
    out.status = ScoreStatus::kScored;
    out.response = response;
    const std::string final_answer = caps::extract_final_answer(response);
    out.verdict.final_correct =
        caps::compare_answers(final_answer, inst.reference_answer, inst.answer_kind, config.tolerance);
    if (step_verifier != nullptr) {
      try {
        auto verdict_response =
            step_verifier->chat(make_verifier_request(inst, response, out.verdict.final_correct));
        json parsed = agents::parse_json_response(verdict_response.text);
        if (parsed.contains("steps") && parsed["steps"].is_array()) {
          for (const auto& s : parsed["steps"]) {
            out.verdict.step_assessments.push_back(caps::StepAssessment{
                s.value("i", 0), s.value("pass", false), s.value("note", "")});
          }
        }
      } catch (const ClientError& e) {
        // Step assessments are attribution detail; scoring stands without them.
        out.note = std::string("step verifier unavailable: ") + e.what();
      }
    }
  });
  return outcomes;
}

std::vector<CategoryStats> aggregate(const std::vector<ScoreOutcome>& outcomes,
                                     const std::vector<caps::DiagnosticInstance>& instances) {
  std::map<std::string, caps::Category> category_by_id;
  for (const auto& inst : instances) category_by_id[inst.id] = inst.category;

  std::vector<CategoryStats> stats(caps::kNumCategories);
  for (int i = 0; i < caps::kNumCategories; ++i) {
    stats[i].category = static_cast<caps::Category>(i);
  }
  for (const auto& out : outcomes) {
    auto it = category_by_id.find(out.id);
    if (it == category_by_id.end()) {
      throw InvariantError("verdict references unknown instance id: " + out.id);
    }
    if (out.status != ScoreStatus::kScored) continue;
    auto& s = stats[static_cast<std::size_t>(it->second)];
    s.count += 1;
    if (out.verdict.scalar() == 1) {
      s.correct += 1;
    } else {
      s.error_ids.push_back(out.id);
    }
  }
  return stats;
}

std::pair<std::vector<FailurePattern>, std::vector<GenerationHint>> attribute_failures(
    const std::vector<CategoryStats>& stats, const std::vector<caps::DiagnosticInstance>& instances,
    const std::vector<ScoreOutcome>& outcomes, agents::ChatClient& analyst,
    const DiagnoseConfig& config) {
  std::map<std::string, const caps::DiagnosticInstance*> instance_by_id;
  for (const auto& inst : instances) instance_by_id[inst.id] = &inst;
  std::map<std::string, const ScoreOutcome*> outcome_by_id;
  for (const auto& out : outcomes) outcome_by_id[out.id] = &out;

  std::vector<FailurePattern> failures(caps::kNumCategories);
  std::vector<GenerationHint> hints(caps::kNumCategories);
  for (const auto& s : stats) {
    const auto idx = static_cast<std::size_t>(s.category);
    failures[idx].category = s.category;
    hints[idx].category = s.category;
    if (s.error_ids.empty()) {
      hints[idx].directives = {"maintain difficulty"};
      continue;
    }
    json examples = json::array();
    for (const auto& id : s.error_ids) {
      if (static_cast<int>(examples.size()) >= config.max_examples_per_category) break;
      const auto* inst = instance_by_id.at(id);
      const auto* out = outcome_by_id.at(id);
      examples.push_back(json{{"question", inst->question},
                              {"response", out->response},
                              {"reference", inst->reference_answer}});
    }
    agents::ChatRequest req;
    req.request_id = agents::next_request_id();
    std::string prompt =
        "The model failed the examples below, all from one capability category. Summarize "
        "recurring failure patterns and give actionable directives for generating targeted "
        "training questions. Return JSON {\"patterns\": [..], \"directives\": [..]}.";
    prompt = agents::append_context_block(
        std::move(prompt), json{{"kind", "failure-attribution"},
                                {"category", caps::category_id(s.category)},
                                {"examples", examples}});
    req.messages.push_back(agents::ChatMessage{"user", std::move(prompt), {}});
    try {
      json parsed = agents::parse_json_response(analyst.chat(req).text);
      if (parsed.contains("patterns") && parsed["patterns"].is_array()) {
        for (const auto& p : parsed["patterns"]) {
          std::string text = p.get<std::string>();
          if (!text.empty()) failures[idx].patterns.push_back(text.substr(0, 500));
        }
      }
      if (parsed.contains("directives") && parsed["directives"].is_array()) {
        for (const auto& d : parsed["directives"]) {
          std::string text = d.get<std::string>();
          if (!text.empty()) hints[idx].directives.push_back(text.substr(0, 500));
        }
      }
    } catch (const ClientError& e) {
      std::cerr << "[dpe] warning: failure attribution unavailable for "
                << caps::category_id(s.category) << ": " << e.what() << "\n";
    }
    failures[idx].evidence_ids = s.error_ids;
    if (hints[idx].directives.empty()) {
      hints[idx].directives = {"maintain difficulty"};
    }
  }
  return {std::move(failures), std::move(hints)};
}

MixtureVector accuracy_to_mixture(const std::vector<CategoryStats>& stats,
                                  const WeightBands& bands) {
  if (stats.size() != caps::kNumCategories) {
    throw InvariantError("accuracy_to_mixture requires stats for every category");
  }
  std::array<double, caps::kNumCategories> raw{};
  for (const auto& s : stats) {
    const auto acc = s.accuracy();
    raw[static_cast<std::size_t>(s.category)] = acc ? bands.eval(*acc) : bands.default_weight();
  }
  return MixtureVector::from_raw(raw);
}

DiagnosticReport diagnose(const std::vector<caps::DiagnosticInstance>& pool,
                          agents::ChatClient& responder, agents::ChatClient* step_verifier,
                          agents::ChatClient& analyst, const DiagnoseConfig& config, int iteration,
                          const Clock& clock) {
  auto instances = sample_diagnostic_set(pool, config.sample_size, config.seed);
  auto outcomes = score_responses(instances, responder, step_verifier, config);
  auto stats = aggregate(outcomes, instances);
  auto [failures, hints] = attribute_failures(stats, instances, outcomes, analyst, config);

  DiagnosticReport report;
  report.iteration = iteration;
  report.mixture = accuracy_to_mixture(stats, config.bands);
  report.stats = std::move(stats);
  report.failures = std::move(failures);
  report.hints = std::move(hints);
  report.sample_size = 0;
  for (const auto& s : report.stats) report.sample_size += s.count;
  report.created_at = format_rfc3339(clock.now_epoch_seconds());
  return report;
}

}  // namespace dpe::diagnosis
