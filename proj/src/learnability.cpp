#include "dpe/learnability.hpp"

#include <cmath>
#include <iostream>

#include <nlohmann/json.hpp>

namespace dpe::learnability {

double soft_value(double p, double beta) {
  if (!(beta > 0.0) || !std::isfinite(beta)) throw InvariantError("beta must be positive and finite");
  if (!(p >= 0.0 && p <= 1.0)) throw InvariantError("pass rate outside [0,1]");
  if (p == 0.0) return 0.0;
  return 1.0 + beta * std::log(p + (1.0 - p) * std::exp(-1.0 / beta));
}

double kl_exact(double p, double beta) { return (soft_value(p, beta) - p) / beta; }

double kl_lower_bound(double p, double beta) {
  if (!(beta > 0.0) || !std::isfinite(beta)) throw InvariantError("beta must be positive and finite");
  if (!(p >= 0.0 && p <= 1.0)) throw InvariantError("pass rate outside [0,1]");
  return p * (1.0 - p) / (2.0 * beta * beta);
}

json LearnabilityProfile::to_json() const {
  return json{{"sample_id", sample_id}, {"p", pass_rate},
              {"rollouts", rollouts_used}, {"v_star", soft_value},
              {"kl_exact", kl_exact},     {"kl_bound", kl_bound},
              {"beta", beta},             {"bound_holds", bound_holds},
              {"kept", kept}};
}

LearnabilityProfile LearnabilityProfile::from_json(const json& j) {
  LearnabilityProfile p;
  p.sample_id = j.at("sample_id").get<std::string>();
  p.pass_rate = j.at("p").get<double>();
  p.rollouts_used = j.value("rollouts", 0);
  p.soft_value = j.at("v_star").get<double>();
  p.kl_exact = j.at("kl_exact").get<double>();
  p.kl_bound = j.at("kl_bound").get<double>();
  p.beta = j.value("beta", 0.0);
  p.bound_holds = j.value("bound_holds", false);
  p.kept = j.at("kept").get<bool>();
  return p;
}

RolloutVerifier mechanical_verifier(caps::NumericTolerance tol) {
  return [tol](const caps::DatasetRecord& sample,
               const std::string& answer) -> std::optional<bool> {
    return caps::compare_answers(caps::extract_final_answer(answer), sample.answer,
                                 sample.answer_kind, tol);
  };
}

PassRateEstimate estimate_pass_rate(const caps::DatasetRecord& sample, RolloutPolicy& policy,
                                    int rollouts, const RolloutVerifier& verifier) {
  if (rollouts < 1) throw ConfigError("pass-rate estimation needs at least one rollout");
  if (sample.answer.empty()) {
    throw InvariantError("sample " + sample.id + " has no verifiable answer");
  }
  PassRateEstimate est;
  int correct = 0;
  for (int r = 0; r < rollouts; ++r) {
    const std::string answer = policy.rollout_answer(sample, r);
    const auto verdict = verifier(sample, answer);
    if (!verdict) {
      ++est.verifier_failures;
      continue;
    }
    ++est.rollouts_used;
    if (*verdict) ++correct;
  }
  if (est.rollouts_used == 0) {
    throw ClientError("all rollouts failed verification for sample " + sample.id);
  }
  est.pass_rate = static_cast<double>(correct) / static_cast<double>(est.rollouts_used);
  return est;
}

void FilterConfig::validate() const {
  if (!(p_lo > 0.0 && p_hi < 1.0 && p_lo < p_hi)) {
    throw ConfigError("filter band must satisfy 0 < p_lo < p_hi < 1");
  }
  if (rollouts < 1) throw ConfigError("filter needs at least one rollout");
  if (!(beta > 0.0)) throw ConfigError("filter beta must be positive");
}

FilterOutcome filter_dataset(const std::vector<caps::DatasetRecord>& dataset, RolloutPolicy& policy,
                             const RolloutVerifier& verifier, const FilterConfig& config) {
  config.validate();
  FilterOutcome outcome;
  outcome.profiles.resize(dataset.size());
  std::vector<std::exception_ptr> errors(dataset.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    try {
      const auto& sample = dataset[i];
      const auto est = estimate_pass_rate(sample, policy, config.rollouts, verifier);
      LearnabilityProfile profile;
      profile.sample_id = sample.id;
      profile.pass_rate = est.pass_rate;
      profile.rollouts_used = est.rollouts_used;
      profile.beta = config.beta;
      profile.soft_value = soft_value(est.pass_rate, config.beta);
      profile.kl_exact = kl_exact(est.pass_rate, config.beta);
      profile.kl_bound = kl_lower_bound(est.pass_rate, config.beta);
      profile.bound_holds = profile.kl_exact >= profile.kl_bound - 1e-12;
      profile.kept = est.pass_rate >= config.p_lo && est.pass_rate <= config.p_hi;
      outcome.profiles[i] = std::move(profile);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (outcome.profiles[i].kept) outcome.kept.push_back(dataset[i]);
  }
  if (outcome.kept.empty() && !dataset.empty()) {
    std::cerr << "[dpe] warning: difficulty filter kept no samples (band [" << config.p_lo << ", "
              << config.p_hi << "])\n";
  }
  return outcome;
}

}  // namespace dpe::learnability
