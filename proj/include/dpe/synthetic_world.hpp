/// @file synthetic_world.hpp
/// Seeded test world: a per-category skill vector that answers questions
/// stochastically and improves in response to training allocation. Used by
/// the mock clients and the simulation CLI to exercise the full loop at
/// desk scale.
#pragma once

#include <array>

#include "dpe/capability.hpp"
#include "dpe/common.hpp"

namespace dpe::agents {

class SyntheticWorld {
 public:
  SyntheticWorld() { skills_.fill(0.5); }

  /// Initial skills drawn uniformly from [skill_lo, skill_hi] under the seed.
  static SyntheticWorld seeded(std::uint64_t seed, double delta = 0.02, double skill_lo = 0.2,
                               double skill_hi = 0.9);

  double skill(caps::Category c) const { return skills_[static_cast<std::size_t>(c)]; }
  double delta() const { return delta_; }

  /// Number of training passes applied; keys the mock answer stream so each
  /// diagnostic round sees fresh draws.
  std::uint64_t epoch() const { return epoch_; }

  caps::Category weakest_category() const;
  double min_skill() const;

  /// One accepted training sample of category c: s_c += delta * (1 - s_c).
  void train_one(caps::Category c);

  /// Applies the learning response per record, in dataset order, then
  /// advances the epoch.
  void apply_training(const std::vector<caps::DatasetRecord>& accepted);

  /// Deterministic Bernoulli(skill) draw for answering a question of
  /// category c, keyed by (world seed, instance key, epoch, rollout index).
  bool answers_correctly(caps::Category c, std::string_view instance_key, int rollout_index) const;

  json to_json() const;
  static SyntheticWorld from_json(const json& j);

 private:
  std::array<double, caps::kNumCategories> skills_{};
  double delta_ = 0.02;
  std::uint64_t seed_ = 0;
  std::uint64_t epoch_ = 0;
};

}  // namespace dpe::agents
