#include "dpe/synthetic_world.hpp"

#include <algorithm>

#include <nlohmann/json.hpp>

namespace dpe::agents {

SyntheticWorld SyntheticWorld::seeded(std::uint64_t seed, double delta, double skill_lo,
                                      double skill_hi) {
  SyntheticWorld w;
  w.seed_ = seed;
  w.delta_ = delta;
  Rng rng(mix64(seed, fnv1a64("synthetic-world")));
  for (auto& s : w.skills_) {
    s = skill_lo + (skill_hi - skill_lo) * rng.next_double();
  }
  return w;
}

caps::Category SyntheticWorld::weakest_category() const {
  std::size_t best = 0;
  for (std::size_t i = 1; i < skills_.size(); ++i) {
    if (skills_[i] < skills_[best]) best = i;
  }
  return static_cast<caps::Category>(best);
}

double SyntheticWorld::min_skill() const {
  return *std::min_element(skills_.begin(), skills_.end());
}

void SyntheticWorld::train_one(caps::Category c) {
  double& s = skills_[static_cast<std::size_t>(c)];
  s += delta_ * (1.0 - s);
  s = std::clamp(s, 0.0, 1.0);
}

void SyntheticWorld::apply_training(const std::vector<caps::DatasetRecord>& accepted) {
  for (const auto& r : accepted) train_one(r.category);
  ++epoch_;
}

bool SyntheticWorld::answers_correctly(caps::Category c, std::string_view instance_key,
                                       int rollout_index) const {
  std::uint64_t h = mix64(seed_, fnv1a64(instance_key));
  h = mix64(h, epoch_);
  h = mix64(h, static_cast<std::uint64_t>(rollout_index) + 0x51ull);
  const double u = (splitmix64(h) >> 11) * 0x1.0p-53;
  return u < skill(c);
}

json SyntheticWorld::to_json() const {
  json skills = json::object();
  for (const auto& info : caps::all_categories()) {
    skills[std::string(info.id)] = skill(info.value);
  }
  return json{{"schema_version", std::string(kSchemaVersion)},
              {"kind", "synthetic-world"},
              {"seed", seed_},
              {"delta", delta_},
              {"epoch", epoch_},
              {"skills", skills}};
}

SyntheticWorld SyntheticWorld::from_json(const json& j) {
  check_schema_version(j, "synthetic-world");
  SyntheticWorld w;
  w.seed_ = j.at("seed").get<std::uint64_t>();
  w.delta_ = j.at("delta").get<double>();
  w.epoch_ = j.at("epoch").get<std::uint64_t>();
  for (const auto& [key, value] : j.at("skills").items()) {
    w.skills_[static_cast<std::size_t>(caps::parse_category(key))] = value.get<double>();
  }
  return w;
}

}  // namespace dpe::agents
