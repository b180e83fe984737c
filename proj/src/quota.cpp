#include "dpe/quota.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

namespace dpe::quota {

std::array<int, caps::kNumCategories> apportion(
    const std::array<double, caps::kNumCategories>& weights, long long budget) {
  if (budget < 1) throw ConfigError("generation budget must be >= 1");
  std::array<double, caps::kNumCategories> quota{};
  std::array<long long, caps::kNumCategories> rounded{};
  long long total = 0;
  for (std::size_t i = 0; i < quota.size(); ++i) {
    quota[i] = static_cast<double>(budget) * weights[i];
    // nearbyint rounds half to even under the default FP environment.
    rounded[i] = static_cast<long long>(std::nearbyint(quota[i]));
    total += rounded[i];
  }
  long long diff = budget - total;
  while (diff != 0) {
    // Appetite = how far the current integer undershoots the real quota.
    // Positive diff: bump the categories that lost the most to rounding;
    // negative diff: trim the ones that gained the most.
    std::size_t pick = quota.size();
    double best = 0.0;
    for (std::size_t i = 0; i < quota.size(); ++i) {
      const double appetite = quota[i] - static_cast<double>(rounded[i]);
      if (diff < 0 && rounded[i] == 0) continue;
      const bool better = pick == quota.size() ||
                          (diff > 0 ? appetite > best : appetite < best);
      if (better) {
        pick = i;
        best = appetite;
      }
    }
    if (pick == quota.size()) throw InvariantError("quota repair found no adjustable category");
    rounded[pick] += diff > 0 ? 1 : -1;
    diff += diff > 0 ? -1 : 1;
  }
  std::array<int, caps::kNumCategories> out{};
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (rounded[i] < 0 || rounded[i] > std::numeric_limits<int>::max()) {
      throw InvariantError("quota out of range");
    }
    out[i] = static_cast<int>(rounded[i]);
  }
  return out;
}

QuotaLedger::QuotaLedger(const diagnosis::MixtureVector& mixture, long long budget) {
  mixture.validate();
  budget_ = budget;
  targets_ = apportion(mixture.weights, budget);
}

int QuotaLedger::target(caps::Category c) const {
  std::lock_guard<std::mutex> lock(mutex_);
  return targets_[static_cast<std::size_t>(c)];
}

int QuotaLedger::committed(caps::Category c) const {
  std::lock_guard<std::mutex> lock(mutex_);
  return committed_[static_cast<std::size_t>(c)];
}

int QuotaLedger::reserved(caps::Category c) const {
  std::lock_guard<std::mutex> lock(mutex_);
  return reserved_[static_cast<std::size_t>(c)];
}

int QuotaLedger::deficit(caps::Category c) const {
  std::lock_guard<std::mutex> lock(mutex_);
  const auto i = static_cast<std::size_t>(c);
  return targets_[i] - committed_[i] - reserved_[i];
}

std::optional<ReservationToken> QuotaLedger::reserve(caps::Category c) {
  std::lock_guard<std::mutex> lock(mutex_);
  const auto i = static_cast<std::size_t>(c);
  if (committed_[i] + reserved_[i] >= targets_[i]) return std::nullopt;
  ++reserved_[i];
  ReservationToken token;
  token.token_id_ = next_token_id_++;
  token.category_ = c;
  token.slot_index_ = next_slot_[i]++;
  outstanding_.insert(token.token_id_);
  return token;
}

void QuotaLedger::commit(ReservationToken&& token) {
  std::lock_guard<std::mutex> lock(mutex_);
  if (!token.valid() || outstanding_.erase(token.token_id_) == 0) {
    throw InvariantError("commit of a token that is not outstanding");
  }
  const auto i = static_cast<std::size_t>(token.category_);
  --reserved_[i];
  ++committed_[i];
  token.token_id_ = 0;
}

void QuotaLedger::release(ReservationToken&& token) {
  std::lock_guard<std::mutex> lock(mutex_);
  if (!token.valid() || outstanding_.erase(token.token_id_) == 0) {
    throw InvariantError("release of a token that is not outstanding");
  }
  const auto i = static_cast<std::size_t>(token.category_);
  --reserved_[i];
  token.token_id_ = 0;
}

bool QuotaLedger::saturated() const {
  std::lock_guard<std::mutex> lock(mutex_);
  for (std::size_t i = 0; i < targets_.size(); ++i) {
    if (committed_[i] != targets_[i]) return false;
  }
  return true;
}

json QuotaLedger::snapshot_json() const {
  std::lock_guard<std::mutex> lock(mutex_);
  json per_category = json::object();
  for (const auto& info : caps::all_categories()) {
    const auto i = static_cast<std::size_t>(info.value);
    per_category[std::string(info.id)] = json{
        {"target", targets_[i]}, {"committed", committed_[i]}, {"reserved", reserved_[i]}};
  }
  return json{{"schema_version", std::string(kSchemaVersion)},
              {"budget", budget_},
              {"per_category", per_category}};
}

}  // namespace dpe::quota
