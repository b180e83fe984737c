/// @file quota.hpp
/// Per-category quota ledger: converts a mixture vector and a generation
/// budget into integer targets and enforces the hard count constraint via
/// reserve/commit/release. The ledger is the single shared mutable object
/// in the generation pipeline; all three operations are linearizable.
#pragma once

#include <map>
#include <mutex>
#include <set>

#include "dpe/capability.hpp"
#include "dpe/common.hpp"
#include "dpe/diagnosis.hpp"

namespace dpe::quota {

/// Move-only handle for one reserved slot. Must be committed or released
/// exactly once.
class ReservationToken {
 public:
  ReservationToken() = default;
  ReservationToken(ReservationToken&& other) noexcept { *this = std::move(other); }
  ReservationToken& operator=(ReservationToken&& other) noexcept {
    token_id_ = other.token_id_;
    category_ = other.category_;
    slot_index_ = other.slot_index_;
    other.token_id_ = 0;
    return *this;
  }
  ReservationToken(const ReservationToken&) = delete;
  ReservationToken& operator=(const ReservationToken&) = delete;

  bool valid() const { return token_id_ != 0; }
  caps::Category category() const { return category_; }
  /// Per-category sequence number of the reservation, for deterministic
  /// derivation of slot-local content.
  int slot_index() const { return slot_index_; }

 private:
  friend class QuotaLedger;
  std::uint64_t token_id_ = 0;
  caps::Category category_ = caps::Category::kOthers;
  int slot_index_ = 0;
};

class QuotaLedger {
 public:
  /// Targets m_c = round-half-even(M * alpha_c), repaired by
  /// largest-remainder so they sum to M exactly (ties broken by canonical
  /// category order). Committed and reserved start at zero. The ledger is
  /// pinned in place (it owns a mutex); share by reference.
  QuotaLedger(const diagnosis::MixtureVector& mixture, long long budget);
  QuotaLedger(const QuotaLedger&) = delete;
  QuotaLedger& operator=(const QuotaLedger&) = delete;

  long long budget() const { return budget_; }
  int target(caps::Category c) const;
  int committed(caps::Category c) const;
  int reserved(caps::Category c) const;

  /// Remaining capacity m_c - n_c - reserved_c.
  int deficit(caps::Category c) const;

  /// Nullopt when the category is saturated (n_c + reserved_c == m_c).
  std::optional<ReservationToken> reserve(caps::Category c);

  /// Moves one reserved slot to committed. Throws on reuse of a token.
  void commit(ReservationToken&& token);

  /// Returns the slot to availability (candidate rejected or abandoned).
  void release(ReservationToken&& token);

  /// True when n_c == m_c for every category.
  bool saturated() const;

  json snapshot_json() const;

 private:
  long long budget_ = 0;
  std::array<int, caps::kNumCategories> targets_{};
  std::array<int, caps::kNumCategories> committed_{};
  std::array<int, caps::kNumCategories> reserved_{};
  std::array<int, caps::kNumCategories> next_slot_{};
  std::set<std::uint64_t> outstanding_;
  std::uint64_t next_token_id_ = 1;
  mutable std::mutex mutex_;
};

/// The integer apportionment used by allocate(), exposed for direct testing:
/// round-half-even then largest-remainder repair. Guarantees sum == budget
/// and |m_c - budget*alpha_c| <= 1.
std::array<int, caps::kNumCategories> apportion(
    const std::array<double, caps::kNumCategories>& weights, long long budget);

}  // namespace dpe::quota
