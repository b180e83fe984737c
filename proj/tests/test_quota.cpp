#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <thread>

#include "dpe/quota.hpp"

using namespace dpe;
using namespace dpe::caps;
using namespace dpe::quota;

namespace {

std::array<double, kNumCategories> weights_of(std::initializer_list<std::pair<int, double>> entries) {
  std::array<double, kNumCategories> w{};
  for (const auto& [idx, value] : entries) w[static_cast<std::size_t>(idx)] = value;
  return w;
}

diagnosis::MixtureVector mixture_of(std::initializer_list<std::pair<int, double>> entries) {
  return diagnosis::MixtureVector::from_raw(weights_of(entries));
}

}  // namespace

TEST_CASE("apportion: exact proportions") {
  const auto m = apportion(weights_of({{0, 0.5}, {1, 0.3}, {2, 0.2}}), 10);
  CHECK(m[0] == 5);
  CHECK(m[1] == 3);
  CHECK(m[2] == 2);
  for (int c = 3; c < kNumCategories; ++c) CHECK(m[c] == 0);
}

TEST_CASE("apportion: uniform 4000 over 12") {
  std::array<double, kNumCategories> w{};
  w.fill(1.0 / kNumCategories);
  const auto m = apportion(w, 4000);
  long long sum = 0;
  for (int v : m) {
    CHECK((v == 333 || v == 334));
    sum += v;
  }
  CHECK(sum == 4000);
}

TEST_CASE("apportion: rounding tie resolved by canonical order") {
  const auto m = apportion(weights_of({{0, 0.5}, {1, 0.5}}), 3);
  // round-half-even sends both 1.5 quotas to 2; the repair trims the first.
  CHECK(m[0] == 1);
  CHECK(m[1] == 2);
}

TEST_CASE("apportion: conservation and per-category deviation bound") {
  Rng rng(0xface);
  for (int trial = 0; trial < 2000; ++trial) {
    std::array<double, kNumCategories> raw{};
    for (auto& x : raw) x = rng.next_double() < 0.2 ? 0.0 : rng.next_double();
    if (*std::max_element(raw.begin(), raw.end()) == 0.0) raw[0] = 1.0;
    const auto mix = diagnosis::MixtureVector::from_raw(raw);
    const long long budget = 1 + static_cast<long long>(rng.below(1000000));
    const auto m = apportion(mix.weights, budget);
    long long sum = 0;
    for (int c = 0; c < kNumCategories; ++c) {
      sum += m[c];
      CHECK(std::fabs(m[c] - budget * mix.weights[c]) <= 1.0 + 1e-9);
    }
    CHECK(sum == budget);
  }
}

TEST_CASE("reserve to capacity") {
  SUBCASE("capacity one") {
    QuotaLedger ledger(mixture_of({{0, 1.0}}), 1);
    auto t1 = ledger.reserve(Category::kGeometryImages);
    REQUIRE(t1.has_value());
    CHECK_FALSE(ledger.reserve(Category::kGeometryImages).has_value());
    ledger.commit(std::move(*t1));
    CHECK(ledger.saturated());
  }
  SUBCASE("zero quota is always saturated") {
    QuotaLedger ledger(mixture_of({{0, 1.0}}), 5);
    CHECK_FALSE(ledger.reserve(Category::kOthers).has_value());
  }
}

TEST_CASE("commit and release walk the ledger state") {
  QuotaLedger ledger(mixture_of({{0, 1.0}}), 2);
  const auto cat = Category::kGeometryImages;

  auto a = ledger.reserve(cat);
  auto b = ledger.reserve(cat);
  REQUIRE(a.has_value());
  REQUIRE(b.has_value());
  CHECK_FALSE(ledger.reserve(cat).has_value());

  ledger.commit(std::move(*a));
  CHECK(ledger.committed(cat) == 1);
  ledger.release(std::move(*b));
  CHECK(ledger.reserved(cat) == 0);

  // released capacity is available again
  auto c = ledger.reserve(cat);
  REQUIRE(c.has_value());
  ledger.commit(std::move(*c));
  CHECK(ledger.saturated());
}

TEST_CASE("reserve -> release restores capacity; slot indices advance") {
  QuotaLedger ledger(mixture_of({{3, 1.0}}), 4);
  auto t = ledger.reserve(Category::kTextIntensiveImages);
  REQUIRE(t.has_value());
  CHECK(t->slot_index() == 0);
  ledger.release(std::move(*t));
  CHECK(ledger.committed(Category::kTextIntensiveImages) == 0);
  auto t2 = ledger.reserve(Category::kTextIntensiveImages);
  REQUIRE(t2.has_value());
  CHECK(t2->slot_index() == 1);
  ledger.release(std::move(*t2));
}

TEST_CASE("double commit or release is an error") {
  QuotaLedger ledger(mixture_of({{0, 1.0}}), 3);
  auto t = ledger.reserve(Category::kGeometryImages);
  REQUIRE(t.has_value());
  // Move the token into a second handle to simulate reuse of a spent token.
  ReservationToken spent = std::move(*t);
  ledger.commit(std::move(spent));
  CHECK_THROWS_AS(ledger.commit(std::move(spent)), InvariantError);
  CHECK_THROWS_AS(ledger.release(std::move(spent)), InvariantError);
}

TEST_CASE("concurrent reserves never exceed the target") {
  QuotaLedger ledger(mixture_of({{0, 1.0}}), 10);
  std::atomic<int> issued{0};
  std::vector<std::thread> threads;
  for (int t = 0; t < 10; ++t) {
    threads.emplace_back([&] {
      for (int i = 0; i < 10; ++i) {
        if (auto token = ledger.reserve(Category::kGeometryImages)) {
          issued.fetch_add(1);
          ledger.commit(std::move(*token));
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  CHECK(issued.load() == 10);
  CHECK(ledger.committed(Category::kGeometryImages) == 10);
  CHECK(ledger.saturated());
}

TEST_CASE("randomized interleavings keep n_c within m_c and terminate saturated") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    QuotaLedger ledger(mixture_of({{0, 2.0}, {1, 1.0}}), 9);
    std::vector<std::thread> threads;
    for (int t = 0; t < 4; ++t) {
      threads.emplace_back([&, t] {
        Rng rng(mix64(seed, static_cast<std::uint64_t>(t)));
        while (!ledger.saturated()) {
          const auto cat = static_cast<Category>(rng.below(2));
          auto token = ledger.reserve(cat);
          if (!token) continue;
          // committed + reserved never exceeds the target
          CHECK(ledger.committed(cat) + ledger.reserved(cat) <= ledger.target(cat));
          if (rng.below(3) == 0) {
            ledger.release(std::move(*token));
          } else {
            ledger.commit(std::move(*token));
          }
          CHECK(ledger.committed(cat) <= ledger.target(cat));
        }
      });
    }
    for (auto& t : threads) t.join();
    CHECK(ledger.saturated());
    CHECK(ledger.committed(static_cast<Category>(0)) == ledger.target(static_cast<Category>(0)));
  }
}

TEST_CASE("snapshot json shape") {
  QuotaLedger ledger(mixture_of({{0, 1.0}, {1, 1.0}}), 4);
  auto t = ledger.reserve(static_cast<Category>(0));
  REQUIRE(t.has_value());
  const json snap = ledger.snapshot_json();
  CHECK(snap["budget"] == 4);
  CHECK(snap["per_category"]["geometry-images"]["target"] == 2);
  CHECK(snap["per_category"]["geometry-images"]["reserved"] == 1);
  CHECK(snap["per_category"]["geometry-images"]["committed"] == 0);
  CHECK(snap.contains("schema_version"));
  ledger.release(std::move(*t));
}
