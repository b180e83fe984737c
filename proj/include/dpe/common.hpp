/// @file common.hpp
/// Shared infrastructure: error taxonomy, deterministic RNG, hashing,
/// clock abstraction, bounded parallel execution, and file helpers.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace dpe {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Errors. Kind values double as CLI exit codes.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  enum class Kind : int {
    kConfig = 2,
    kMissingInput = 3,
    kClient = 4,
    kInvariant = 5,
  };

  Error(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }
  int exit_code() const { return static_cast<int>(kind_); }

 private:
  Kind kind_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(Kind::kConfig, what) {}
};
struct MissingInputError : Error {
  explicit MissingInputError(const std::string& what) : Error(Kind::kMissingInput, what) {}
};
struct ClientError : Error {
  explicit ClientError(const std::string& what, bool retriable = false)
      : Error(Kind::kClient, what), retriable_(retriable) {}
  bool retriable() const { return retriable_; }

 private:
  bool retriable_;
};
struct InvariantError : Error {
  explicit InvariantError(const std::string& what) : Error(Kind::kInvariant, what) {}
};

// ---------------------------------------------------------------------------
// Hashing. FNV-1a + splitmix64 so digests are stable across platforms and
// standard-library implementations (std::hash is not).
// ---------------------------------------------------------------------------

constexpr std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

constexpr std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
  return splitmix64(a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2)));
}

/// Short hex tag used to derive stable ids from content digests.
std::string hex_tag(std::uint64_t h, int digits = 12);

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 is bit-exact by standard; the distribution
// helpers avoid std::uniform_*_distribution whose output is
// implementation-defined.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1) with 53 random bits.
  double next_double() { return (engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n) via rejection sampling. n must be > 0.
  std::uint64_t below(std::uint64_t n);

  /// Index drawn proportionally to non-negative weights (at least one > 0).
  std::size_t weighted(std::span<const double> weights);

  /// Standard normal via Box-Muller on the deterministic uniform stream.
  double next_gaussian();

 private:
  std::mt19937_64 engine_;
  std::optional<double> gaussian_spare_;
};

// ---------------------------------------------------------------------------
// Clock. Mock runs pin the clock so persisted artifacts are byte-stable.
// ---------------------------------------------------------------------------

class Clock {
 public:
  virtual ~Clock() = default;
  virtual std::int64_t now_epoch_seconds() const = 0;
};

class SystemClock final : public Clock {
 public:
  std::int64_t now_epoch_seconds() const override;
};

class FixedClock final : public Clock {
 public:
  explicit FixedClock(std::int64_t epoch_seconds) : epoch_(epoch_seconds) {}
  std::int64_t now_epoch_seconds() const override { return epoch_; }

 private:
  std::int64_t epoch_;
};

/// RFC3339 UTC timestamp, e.g. "2026-01-01T00:00:00Z".
std::string format_rfc3339(std::int64_t epoch_seconds);

// ---------------------------------------------------------------------------
// Bounded parallel execution for independent per-index work (client fan-out).
// Results must be written to index-addressed slots by the callee so output
// does not depend on scheduling. Exceptions are rethrown on the caller
// thread (first by index).
// ---------------------------------------------------------------------------

void parallel_for(std::size_t n, int max_threads, const std::function<void(std::size_t)>& fn);

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

std::string read_text_file(const std::filesystem::path& path);

/// Write-then-rename so readers never observe partial artifacts.
void write_text_file(const std::filesystem::path& path, std::string_view content);

std::vector<std::string> read_lines(const std::filesystem::path& path);

/// Parses one JSON object per non-empty line.
std::vector<json> read_jsonl(const std::filesystem::path& path);

void write_jsonl(const std::filesystem::path& path, const std::vector<json>& records);

/// Current artifact schema version. Readers accept any "1.x".
inline constexpr std::string_view kSchemaVersion = "1.0";

/// Throws InvariantError when the artifact's schema_version major differs.
void check_schema_version(const json& artifact, const std::string& what);

}  // namespace dpe
