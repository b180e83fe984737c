#include "dpe/common.hpp"

#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

namespace dpe {

std::string hex_tag(std::uint64_t h, int digits) {
  static const char* kHex = "0123456789abcdef";
  std::string out;
  out.reserve(digits);
  for (int i = 0; i < digits; ++i) {
    out.push_back(kHex[(h >> (60 - 4 * i)) & 0xf]);
  }
  return out;
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw InvariantError("Rng::below called with n == 0");
  // Rejection sampling over the largest multiple of n that fits in 64 bits.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return x % n;
}

std::size_t Rng::weighted(std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) {
    if (w < 0.0 || !std::isfinite(w)) throw InvariantError("negative or non-finite weight");
    total += w;
  }
  if (total <= 0.0) throw InvariantError("all weights are zero");
  double u = next_double() * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (u < acc) return i;
  }
  // Rounding can push u past the last bucket boundary.
  for (std::size_t i = weights.size(); i-- > 0;) {
    if (weights[i] > 0.0) return i;
  }
  return weights.size() - 1;
}

double Rng::next_gaussian() {
  if (gaussian_spare_) {
    double v = *gaussian_spare_;
    gaussian_spare_.reset();
    return v;
  }
  double u1 = 0.0;
  do {
    u1 = next_double();
  } while (u1 <= 0.0);
  double u2 = next_double();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 2.0 * M_PI * u2;
  gaussian_spare_ = r * std::sin(a);
  return r * std::cos(a);
}

std::int64_t SystemClock::now_epoch_seconds() const {
  return static_cast<std::int64_t>(std::time(nullptr));
}

std::string format_rfc3339(std::int64_t epoch_seconds) {
  std::time_t t = static_cast<std::time_t>(epoch_seconds);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d-%02d-%02dT%02d:%02d:%02dZ", tm.tm_year + 1900,
                tm.tm_mon + 1, tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec);
  return buf;
}

void parallel_for(std::size_t n, int max_threads, const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  const std::size_t workers =
      std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, max_threads)));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> threads;
  threads.reserve(workers);
  std::atomic<std::size_t> next{0};
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&] {
      while (true) {
        std::size_t i = next.fetch_add(1);
        if (i >= n) break;
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingInputError("cannot open file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view content) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InvariantError("cannot write file: " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw InvariantError("short write: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::vector<std::string> lines;
  std::istringstream in(read_text_file(path));
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

std::vector<json> read_jsonl(const std::filesystem::path& path) {
  std::vector<json> records;
  std::size_t lineno = 0;
  for (const auto& line : read_lines(path)) {
    ++lineno;
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) {
      throw InvariantError(path.string() + ":" + std::to_string(lineno) + ": invalid JSON record");
    }
    records.push_back(std::move(j));
  }
  return records;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<json>& records) {
  std::string out;
  for (const auto& r : records) {
    out += r.dump();
    out += '\n';
  }
  write_text_file(path, out);
}

void check_schema_version(const json& artifact, const std::string& what) {
  if (!artifact.contains("schema_version") || !artifact["schema_version"].is_string()) {
    throw InvariantError(what + ": missing schema_version");
  }
  const std::string v = artifact["schema_version"].get<std::string>();
  const std::string major = v.substr(0, v.find('.'));
  const std::string expected(kSchemaVersion.substr(0, kSchemaVersion.find('.')));
  if (major != expected) {
    throw InvariantError(what + ": unsupported schema_version " + v);
  }
}

}  // namespace dpe
