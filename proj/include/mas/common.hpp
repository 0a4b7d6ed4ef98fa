#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace mas {

/// Error with a short machine-parsable code ("shape_mismatch", "io", ...).
/// The CLI maps these to one-line `E:<code>: <message>` diagnostics.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(code + ": " + message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

[[noreturn]] inline void fail(const std::string& code, const std::string& message) {
  throw Error(code, message);
}

// ---------------------------------------------------------------------------
// Deterministic RNG. splitmix64 core with hand-rolled distributions so that
// results do not depend on the standard library implementation. Every run
// owns a single root Rng; sub-streams are derived with fork().
// ---------------------------------------------------------------------------
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : root_(seed), state_(mix(seed)) {}

  std::uint64_t next() {
    state_ += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, bound). bound must be positive.
  int uniform_int(int bound) {
    if (bound <= 0) fail("config", "uniform_int: bound must be positive");
    return static_cast<int>((static_cast<unsigned __int128>(next()) *
                             static_cast<unsigned __int128>(bound)) >> 64);
  }

  /// Standard normal via Box-Muller with a cached spare.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(static_cast<int>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// Independent child stream; stable w.r.t. how many numbers the parent drew.
  Rng fork(std::uint64_t tag) const { return Rng(mix(root_ ^ mix(tag))); }

  std::uint64_t root_seed() const { return root_; }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::uint64_t root_;
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Runs fn(i) for i in [0, n) on up to n_threads threads, contiguous chunks.
/// Callers are responsible for writing results to disjoint slots.
template <typename Fn>
void parallel_for(int n, int n_threads, Fn&& fn) {
  if (n <= 0) return;
  if (n_threads <= 1 || n == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  int workers = std::min(n_threads, n);
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([=, &fn]() {
      for (int i = w; i < n; i += workers) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace mas
