#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>

namespace clothret {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Counter-based generator: the n-th draw of stream (seed, key) is a pure
/// function of (seed, key, n). Independent streams can be handed to worker
/// threads in any order without changing the values they produce.
class CounterRng {
 public:
  using result_type = std::uint64_t;

  CounterRng(std::uint64_t seed, std::uint64_t key)
      : base_(splitmix64(splitmix64(seed) ^ (key * 0xd1b54a32d192ed03ULL))) {}

  /// Derives a sub-stream; used to give every entity (image, item, model)
  /// its own reproducible sequence.
  CounterRng fork(std::uint64_t key) const { return CounterRng(base_, key); }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return splitmix64(base_ + splitmix64(counter_++)); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller (the spare value is discarded so every
  /// draw consumes exactly two counters).
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double sigma) { return mean + sigma * normal(); }

 private:
  std::uint64_t base_;
  std::uint64_t counter_ = 0;
};

}  // namespace clothret
