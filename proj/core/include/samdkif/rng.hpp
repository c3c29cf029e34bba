#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace samdkif {

/// Seeded random stream. Every stochastic routine takes one of these by
/// reference; nothing in the library touches a global generator.
///
/// The engine (mt19937_64) is fully specified by the standard, and the
/// uniform/normal transforms below are implemented here rather than through
/// <random> distributions, so a given seed yields identical streams on every
/// conforming toolchain.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed), seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1) with 53 bits of precision.
  double uniform();

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);

  /// Uniform integer in [lo, hi] inclusive.
  std::int64_t range(std::int64_t lo, std::int64_t hi);

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller; caches the second variate.
  double normal();

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Derive an independent child stream, e.g. one per skill or per seed sweep.
  Rng fork(std::uint64_t stream_id);

  template <typename Container>
  void shuffle(Container& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  template <typename Container>
  const auto& choice(const Container& items) {
    return items[static_cast<std::size_t>(below(items.size()))];
  }

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// SplitMix64 finalizer; used to derive seeds deterministically.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace samdkif
