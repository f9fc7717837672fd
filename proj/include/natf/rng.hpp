#pragma once

#include <cmath>
#include <cstdint>
#include <span>

#include "natf/error.hpp"

namespace natf {

// SplitMix64 generator with explicit splitting. Every stochastic routine takes
// an Rng& so that runs are reproducible from a single seed; independent
// consumers should receive split() children rather than share a stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Child stream whose sequence is decorrelated from the parent's.
  Rng split() { return Rng(next_u64() ^ 0x6a09e667f3bcc909ULL); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) {
      throw UsageError("Rng::below: empty range");
    }
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x = next_u64();
    while (x >= limit) {
      x = next_u64();
    }
    return x % n;
  }

  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) {
      u1 = uniform();
    }
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Index drawn from an unnormalized non-negative weight vector.
  template <typename W>
  std::size_t categorical(std::span<const W> weights) {
    double total = 0.0;
    for (const W w : weights) {
      total += static_cast<double>(w);
    }
    if (!(total > 0.0)) {
      throw NumericError("Rng::categorical: weights must have positive mass");
    }
    const double target = uniform() * total;
    double acc = 0.0;
    std::size_t last_positive = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      acc += static_cast<double>(weights[i]);
      if (weights[i] > W(0)) {
        last_positive = i;
      }
      if (target < acc) {
        return i;
      }
    }
    return last_positive;
  }

  template <typename Container>
  void shuffle(Container& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      using std::swap;
      swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t state_;
};

}  // namespace natf
