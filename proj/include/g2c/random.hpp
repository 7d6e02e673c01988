#pragma once

// Deterministic PRNG used everywhere seeds matter. splitmix64 keeps the whole
// pipeline reproducible independent of the standard library's distributions.

#include <cmath>
#include <cstdint>
#include <vector>

namespace g2c {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; the second variate is discarded so state stays a single word.
  double normal(double mean = 0.0, double stddev = 1.0) {
    const double u1 = std::fmax(uniform(), 1e-300);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(6.283185307179586 * u2);
  }

  // Uniform integer in [0, n). n must be positive.
  std::int64_t below(std::int64_t n) {
    return static_cast<std::int64_t>(next_u64() % static_cast<std::uint64_t>(n));
  }

  bool coin(double p = 0.5) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(static_cast<std::int64_t>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Derives an independent stream seed; used to give every patch / generator /
  // grid row its own generator without sharing state.
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    Rng r(a ^ (0x9E3779B97F4A7C15ull + (b << 6) + (b >> 2)));
    r.next_u64();
    return r.next_u64() ^ b;
  }

 private:
  std::uint64_t state_;
};

}  // namespace g2c
