#pragma once

#include <cmath>
#include <cstdint>
#include <random>

// Deterministic random source. Distribution sampling is implemented here
// rather than with std::*_distribution so that streams are bit-identical
// across standard libraries.

namespace us3l {

class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed), seed_base_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Rejection sampling keeps the draw unbiased.
  uint64_t uniform_int(uint64_t n) {
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal via Box-Muller with a cached spare.
  double gauss() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double gauss(double mean, double stddev) { return mean + stddev * gauss(); }

  bool bernoulli(double p) { return uniform() < p; }

  // Independent substream for a named purpose; keeps module streams decoupled
  // from call order elsewhere.
  Rng split(uint64_t stream_tag) const {
    return Rng(mix(seed_base_, stream_tag));
  }

 private:
  static uint64_t mix(uint64_t a, uint64_t b) {
    // splitmix64 finalizer over the pair
    uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::mt19937_64 engine_;
  uint64_t seed_base_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace us3l
