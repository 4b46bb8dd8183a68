#pragma once
// Deterministic random streams.
//
// Everything stochastic in this library draws from these helpers rather than
// from <random> distributions, whose output is implementation-defined and so
// would break the bitwise reproducibility the test suite pins down.
//
// Two kinds of streams are provided:
//   * Rng           - a sequential SplitMix64 stream for shuffles, parameter
//                     init, dropout masks and treatment assignment.
//   * counter_*     - stateless draws addressed by a hashed key. Simulation
//                     noise uses these so that a counterfactual replay of
//                     (seed, patient, step) reproduces the factual draw
//                     exactly, no matter in which order paths are generated.

#include <cmath>
#include <cstdint>
#include <stdexcept>

namespace cfseq {

inline constexpr double kTwoPi = 6.283185307179586476925287;

// SplitMix64 output function; doubles as the avalanche hash for counter keys.
inline uint64_t mix64(uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t hash_combine(uint64_t a, uint64_t b) {
  return mix64(a ^ (0x9e3779b97f4a7c15ULL + (b << 1)));
}

inline uint64_t hash3(uint64_t a, uint64_t b, uint64_t c) {
  return hash_combine(hash_combine(a, b), c);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    return mix64(state_);
  }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform on (0, 1]; safe as a log() argument.
  double uniform_open() {
    return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  }

  // Uniform integer in {0, ..., n-1}.
  long uniform_int(long n) {
    if (n <= 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
    long v = static_cast<long>(uniform() * static_cast<double>(n));
    return v < n ? v : n - 1;
  }

  // Standard normal via Box-Muller (cosine branch only, so each call consumes
  // exactly two uniforms and the stream position stays easy to reason about).
  double normal() {
    double u1 = uniform_open();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
  }

  double normal(double mu, double sd) { return mu + sd * normal(); }

  // Rejection-sampled truncated normal on (lo, hi).
  double truncated_normal(double mu, double sd, double lo, double hi) {
    if (!(lo < hi)) throw std::invalid_argument("truncated_normal: lo must be < hi");
    for (int i = 0; i < 100000; ++i) {
      double v = normal(mu, sd);
      if (v > lo && v < hi) return v;
    }
    throw std::runtime_error("truncated_normal: rejection sampling failed; bounds too tight");
  }

 private:
  uint64_t state_;
};

// Stateless draws addressed by key. Two independent hashes of the key feed
// Box-Muller so a single key yields one normal deviate.
inline double counter_uniform(uint64_t key) {
  return static_cast<double>(mix64(key) >> 11) * 0x1.0p-53;
}

inline double counter_normal(uint64_t key, double mu, double sd) {
  uint64_t a = mix64(key ^ 0xd1b54a32d192ed03ULL);
  uint64_t b = mix64(key ^ 0x8cb92ba72f3d8dd7ULL);
  double u1 = (static_cast<double>(a >> 11) + 1.0) * 0x1.0p-53;
  double u2 = static_cast<double>(b >> 11) * 0x1.0p-53;
  return mu + sd * std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

}  // namespace cfseq
