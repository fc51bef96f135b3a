#pragma once

// Counter-based generator (splitmix64 core). Chosen over <random> engines so
// that state serializes as a single u64 and substreams can be split off
// deterministically for per-pair / per-step parallel generation.

#include <cmath>
#include <cstdint>

#include "crossview/core.hpp"

namespace crossview {

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Independent substream; does not advance this generator.
  Rng split(std::uint64_t stream) const {
    std::uint64_t z = state_ ^ (0xD1342543DE82EF95ULL * (stream + 1));
    z = (z ^ (z >> 29)) * 0xFF51AFD7ED558CCDULL;
    return Rng(z ^ (z >> 32));
  }

  // Uniform in [0,1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // lo inclusive, hi exclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    require(hi > lo, "uniform_int: empty range");
    return lo + std::int64_t(next_u64() % std::uint64_t(hi - lo));
  }

  double normal() {
    // Box-Muller, spare discarded to keep the state a single u64.
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Normal clipped by rejection to +-2 sigma, the usual ViT init scheme.
  double truncated_normal(double stddev) {
    for (int i = 0; i < 64; ++i) {
      double z = normal();
      if (z >= -2.0 && z <= 2.0) return z * stddev;
    }
    return 0.0;
  }

  std::uint64_t state() const { return state_; }
  void set_state(std::uint64_t s) { state_ = s; }

 private:
  std::uint64_t state_;
};

}  // namespace crossview
