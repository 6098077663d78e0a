#pragma once

#include <cstdint>

#include "genlora/core.hpp"

namespace genlora {

/// Deterministic random stream: xoshiro256++ state seeded through SplitMix64.
///
/// Both algorithms are fully specified by their constants (Blackman &
/// Vigna), so a given seed produces the same sequence on every platform.
/// All distribution mappings below are exact integer/double arithmetic with
/// no libm calls except sqrt/log/cos in the normal sampler.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) {
    // SplitMix64 expands the 64-bit seed into the 256-bit xoshiro state.
    std::uint64_t x = seed;
    for (auto& word : state_) {
      x += 0x9e3779b97f4a7c15ULL;
      std::uint64_t z = x;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
      word = z ^ (z >> 31);
    }
  }

  /// Next raw 64-bit word (xoshiro256++).
  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform double in [0, 1), 53-bit resolution.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// `n` uniform draws in [lo, hi).
  Vector uniform(double lo, double hi, Index n);

  /// `n` normal draws (Box-Muller; std = 0 gives the constant `mean`).
  Vector normal(double mean, double std, Index n);

 private:
  static std::uint64_t rotl(std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

  std::uint64_t state_[4];
};

}  // namespace genlora
