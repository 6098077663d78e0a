#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "genlora/core.hpp"

namespace genlora {

struct GradCheckConfig {
  Index m = 6;
  Index n = 8;
  Index rank = 2;
  Index groups = 2;
  Index k_centers = 3;
  Index batch = 4;
  std::uint64_t seed = 1;
  double fd_step = 1e-6;
};

struct GradCheckResult {
  struct Block {
    std::string name;
    double max_rel_error = 0.0;
  };
  std::vector<Block> blocks;  // z_a, z_b, theta_a, theta_b, x
  double worst = 0.0;
};

/// Full-chain check: a random adapter state and input, scalar loss
/// <R, h> with seeded random weights R, analytic adapter_backward vs
/// central finite differences on every scalar. Per-block error is
///   max_i |analytic_i - fd_i| / max(1, |analytic|_inf, |fd|_inf).
GradCheckResult gradcheck(const GradCheckConfig& config);

/// Draws `trials` random configurations (dims 4-32, rank 1-8, groups 1-8,
/// centers 3-15, honoring divisibility) and returns the worst block error
/// seen. Used by the acceptance gate.
GradCheckResult gradcheck_random_sweep(Index trials, std::uint64_t seed);

}  // namespace genlora
