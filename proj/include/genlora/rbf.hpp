#pragma once

#include <vector>

#include "genlora/core.hpp"

namespace genlora {

/// Fixed uniform grid of Gaussian centers with bandwidth equal to the
/// grid spacing: h = (hi - lo) / (k - 1).
struct GridSpec {
  Index k_centers = 0;
  double lo = 0.0;
  double hi = 0.0;
  double bandwidth = 0.0;
  Vector centers;
};

GridSpec make_grid(Index k_centers, double lo, double hi);

/// Partition of a d-dim latent into `groups` contiguous sub-vectors of
/// width `group_dim`. Requires d = groups * group_dim and group_dim >= 2
/// (a width-1 group normalizes to zero and the generator degenerates).
struct GroupLayout {
  Index dim = 0;
  Index groups = 0;
  Index group_dim = 0;
};

GroupLayout make_group_layout(Index dim, Index groups);

/// Learnable weights of one generator: per-group RBF mixing weights plus
/// the per-group scalar on the activation path.
struct GeneratorParams {
  Matrix rbf_weights;   // groups x k_centers
  Vector base_weights;  // groups

  static GeneratorParams zeros(const GroupLayout& layout, const GridSpec& grid);
};

/// Per-group standardization statistics (population convention).
struct NormStats {
  double mean = 0.0;
  double std = 0.0;
  double epsilon = 0.0;
};

/// Everything the backward pass needs from one forward evaluation.
struct GeneratorTape {
  struct Group {
    Vector x;            // raw sub-vector
    Vector x_hat;        // normalized sub-vector
    NormStats stats;
    Matrix phi;          // group_dim x k_centers basis responses
    Vector silu_vals;
    Vector silu_derivs;
  };
  std::vector<Group> groups;
  bool normalized = true;
};

/// Gradients mirroring (z, params).
struct GeneratorGrads {
  Vector z;
  GeneratorParams params;
};

double silu(double t);
double silu_deriv(double t);

/// x_hat = (x - mean) / (std + epsilon), population statistics.
std::pair<Vector, NormStats> instance_normalize(const Eigen::Ref<const Vector>& x, double epsilon);

/// J^T * upstream for the standardization Jacobian
///   J_ij = (delta_ij - 1/n - (x_i-mu)(x_j-mu) / (n sigma (sigma+eps))) / (sigma+eps).
/// At sigma = 0 the third term is taken as its limit along the
/// zero-deviation manifold, i.e. dropped.
Vector instance_normalize_vjp(const Eigen::Ref<const Vector>& x, const NormStats& stats,
                              const Eigen::Ref<const Vector>& upstream);

/// Entry (j, k) = exp(-((x_hat_j - center_k) / h)^2).
Matrix rbf_responses(const Eigen::Ref<const Vector>& x_hat, const GridSpec& grid);

/// Generator map of one latent vector: per group g,
///   out = base_w[g] * silu(x_hat) + Phi(x_hat) * rbf_w[g],
/// concatenated over groups. With `normalize` off the standardization step
/// is the identity (x_hat = x).
std::pair<Vector, GeneratorTape> generator_forward(const Eigen::Ref<const Vector>& z,
                                                   const GeneratorParams& params,
                                                   const GroupLayout& layout, const GridSpec& grid,
                                                   double epsilon, bool normalize = true);

/// Exact reverse-mode gradients of generator_forward wrt z and params.
GeneratorGrads generator_backward(const GeneratorTape& tape, const GeneratorParams& params,
                                  const GridSpec& grid, const Eigen::Ref<const Vector>& upstream);

}  // namespace genlora
