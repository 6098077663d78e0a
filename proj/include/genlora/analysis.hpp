#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "genlora/core.hpp"
#include "genlora/rbf.hpp"

namespace genlora {

/// Singular-value summary of one weight update.
struct SpectrumReport {
  std::string name;
  Vector singular_values;     // descending
  Index effective_rank = 0;   // count of values strictly above `threshold`
  double threshold = 0.0;
  double energy = 0.0;        // sum of squared singular values
  std::uint64_t param_count = 0;  // trainable scalars of the producing adapter
};

/// Count of singular values strictly greater than tau (tau > 0).
Index effective_rank(const Eigen::Ref<const Matrix>& m, double tau);

/// Sum of squared singular values; equals the squared Frobenius norm.
double spectral_energy(const Eigen::Ref<const Matrix>& m);

SpectrumReport analyze_matrix(const std::string& name, const Eigen::Ref<const Matrix>& m,
                              double tau, std::uint64_t param_count);

/// Result of fitting RBF generators to reproduce explicit basis vectors
/// from their shared prototype (the mean of the target rows).
struct FitReport {
  std::vector<double> per_row_mse;
  double mean_mse = 0.0;
  double initial_mse = 0.0;
  double ls_floor_mse = 0.0;   // exact least-squares optimum over the frozen features
  double gap = 0.0;            // mean_mse - ls_floor_mse
  double parameter_ratio = 0.0;  // G(K+1) / d, generator params per target row
  Index epochs = 0;
};

struct ReconstructOptions {
  Index groups = 16;
  Index epochs = 2000;
  double lr = 1e-3;
  double epsilon = 1e-5;
};

/// Trains one generator per target row with Adam (full-batch MSE) against
/// the fixed prototype, and solves the per-group linear least-squares
/// optimum over the frozen feature set {silu(x_hat), phi_1..phi_K} as the
/// reachable floor. The prototype never changes, so the objective is
/// linear in the weights and the floor is exact.
FitReport reconstruct_basis(const Eigen::Ref<const Matrix>& target, const GridSpec& grid,
                            const ReconstructOptions& options);

/// Synthetic reconstruction benchmark: each row is a sum of three
/// sinusoids sharing a carrier whose period matches a 32-sample group, a
/// symmetric second harmonic, and an antisymmetric second harmonic with
/// row-alternating sign. The antisymmetric part is invisible to any
/// function of the normalized prototype, which pins the least-squares
/// floor independently of solver conditioning. Best behaved when `dim` is
/// a multiple of 32 and `rows` is even.
Matrix sinusoid_target(Index rows, Index dim);

}  // namespace genlora
