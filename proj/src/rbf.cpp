#include "genlora/rbf.hpp"

#include <cmath>
#include <utility>

namespace genlora {

GridSpec make_grid(Index k_centers, double lo, double hi) {
  if (k_centers < 2) {
    throw ParameterError("make_grid: need at least 2 centers");
  }
  if (!(lo < hi)) {
    throw ParameterError("make_grid: lo must be < hi");
  }
  GridSpec grid;
  grid.k_centers = k_centers;
  grid.lo = lo;
  grid.hi = hi;
  grid.bandwidth = (hi - lo) / static_cast<double>(k_centers - 1);
  grid.centers = Vector::LinSpaced(k_centers, lo, hi);
  return grid;
}

GroupLayout make_group_layout(Index dim, Index groups) {
  if (dim < 1 || groups < 1) {
    throw ParameterError("group layout: dim and groups must be positive");
  }
  if (dim % groups != 0) {
    throw ParameterError("group layout: groups must divide dim (" + std::to_string(dim) + " % " +
                         std::to_string(groups) + " != 0)");
  }
  GroupLayout layout;
  layout.dim = dim;
  layout.groups = groups;
  layout.group_dim = dim / groups;
  if (layout.group_dim < 2) {
    throw ParameterError("group layout: group width must be >= 2, got " +
                         std::to_string(layout.group_dim));
  }
  return layout;
}

GeneratorParams GeneratorParams::zeros(const GroupLayout& layout, const GridSpec& grid) {
  GeneratorParams params;
  params.rbf_weights = Matrix::Zero(layout.groups, grid.k_centers);
  params.base_weights = Vector::Zero(layout.groups);
  return params;
}

double silu(double t) { return t / (1.0 + std::exp(-t)); }

double silu_deriv(double t) {
  const double s = 1.0 / (1.0 + std::exp(-t));
  return s * (1.0 + t * (1.0 - s));
}

std::pair<Vector, NormStats> instance_normalize(const Eigen::Ref<const Vector>& x, double epsilon) {
  if (x.size() < 1) {
    throw ParameterError("instance_normalize: empty input");
  }
  if (!(epsilon > 0.0)) {
    throw ParameterError("instance_normalize: epsilon must be > 0");
  }
  NormStats stats;
  stats.epsilon = epsilon;
  stats.mean = x.mean();
  stats.std = std::sqrt((x.array() - stats.mean).square().mean());
  Vector x_hat = (x.array() - stats.mean) / (stats.std + epsilon);
  return {std::move(x_hat), stats};
}

Vector instance_normalize_vjp(const Eigen::Ref<const Vector>& x, const NormStats& stats,
                              const Eigen::Ref<const Vector>& upstream) {
  if (x.size() != upstream.size()) {
    throw ShapeError("instance_normalize_vjp: upstream length mismatch");
  }
  const double n = static_cast<double>(x.size());
  const double denom = stats.std + stats.epsilon;
  const double up_mean = upstream.mean();
  Vector grad = (upstream.array() - up_mean) / denom;
  if (stats.std > 0.0) {
    const Vector centered = x.array() - stats.mean;
    const double proj = upstream.dot(centered);
    grad -= centered * (proj / (n * stats.std * denom * denom));
  }
  return grad;
}

Matrix rbf_responses(const Eigen::Ref<const Vector>& x_hat, const GridSpec& grid) {
  const double inv_h = 1.0 / grid.bandwidth;
  Matrix phi(x_hat.size(), grid.k_centers);
  for (Index k = 0; k < grid.k_centers; ++k) {
    phi.col(k) = (-(((x_hat.array() - grid.centers[k]) * inv_h).square())).exp();
  }
  return phi;
}

std::pair<Vector, GeneratorTape> generator_forward(const Eigen::Ref<const Vector>& z,
                                                   const GeneratorParams& params,
                                                   const GroupLayout& layout, const GridSpec& grid,
                                                   double epsilon, bool normalize) {
  if (z.size() != layout.dim) {
    throw ShapeError("generator_forward: latent length does not match layout");
  }
  if (params.rbf_weights.rows() != layout.groups || params.rbf_weights.cols() != grid.k_centers ||
      params.base_weights.size() != layout.groups) {
    throw ShapeError("generator_forward: parameter shapes do not match layout/grid");
  }
  Vector out(layout.dim);
  GeneratorTape tape;
  tape.normalized = normalize;
  tape.groups.resize(static_cast<std::size_t>(layout.groups));
  for (Index g = 0; g < layout.groups; ++g) {
    auto& rec = tape.groups[static_cast<std::size_t>(g)];
    rec.x = z.segment(g * layout.group_dim, layout.group_dim);
    if (normalize) {
      auto [x_hat, stats] = instance_normalize(rec.x, epsilon);
      rec.x_hat = std::move(x_hat);
      rec.stats = stats;
    } else {
      rec.x_hat = rec.x;
      rec.stats = NormStats{0.0, 1.0, epsilon};
    }
    rec.phi = rbf_responses(rec.x_hat, grid);
    rec.silu_vals = rec.x_hat.unaryExpr([](double t) { return silu(t); });
    rec.silu_derivs = rec.x_hat.unaryExpr([](double t) { return silu_deriv(t); });
    out.segment(g * layout.group_dim, layout.group_dim) =
        params.base_weights[g] * rec.silu_vals + rec.phi * params.rbf_weights.row(g).transpose();
  }
  return {std::move(out), std::move(tape)};
}

GeneratorGrads generator_backward(const GeneratorTape& tape, const GeneratorParams& params,
                                  const GridSpec& grid, const Eigen::Ref<const Vector>& upstream) {
  const Index groups = params.base_weights.size();
  if (static_cast<Index>(tape.groups.size()) != groups) {
    throw ShapeError("generator_backward: tape does not match parameter bank");
  }
  const Index group_dim = tape.groups.empty() ? 0 : tape.groups.front().x.size();
  if (upstream.size() != groups * group_dim) {
    throw ShapeError("generator_backward: upstream length mismatch");
  }
  GeneratorGrads grads;
  grads.z.resize(groups * group_dim);
  grads.params.rbf_weights.resize(groups, grid.k_centers);
  grads.params.base_weights.resize(groups);
  const double inv_h2 = 1.0 / (grid.bandwidth * grid.bandwidth);
  for (Index g = 0; g < groups; ++g) {
    const auto& rec = tape.groups[static_cast<std::size_t>(g)];
    const auto u = upstream.segment(g * group_dim, group_dim);
    grads.params.rbf_weights.row(g) = u.transpose() * rec.phi;
    grads.params.base_weights[g] = u.dot(rec.silu_vals);
    // d(out_j)/d(x_hat_j) = w_b silu'(x_hat_j) + sum_k w_k phi'_k(x_hat_j),
    // with phi'_k = -2 (x_hat - mu_k) / h^2 * phi_k
    Vector dout_dxhat = params.base_weights[g] * rec.silu_derivs;
    for (Index k = 0; k < grid.k_centers; ++k) {
      dout_dxhat.array() += params.rbf_weights(g, k) * (-2.0 * inv_h2) *
                            (rec.x_hat.array() - grid.centers[k]) * rec.phi.col(k).array();
    }
    const Vector g_hat = u.cwiseProduct(dout_dxhat);
    if (tape.normalized) {
      grads.z.segment(g * group_dim, group_dim) = instance_normalize_vjp(rec.x, rec.stats, g_hat);
    } else {
      grads.z.segment(g * group_dim, group_dim) = g_hat;
    }
  }
  return grads;
}

}  // namespace genlora
