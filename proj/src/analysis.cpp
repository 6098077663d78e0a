#include "genlora/analysis.hpp"

#include <cmath>
#include <utility>

#include "genlora/optim.hpp"
#include "genlora/svd.hpp"

namespace genlora {

Index effective_rank(const Eigen::Ref<const Matrix>& m, double tau) {
  if (!(tau > 0.0)) {
    throw ParameterError("effective_rank: tau must be > 0");
  }
  const Vector sigma = svd(m).singular_values;
  Index count = 0;
  while (count < sigma.size() && sigma[count] > tau) {
    ++count;
  }
  return count;
}

double spectral_energy(const Eigen::Ref<const Matrix>& m) {
  return svd(m).singular_values.squaredNorm();
}

SpectrumReport analyze_matrix(const std::string& name, const Eigen::Ref<const Matrix>& m,
                              double tau, std::uint64_t param_count) {
  if (!(tau > 0.0)) {
    throw ParameterError("analyze_matrix: tau must be > 0");
  }
  SpectrumReport report;
  report.name = name;
  report.threshold = tau;
  report.param_count = param_count;
  report.singular_values = svd(m).singular_values;
  report.energy = report.singular_values.squaredNorm();
  Index count = 0;
  while (count < report.singular_values.size() && report.singular_values[count] > tau) {
    ++count;
  }
  report.effective_rank = count;
  return report;
}

FitReport reconstruct_basis(const Eigen::Ref<const Matrix>& target, const GridSpec& grid,
                            const ReconstructOptions& options) {
  const Index rows = target.rows();
  const Index d = target.cols();
  if (rows < 1 || d < 1) {
    throw ParameterError("reconstruct_basis: empty target");
  }
  if (options.epochs < 0 || !(options.lr > 0.0)) {
    throw ParameterError("reconstruct_basis: epochs must be >= 0 and lr > 0");
  }
  const GroupLayout layout = make_group_layout(d, options.groups);
  require_finite(target, "reconstruct_basis target");

  // The prototype is fixed, so normalization and features are constant.
  const Vector prototype = target.colwise().mean().transpose();
  std::vector<Matrix> features;  // per group: group_dim x (K + 1), silu column first
  features.reserve(static_cast<std::size_t>(layout.groups));
  for (Index g = 0; g < layout.groups; ++g) {
    const Vector x = prototype.segment(g * layout.group_dim, layout.group_dim);
    auto [x_hat, stats] = instance_normalize(x, options.epsilon);
    Matrix f(layout.group_dim, grid.k_centers + 1);
    f.col(0) = x_hat.unaryExpr([](double t) { return silu(t); });
    f.rightCols(grid.k_centers) = rbf_responses(x_hat, grid);
    features.push_back(std::move(f));
  }

  FitReport report;
  report.epochs = options.epochs;
  report.parameter_ratio = static_cast<double>(layout.groups * (grid.k_centers + 1)) /
                           static_cast<double>(d);

  // Exact least-squares floor over the frozen features, per row.
  double floor_sse = 0.0;
  for (Index i = 0; i < rows; ++i) {
    for (Index g = 0; g < layout.groups; ++g) {
      const Vector y = target.row(i).segment(g * layout.group_dim, layout.group_dim).transpose();
      const Vector w = features[static_cast<std::size_t>(g)]
                           .bdcSvd(Eigen::ComputeThinU | Eigen::ComputeThinV)
                           .solve(y);
      floor_sse += (features[static_cast<std::size_t>(g)] * w - y).squaredNorm();
    }
  }
  report.ls_floor_mse = floor_sse / static_cast<double>(rows * d);

  // Adam fit of one generator per row, full-batch MSE against the
  // prototype input. Weights start at zero so the run is deterministic.
  report.per_row_mse.resize(static_cast<std::size_t>(rows));
  double initial_sse = 0.0;
  for (Index i = 0; i < rows; ++i) {
    GeneratorParams params = GeneratorParams::zeros(layout, grid);
    initial_sse += target.row(i).squaredNorm();  // zero init emits the zero vector
    std::vector<ParamBlock> blocks{
        {"rbf", params.rbf_weights.data(), params.rbf_weights.size(), false},
        {"base", params.base_weights.data(), params.base_weights.size(), false}};
    OptimizerState opt = make_optimizer(blocks);  // weight decay 0: plain Adam
    for (Index epoch = 0; epoch < options.epochs; ++epoch) {
      auto [out, tape] = generator_forward(prototype, params, layout, grid, options.epsilon);
      const Vector resid = out - target.row(i).transpose();
      const Vector up = (2.0 / static_cast<double>(d)) * resid;
      GeneratorGrads grads = generator_backward(tape, params, grid, up);
      std::vector<ParamBlock> grad_blocks{
          {"rbf", grads.params.rbf_weights.data(), grads.params.rbf_weights.size(), false},
          {"base", grads.params.base_weights.data(), grads.params.base_weights.size(), false}};
      adamw_step(blocks, grad_blocks, opt, options.lr);
    }
    auto [out, tape] = generator_forward(prototype, params, layout, grid, options.epsilon);
    report.per_row_mse[static_cast<std::size_t>(i)] =
        (out - target.row(i).transpose()).squaredNorm() / static_cast<double>(d);
  }
  report.initial_mse = initial_sse / static_cast<double>(rows * d);
  double total = 0.0;
  for (double v : report.per_row_mse) {
    total += v;
  }
  report.mean_mse = total / static_cast<double>(rows);
  report.gap = report.mean_mse - report.ls_floor_mse;
  return report;
}

Matrix sinusoid_target(Index rows, Index dim) {
  if (rows < 1 || dim < 1) {
    throw ParameterError("sinusoid_target: rows and dim must be positive");
  }
  constexpr double kPi = 3.14159265358979323846;
  const double b_pattern[4] = {0.30, -0.25, 0.20, -0.35};
  Matrix target(rows, dim);
  for (Index i = 0; i < rows; ++i) {
    const double b = b_pattern[i % 4];
    const double c = (i % 2 == 0) ? 0.4 : -0.4;
    for (Index t = 0; t < dim; ++t) {
      const double theta = kPi * static_cast<double>(t) / 16.0 + kPi / 32.0;
      target(i, t) = std::sin(theta) + b * std::sin(2.0 * theta + kPi / 2.0) +
                     c * std::sin(2.0 * theta);
    }
  }
  return target;
}

}  // namespace genlora
