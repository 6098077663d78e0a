#include "genlora/gradcheck.hpp"

#include <cmath>
#include <utility>

#include "genlora/adapters.hpp"
#include "genlora/rng.hpp"

namespace genlora {
namespace {

double block_rel_error(const Eigen::Ref<const Vector>& analytic,
                       const Eigen::Ref<const Vector>& fd) {
  const double scale =
      std::max({1.0, analytic.cwiseAbs().maxCoeff(), fd.cwiseAbs().maxCoeff()});
  return (analytic - fd).cwiseAbs().maxCoeff() / scale;
}

Matrix draw_matrix(RngStream& rng, Index rows, Index cols, double std) {
  Vector draws = rng.normal(0.0, std, rows * cols);
  return Eigen::Map<const Matrix>(draws.data(), cols, rows).transpose();
}

}  // namespace

GradCheckResult gradcheck(const GradCheckConfig& config) {
  if (config.batch < 1 || !(config.fd_step > 0.0)) {
    throw ParameterError("gradcheck: batch must be >= 1 and fd_step > 0");
  }
  RngStream rng(config.seed);
  const GridSpec grid = make_grid(config.k_centers, -3.0, 3.0);
  GenLoraState state =
      genlora_init(config.m, config.n, config.rank, config.groups, grid, 1e-5, rng);
  // move off the zero-init manifold so every chain factor is exercised
  state.z_b = rng.normal(0.0, 1.0, config.m);
  state.z_a = rng.normal(0.0, 1.0, config.n);
  const double std_b = 1.0 / std::sqrt(static_cast<double>(state.layout_b().group_dim));
  const double std_a = 1.0 / std::sqrt(static_cast<double>(state.layout_a().group_dim));
  for (Index i = 0; i < config.rank; ++i) {
    auto& tb = state.theta_b[static_cast<std::size_t>(i)];
    tb.rbf_weights = draw_matrix(rng, config.groups, config.k_centers, std_b);
    tb.base_weights = rng.normal(0.0, std_b, config.groups);
    auto& ta = state.theta_a[static_cast<std::size_t>(i)];
    ta.rbf_weights = draw_matrix(rng, config.groups, config.k_centers, std_a);
    ta.base_weights = rng.normal(0.0, std_a, config.groups);
  }
  const Matrix w0 = draw_matrix(rng, config.m, config.n,
                                1.0 / std::sqrt(static_cast<double>(config.n)));
  Matrix x = draw_matrix(rng, config.n, config.batch, 1.0);
  const Matrix loss_weights = draw_matrix(rng, config.m, config.batch, 1.0);

  const auto loss_of = [&]() {
    auto [h, tape] = adapter_forward(state, w0, x);
    return (loss_weights.array() * h.array()).sum();
  };

  auto [h, tape] = adapter_forward(state, w0, x);
  GenLoraGrads grads = adapter_backward(state, tape, w0, loss_weights);

  // flatten analytic gradients per block
  Vector an_theta_a(config.rank * config.groups * (config.k_centers + 1));
  Vector an_theta_b(an_theta_a.size());
  {
    Index pos = 0;
    for (Index i = 0; i < config.rank; ++i) {
      const auto& bank = grads.theta_a[static_cast<std::size_t>(i)];
      an_theta_a.segment(pos, bank.rbf_weights.size()) =
          Eigen::Map<const Vector>(bank.rbf_weights.data(), bank.rbf_weights.size());
      pos += bank.rbf_weights.size();
      an_theta_a.segment(pos, bank.base_weights.size()) = bank.base_weights;
      pos += bank.base_weights.size();
    }
    pos = 0;
    for (Index i = 0; i < config.rank; ++i) {
      const auto& bank = grads.theta_b[static_cast<std::size_t>(i)];
      an_theta_b.segment(pos, bank.rbf_weights.size()) =
          Eigen::Map<const Vector>(bank.rbf_weights.data(), bank.rbf_weights.size());
      pos += bank.rbf_weights.size();
      an_theta_b.segment(pos, bank.base_weights.size()) = bank.base_weights;
      pos += bank.base_weights.size();
    }
  }

  const auto fd_of = [&](double* scalar) {
    const double saved = *scalar;
    *scalar = saved + config.fd_step;
    const double up = loss_of();
    *scalar = saved - config.fd_step;
    const double down = loss_of();
    *scalar = saved;
    return (up - down) / (2.0 * config.fd_step);
  };

  const auto fd_block = [&](double* data, Index size) {
    Vector fd(size);
    for (Index i = 0; i < size; ++i) {
      fd[i] = fd_of(data + i);
    }
    return fd;
  };

  GradCheckResult result;
  result.blocks.push_back({"z_a", block_rel_error(grads.z_a, fd_block(state.z_a.data(),
                                                                      state.z_a.size()))});
  result.blocks.push_back({"z_b", block_rel_error(grads.z_b, fd_block(state.z_b.data(),
                                                                      state.z_b.size()))});
  {
    Vector fd(an_theta_a.size());
    Index pos = 0;
    for (Index i = 0; i < config.rank; ++i) {
      auto& bank = state.theta_a[static_cast<std::size_t>(i)];
      fd.segment(pos, bank.rbf_weights.size()) =
          fd_block(bank.rbf_weights.data(), bank.rbf_weights.size());
      pos += bank.rbf_weights.size();
      fd.segment(pos, bank.base_weights.size()) =
          fd_block(bank.base_weights.data(), bank.base_weights.size());
      pos += bank.base_weights.size();
    }
    result.blocks.push_back({"theta_a", block_rel_error(an_theta_a, fd)});
  }
  {
    Vector fd(an_theta_b.size());
    Index pos = 0;
    for (Index i = 0; i < config.rank; ++i) {
      auto& bank = state.theta_b[static_cast<std::size_t>(i)];
      fd.segment(pos, bank.rbf_weights.size()) =
          fd_block(bank.rbf_weights.data(), bank.rbf_weights.size());
      pos += bank.rbf_weights.size();
      fd.segment(pos, bank.base_weights.size()) =
          fd_block(bank.base_weights.data(), bank.base_weights.size());
      pos += bank.base_weights.size();
    }
    result.blocks.push_back({"theta_b", block_rel_error(an_theta_b, fd)});
  }
  {
    const Vector an_x = Eigen::Map<const Vector>(grads.x.data(), grads.x.size());
    result.blocks.push_back({"x", block_rel_error(an_x, fd_block(x.data(), x.size()))});
  }
  for (const auto& block : result.blocks) {
    result.worst = std::max(result.worst, block.max_rel_error);
  }
  return result;
}

GradCheckResult gradcheck_random_sweep(Index trials, std::uint64_t seed) {
  if (trials < 1) {
    throw ParameterError("gradcheck: trials must be >= 1");
  }
  RngStream rng(seed);
  const auto draw = [&](Index lo, Index hi) {  // inclusive
    return lo + static_cast<Index>(rng.next_u64() %
                                   static_cast<std::uint64_t>(hi - lo + 1));
  };
  GradCheckResult worst_result;
  worst_result.blocks = {{"z_a", 0}, {"z_b", 0}, {"theta_a", 0}, {"theta_b", 0}, {"x", 0}};
  for (Index t = 0; t < trials; ++t) {
    GradCheckConfig config;
    config.groups = draw(1, 8);
    const Index max_gd = 32 / config.groups;
    const Index min_gd = std::max<Index>(2, (4 + config.groups - 1) / config.groups);
    config.m = config.groups * draw(min_gd, max_gd);
    config.n = config.groups * draw(min_gd, max_gd);
    config.rank = draw(1, 8);
    config.k_centers = draw(3, 15);
    config.batch = draw(1, 4);
    config.seed = rng.next_u64();
    GradCheckResult result = gradcheck(config);
    for (std::size_t b = 0; b < result.blocks.size(); ++b) {
      worst_result.blocks[b].max_rel_error =
          std::max(worst_result.blocks[b].max_rel_error, result.blocks[b].max_rel_error);
    }
    worst_result.worst = std::max(worst_result.worst, result.worst);
  }
  return worst_result;
}

}  // namespace genlora
