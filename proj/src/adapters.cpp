#include "genlora/adapters.hpp"

#include <cmath>
#include <tuple>
#include <utility>

namespace genlora {

GenLoraState genlora_init(Index m, Index n, Index rank, Index groups, const GridSpec& grid,
                          double epsilon, RngStream& rng) {
  if (rank < 1) {
    throw ParameterError("genlora_init: rank must be >= 1");
  }
  GenLoraState state;
  state.m = m;
  state.n = n;
  state.rank = rank;
  state.groups = groups;
  state.grid = grid;
  state.epsilon = epsilon;
  const GroupLayout layout_b = state.layout_b();  // validates divisibility, width >= 2
  const GroupLayout layout_a = state.layout_a();

  const double bound = std::sqrt(3.0 / static_cast<double>(n));
  state.z_a = rng.uniform(-bound, bound, n);
  state.z_b = Vector::Zero(m);

  const double theta_std = 1.0 / std::sqrt(static_cast<double>(layout_a.group_dim));
  state.theta_a.reserve(static_cast<std::size_t>(rank));
  state.theta_b.reserve(static_cast<std::size_t>(rank));
  for (Index i = 0; i < rank; ++i) {
    GeneratorParams bank;
    Vector draws = rng.normal(0.0, theta_std, groups * (grid.k_centers + 1));
    bank.rbf_weights =
        Eigen::Map<const Matrix>(draws.data(), grid.k_centers, groups).transpose();
    bank.base_weights = draws.segment(groups * grid.k_centers, groups);
    state.theta_a.push_back(std::move(bank));
    state.theta_b.push_back(GeneratorParams::zeros(layout_b, grid));
  }
  return state;
}

std::tuple<Matrix, Matrix, std::vector<GeneratorTape>, std::vector<GeneratorTape>> synthesize(
    const GenLoraState& state) {
  const GroupLayout layout_b = state.layout_b();
  const GroupLayout layout_a = state.layout_a();
  Matrix b(state.m, state.rank);
  Matrix a(state.rank, state.n);
  std::vector<GeneratorTape> tapes_b;
  std::vector<GeneratorTape> tapes_a;
  tapes_b.reserve(static_cast<std::size_t>(state.rank));
  tapes_a.reserve(static_cast<std::size_t>(state.rank));
  for (Index i = 0; i < state.rank; ++i) {
    auto [col, tape_b] = generator_forward(state.z_b, state.theta_b[static_cast<std::size_t>(i)],
                                           layout_b, state.grid, state.epsilon, state.normalize);
    b.col(i) = col;
    tapes_b.push_back(std::move(tape_b));
    auto [row, tape_a] = generator_forward(state.z_a, state.theta_a[static_cast<std::size_t>(i)],
                                           layout_a, state.grid, state.epsilon, state.normalize);
    a.row(i) = row.transpose();
    tapes_a.push_back(std::move(tape_a));
  }
  return {std::move(b), std::move(a), std::move(tapes_b), std::move(tapes_a)};
}

Matrix delta_w(const GenLoraState& state) {
  auto [b, a, tb, ta] = synthesize(state);
  return b * a;
}

std::pair<Matrix, GenLoraTape> adapter_forward(const GenLoraState& state,
                                               const Eigen::Ref<const Matrix>& w0,
                                               const Eigen::Ref<const Matrix>& x) {
  if (w0.rows() != state.m || w0.cols() != state.n) {
    throw ShapeError("adapter_forward: w0 must be m x n");
  }
  if (x.rows() != state.n) {
    throw ShapeError("adapter_forward: input rows must equal n");
  }
  GenLoraTape tape;
  auto [b, a, tapes_b, tapes_a] = synthesize(state);
  tape.b = std::move(b);
  tape.a = std::move(a);
  tape.tapes_b = std::move(tapes_b);
  tape.tapes_a = std::move(tapes_a);
  tape.x = x;
  Matrix h = w0 * x + state.scale * (tape.b * (tape.a * x));
  return {std::move(h), std::move(tape)};
}

GenLoraGrads adapter_backward(const GenLoraState& state, const GenLoraTape& tape,
                              const Eigen::Ref<const Matrix>& w0,
                              const Eigen::Ref<const Matrix>& upstream) {
  if (upstream.rows() != state.m || upstream.cols() != tape.x.cols()) {
    throw ShapeError("adapter_backward: upstream must be m x batch");
  }
  GenLoraGrads grads;
  grads.z_b = Vector::Zero(state.m);
  grads.z_a = Vector::Zero(state.n);
  grads.theta_b.reserve(static_cast<std::size_t>(state.rank));
  grads.theta_a.reserve(static_cast<std::size_t>(state.rank));

  // dL/d(delta_w), with the adapter scale folded in
  const Matrix g_hat = state.scale * (upstream * tape.x.transpose());
  for (Index i = 0; i < state.rank; ++i) {
    const Vector up_b = g_hat * tape.a.row(i).transpose();
    const Vector up_a = g_hat.transpose() * tape.b.col(i);
    GeneratorGrads gb = generator_backward(tape.tapes_b[static_cast<std::size_t>(i)],
                                           state.theta_b[static_cast<std::size_t>(i)], state.grid,
                                           up_b);
    GeneratorGrads ga = generator_backward(tape.tapes_a[static_cast<std::size_t>(i)],
                                           state.theta_a[static_cast<std::size_t>(i)], state.grid,
                                           up_a);
    grads.z_b += gb.z;
    grads.z_a += ga.z;
    grads.theta_b.push_back(std::move(gb.params));
    grads.theta_a.push_back(std::move(ga.params));
  }
  grads.x = w0.transpose() * upstream +
            state.scale * (tape.a.transpose() * (tape.b.transpose() * upstream));

  if (state.freeze.z_b) grads.z_b.setZero();
  if (state.freeze.z_a) grads.z_a.setZero();
  if (state.freeze.theta_b) {
    for (auto& bank : grads.theta_b) {
      bank.rbf_weights.setZero();
      bank.base_weights.setZero();
    }
  }
  if (state.freeze.theta_a) {
    for (auto& bank : grads.theta_a) {
      bank.rbf_weights.setZero();
      bank.base_weights.setZero();
    }
  }
  return grads;
}

Matrix merge(const GenLoraState& state, const Eigen::Ref<const Matrix>& w0) {
  if (w0.rows() != state.m || w0.cols() != state.n) {
    throw ShapeError("merge: w0 must be m x n");
  }
  return w0 + state.scale * delta_w(state);
}

LoraState lora_init(Index m, Index n, Index rank, double alpha, RngStream& rng) {
  if (m < 1 || n < 1 || rank < 1) {
    throw ParameterError("lora_init: dims and rank must be positive");
  }
  LoraState state;
  state.m = m;
  state.n = n;
  state.rank = rank;
  state.alpha = alpha;
  state.b = Matrix::Zero(m, rank);
  Vector draws = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(n)), rank * n);
  state.a = Eigen::Map<const Matrix>(draws.data(), n, rank).transpose();
  return state;
}

Matrix lora_delta_w(const LoraState& state) { return state.b * state.a; }

std::pair<Matrix, Matrix> lora_forward(const LoraState& state, const Eigen::Ref<const Matrix>& w0,
                                       const Eigen::Ref<const Matrix>& x) {
  if (w0.rows() != state.m || w0.cols() != state.n || x.rows() != state.n) {
    throw ShapeError("lora_forward: shape mismatch");
  }
  const double scale = state.alpha / static_cast<double>(state.rank);
  Matrix h = w0 * x + scale * (state.b * (state.a * x));
  return {std::move(h), Matrix(x)};
}

LoraGrads lora_backward(const LoraState& state, const Eigen::Ref<const Matrix>& x,
                        const Eigen::Ref<const Matrix>& w0,
                        const Eigen::Ref<const Matrix>& upstream) {
  if (upstream.rows() != state.m || upstream.cols() != x.cols()) {
    throw ShapeError("lora_backward: upstream must be m x batch");
  }
  const double scale = state.alpha / static_cast<double>(state.rank);
  LoraGrads grads;
  const Matrix g_hat = scale * (upstream * x.transpose());
  grads.b = g_hat * state.a.transpose();
  grads.a = state.b.transpose() * g_hat;
  grads.x = w0.transpose() * upstream +
            scale * (state.a.transpose() * (state.b.transpose() * upstream));
  return grads;
}

Matrix lora_merge(const LoraState& state, const Eigen::Ref<const Matrix>& w0) {
  if (w0.rows() != state.m || w0.cols() != state.n) {
    throw ShapeError("lora_merge: w0 must be m x n");
  }
  return w0 + (state.alpha / static_cast<double>(state.rank)) * lora_delta_w(state);
}

namespace {

void check_spec_entry(const ModelSpec::Entry& entry) {
  if (entry.out_dim < 1 || entry.in_dim < 1 || entry.count < 1) {
    throw ParameterError("model spec: dims and count must be positive for " + entry.name);
  }
}

}  // namespace

ParamCountBreakdown param_count_genlora(const ModelSpec& spec, Index rank, Index groups,
                                        Index k_centers) {
  if (rank < 1 || groups < 1 || k_centers < 2) {
    throw ParameterError("param_count_genlora: rank, groups, centers out of range");
  }
  ParamCountBreakdown breakdown;
  for (const auto& entry : spec.entries) {
    check_spec_entry(entry);
    if (entry.out_dim % groups != 0 || entry.in_dim % groups != 0) {
      throw ParameterError("param_count_genlora: groups=" + std::to_string(groups) +
                           " does not divide dims of matrix '" + entry.name + "'");
    }
    const std::uint64_t per =
        static_cast<std::uint64_t>(entry.out_dim + entry.in_dim) +
        2ULL * static_cast<std::uint64_t>(rank) * static_cast<std::uint64_t>(groups) *
            static_cast<std::uint64_t>(k_centers + 1);
    breakdown.rows.push_back({entry.name, entry.count, per,
                              per * static_cast<std::uint64_t>(entry.count)});
    breakdown.total += breakdown.rows.back().subtotal;
  }
  return breakdown;
}

ParamCountBreakdown param_count_lora(const ModelSpec& spec, Index rank) {
  if (rank < 0) {
    throw ParameterError("param_count_lora: rank must be >= 0");
  }
  ParamCountBreakdown breakdown;
  for (const auto& entry : spec.entries) {
    check_spec_entry(entry);
    const std::uint64_t per = static_cast<std::uint64_t>(rank) *
                              static_cast<std::uint64_t>(entry.out_dim + entry.in_dim);
    breakdown.rows.push_back({entry.name, entry.count, per,
                              per * static_cast<std::uint64_t>(entry.count)});
    breakdown.total += breakdown.rows.back().subtotal;
  }
  return breakdown;
}

std::uint64_t enumerate_trainable(const GenLoraState& state) {
  std::uint64_t count = static_cast<std::uint64_t>(state.z_a.size() + state.z_b.size());
  for (const auto& bank : state.theta_a) {
    count += static_cast<std::uint64_t>(bank.rbf_weights.size() + bank.base_weights.size());
  }
  for (const auto& bank : state.theta_b) {
    count += static_cast<std::uint64_t>(bank.rbf_weights.size() + bank.base_weights.size());
  }
  return count;
}

}  // namespace genlora
