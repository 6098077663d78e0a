#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "genlora/adapters.hpp"
#include "genlora/svd.hpp"

using namespace genlora;

namespace {

GenLoraState random_state(std::uint64_t seed, Index m, Index n, Index r, Index g, Index k) {
  RngStream rng(seed);
  GenLoraState state = genlora_init(m, n, r, g, make_grid(k, -3.0, 3.0), 1e-5, rng);
  state.z_b = rng.normal(0.0, 1.0, m);
  const double std_b = 1.0 / std::sqrt(static_cast<double>(state.layout_b().group_dim));
  for (Index i = 0; i < r; ++i) {
    auto& bank = state.theta_b[static_cast<std::size_t>(i)];
    Vector w = rng.normal(0.0, std_b, g * k);
    bank.rbf_weights = Eigen::Map<const Matrix>(w.data(), k, g).transpose();
    bank.base_weights = rng.normal(0.0, std_b, g);
  }
  return state;
}

// independent scalar re-evaluation of the whole generator pipeline
double scalar_generator(const Vector& z, const GeneratorParams& params, Index groups,
                        Index k_centers, double lo, double hi, double eps, Index element) {
  const Index dim = z.size();
  const Index gd = dim / groups;
  const Index g = element / gd;
  double mean = 0.0;
  for (Index j = 0; j < gd; ++j) mean += z[g * gd + j];
  mean /= static_cast<double>(gd);
  double var = 0.0;
  for (Index j = 0; j < gd; ++j) {
    const double c = z[g * gd + j] - mean;
    var += c * c;
  }
  var /= static_cast<double>(gd);
  const double x_hat = (z[element] - mean) / (std::sqrt(var) + eps);
  const double h = (hi - lo) / static_cast<double>(k_centers - 1);
  double out = params.base_weights[g] * (x_hat / (1.0 + std::exp(-x_hat)));
  for (Index k = 0; k < k_centers; ++k) {
    const double mu = lo + h * static_cast<double>(k);
    const double u = (x_hat - mu) / h;
    out += params.rbf_weights(g, k) * std::exp(-u * u);
  }
  return out;
}

Matrix random_dense(RngStream& rng, Index rows, Index cols, double std = 1.0) {
  Vector draws = rng.normal(0.0, std, rows * cols);
  return Eigen::Map<const Matrix>(draws.data(), cols, rows).transpose();
}

}  // namespace

TEST_CASE("init: zero update, determinism, non-degenerate A") {
  RngStream rng(1);
  const GridSpec grid = make_grid(15, -3.0, 3.0);
  GenLoraState state = genlora_init(64, 64, 4, 4, grid, 1e-5, rng);
  CHECK(delta_w(state).cwiseAbs().maxCoeff() == 0.0);

  RngStream r1(9), r2(9);
  const GenLoraState s1 = genlora_init(16, 8, 2, 2, make_grid(5, -3, 3), 1e-5, r1);
  const GenLoraState s2 = genlora_init(16, 8, 2, 2, make_grid(5, -3, 3), 1e-5, r2);
  CHECK((s1.z_a - s2.z_a).cwiseAbs().maxCoeff() == 0.0);
  for (Index i = 0; i < 2; ++i) {
    CHECK((s1.theta_a[static_cast<std::size_t>(i)].rbf_weights -
           s2.theta_a[static_cast<std::size_t>(i)].rbf_weights)
              .cwiseAbs()
              .maxCoeff() == 0.0);
  }

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    RngStream r(seed);
    GenLoraState s = genlora_init(64, 64, 4, 4, grid, 1e-5, r);
    auto [b, a, tb, ta] = synthesize(s);
    const Vector sigma = svd(a).singular_values;
    for (Index i = 0; i < 4; ++i) {
      CHECK(sigma[i] > 1e-10 * sigma[0]);
    }
  }

  RngStream r3(5);
  CHECK_THROWS_AS(genlora_init(10, 8, 2, 3, grid, 1e-5, r3), ParameterError);
}

TEST_CASE("synthesize shapes and scalar oracle") {
  GenLoraState state = random_state(12, 12, 8, 3, 2, 4);
  auto [b, a, tb, ta] = synthesize(state);
  CHECK(b.rows() == 12);
  CHECK(b.cols() == 3);
  CHECK(a.rows() == 3);
  CHECK(a.cols() == 8);

  // B at init is zero, A generically not
  RngStream rng(3);
  GenLoraState fresh = genlora_init(12, 8, 3, 2, make_grid(4, -3, 3), 1e-5, rng);
  auto [b0, a0, tb0, ta0] = synthesize(fresh);
  CHECK(b0.cwiseAbs().maxCoeff() == 0.0);
  CHECK(a0.cwiseAbs().maxCoeff() > 1e-3);

  GenLoraState rank1 = random_state(8, 6, 4, 1, 1, 3);
  auto [b1, a1, tb1, ta1] = synthesize(rank1);
  CHECK(b1.cols() == 1);
  CHECK(a1.rows() == 1);

  for (Index i = 0; i < 3; ++i) {
    for (Index j = 0; j < 12; ++j) {
      const double oracle = scalar_generator(state.z_b, state.theta_b[static_cast<std::size_t>(i)],
                                             2, 4, -3.0, 3.0, 1e-5, j);
      CHECK(std::abs(b(j, i) - oracle) < 1e-12);
    }
    for (Index j = 0; j < 8; ++j) {
      const double oracle = scalar_generator(state.z_a, state.theta_a[static_cast<std::size_t>(i)],
                                             2, 4, -3.0, 3.0, 1e-5, j);
      CHECK(std::abs(a(i, j) - oracle) < 1e-12);
    }
  }
}

TEST_CASE("delta_w: two formulations agree, rank bounded") {
  GenLoraState state = random_state(21, 8, 10, 3, 2, 5);
  const Matrix dw = delta_w(state);
  auto [b, a, tb, ta] = synthesize(state);
  Matrix outer_sum = Matrix::Zero(8, 10);
  for (Index i = 0; i < 3; ++i) {
    outer_sum += b.col(i) * a.row(i);
  }
  CHECK((dw - outer_sum).cwiseAbs().maxCoeff() < 1e-12);

  const Vector sigma = svd(dw).singular_values;
  for (Index i = 3; i < sigma.size(); ++i) {
    CHECK(sigma[i] < 1e-10 * sigma[0]);
  }
}

TEST_CASE("adapter forward: zero-init identity and decomposition") {
  RngStream rng(31);
  GenLoraState fresh = genlora_init(6, 8, 2, 2, make_grid(3, -3, 3), 1e-5, rng);
  const Matrix w0 = random_dense(rng, 6, 8);
  const Matrix x = random_dense(rng, 8, 4);
  auto [h, tape] = adapter_forward(fresh, w0, x);
  CHECK((h - w0 * x).cwiseAbs().maxCoeff() == 0.0);  // delta is exactly zero

  auto [h0, tape0] = adapter_forward(fresh, w0, Matrix::Zero(8, 3));
  CHECK(h0.cwiseAbs().maxCoeff() == 0.0);

  GenLoraState state = random_state(32, 6, 8, 2, 2, 3);
  auto [h1, tape1] = adapter_forward(state, w0, x);
  const Matrix h2 = w0 * x + delta_w(state) * x;
  CHECK((h1 - h2).cwiseAbs().maxCoeff() < 1e-12);

  CHECK_THROWS_AS(adapter_forward(state, w0, Matrix::Zero(7, 2)), ShapeError);
  CHECK_THROWS_AS(adapter_forward(state, Matrix::Zero(6, 9), x), ShapeError);
}

TEST_CASE("adapter backward: zero upstream, finite differences, zero-init structure") {
  GenLoraState state = random_state(41, 6, 8, 2, 2, 3);
  RngStream rng(42);
  const Matrix w0 = random_dense(rng, 6, 8, 1.0 / std::sqrt(8.0));
  Matrix x = random_dense(rng, 8, 4);

  auto [h, tape] = adapter_forward(state, w0, x);
  GenLoraGrads zero = adapter_backward(state, tape, w0, Matrix::Zero(6, 4));
  CHECK(zero.z_a.cwiseAbs().maxCoeff() == 0.0);
  CHECK(zero.z_b.cwiseAbs().maxCoeff() == 0.0);
  CHECK(zero.x.cwiseAbs().maxCoeff() == 0.0);

  // spec example: scalar loss = sum(h), every block vs central differences
  const Matrix ones = Matrix::Ones(6, 4);
  GenLoraGrads grads = adapter_backward(state, tape, w0, ones);
  const double step = 1e-6;
  const auto loss_of = [&]() { return adapter_forward(state, w0, x).first.sum(); };
  const auto check_fd = [&](double* data, Index size, const double* analytic) {
    for (Index i = 0; i < size; ++i) {
      const double saved = data[i];
      data[i] = saved + step;
      const double up = loss_of();
      data[i] = saved - step;
      const double down = loss_of();
      data[i] = saved;
      const double fd = (up - down) / (2 * step);
      CHECK(std::abs(analytic[i] - fd) /
                std::max({1.0, std::abs(analytic[i]), std::abs(fd)}) < 1e-6);
    }
  };
  check_fd(state.z_a.data(), state.z_a.size(), grads.z_a.data());
  check_fd(state.z_b.data(), state.z_b.size(), grads.z_b.data());
  for (Index i = 0; i < 2; ++i) {
    auto& bank = state.theta_a[static_cast<std::size_t>(i)];
    const auto& gbank = grads.theta_a[static_cast<std::size_t>(i)];
    check_fd(bank.rbf_weights.data(), bank.rbf_weights.size(), gbank.rbf_weights.data());
    check_fd(bank.base_weights.data(), bank.base_weights.size(), gbank.base_weights.data());
    auto& bank_b = state.theta_b[static_cast<std::size_t>(i)];
    const auto& gbank_b = grads.theta_b[static_cast<std::size_t>(i)];
    check_fd(bank_b.rbf_weights.data(), bank_b.rbf_weights.size(), gbank_b.rbf_weights.data());
    check_fd(bank_b.base_weights.data(), bank_b.base_weights.size(), gbank_b.base_weights.data());
  }
  {
    // gradient wrt the input x
    auto [h3, tape3] = adapter_forward(state, w0, x);
    GenLoraGrads g3 = adapter_backward(state, tape3, w0, ones);
    check_fd(x.data(), x.size(), g3.x.data());
  }

  // at zero init the theta_b gradient is nonzero while z_b's vanishes
  RngStream rng2(43);
  GenLoraState fresh = genlora_init(6, 8, 2, 2, make_grid(3, -3, 3), 1e-5, rng2);
  auto [hf, tapef] = adapter_forward(fresh, w0, x);
  GenLoraGrads gf = adapter_backward(fresh, tapef, w0, ones);
  CHECK(gf.z_b.cwiseAbs().maxCoeff() == 0.0);
  double theta_b_grad = 0.0;
  for (const auto& bank : gf.theta_b) {
    theta_b_grad = std::max(theta_b_grad, bank.rbf_weights.cwiseAbs().maxCoeff());
  }
  CHECK(theta_b_grad > 1e-6);
}

TEST_CASE("freeze flags zero the corresponding gradients") {
  GenLoraState state = random_state(51, 6, 8, 2, 2, 3);
  state.freeze.z_a = true;
  state.freeze.theta_b = true;
  RngStream rng(52);
  const Matrix w0 = random_dense(rng, 6, 8);
  const Matrix x = random_dense(rng, 8, 2);
  auto [h, tape] = adapter_forward(state, w0, x);
  GenLoraGrads grads = adapter_backward(state, tape, w0, Matrix::Ones(6, 2));
  CHECK(grads.z_a.cwiseAbs().maxCoeff() == 0.0);
  for (const auto& bank : grads.theta_b) {
    CHECK(bank.rbf_weights.cwiseAbs().maxCoeff() == 0.0);
    CHECK(bank.base_weights.cwiseAbs().maxCoeff() == 0.0);
  }
  CHECK(grads.z_b.cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("merge equivalence") {
  RngStream rng(61);
  const Matrix w0 = random_dense(rng, 6, 8);
  GenLoraState fresh = genlora_init(6, 8, 2, 2, make_grid(3, -3, 3), 1e-5, rng);
  CHECK((merge(fresh, w0) - w0).cwiseAbs().maxCoeff() == 0.0);

  GenLoraState state = random_state(62, 6, 8, 2, 2, 3);
  const Matrix merged = merge(state, w0);
  for (int probe = 0; probe < 20; ++probe) {
    const Vector x = rng.normal(0.0, 1.0, 8);
    const Vector via_adapter = adapter_forward(state, w0, x).first;
    CHECK((merged * x - via_adapter).cwiseAbs().maxCoeff() < 1e-9);
  }
  // pure function: repeated merges of the same state agree
  CHECK((merge(state, w0) - merged).cwiseAbs().maxCoeff() == 0.0);

  CHECK_THROWS_AS(merge(state, Matrix::Zero(5, 8)), ShapeError);
}

TEST_CASE("parameter counts reproduce the published budgets") {
  ModelSpec llama;
  llama.name = "llama3-8b-qkv";
  llama.entries = {{"q_proj", 4096, 4096, 32}, {"k_proj", 1024, 4096, 32},
                   {"v_proj", 1024, 4096, 32}};
  CHECK(param_count_genlora(llama, 8, 16, 15).total == 983040ULL);
  CHECK(param_count_genlora(llama, 32, 16, 15).total == 2162688ULL);
  CHECK(param_count_lora(llama, 8).total == 4718592ULL);

  ModelSpec toy;
  toy.entries = {{"w", 4, 6, 1}};
  CHECK(param_count_genlora(toy, 2, 2, 3).total == 42ULL);
  CHECK(param_count_lora(toy, 2).total == 20ULL);
  CHECK(param_count_lora(toy, 0).total == 0ULL);

  ModelSpec bad;
  bad.entries = {{"odd", 10, 8, 1}};
  CHECK_THROWS_WITH_AS(param_count_genlora(bad, 2, 4, 3).total,
                       doctest::Contains("odd"), ParameterError);
}

TEST_CASE("closed form equals literal enumeration") {
  for (auto [m, n, r, g, k] : {std::tuple<Index, Index, Index, Index, Index>{8, 12, 2, 2, 5},
                               {16, 16, 4, 4, 15},
                               {6, 8, 1, 1, 3}}) {
    GenLoraState state = random_state(99, m, n, r, g, k);
    ModelSpec one;
    one.entries = {{"w", m, n, 1}};
    CHECK(param_count_genlora(one, r, g, k).total == enumerate_trainable(state));
  }
}

TEST_CASE("lora baseline") {
  RngStream rng(71);
  LoraState state = lora_init(6, 8, 2, 4.0, rng);
  CHECK(lora_delta_w(state).cwiseAbs().maxCoeff() == 0.0);

  state.b = random_dense(rng, 6, 2);
  const Matrix w0 = random_dense(rng, 6, 8);
  Matrix x = random_dense(rng, 8, 3);
  auto [h, xin] = lora_forward(state, w0, x);
  const double scale = state.alpha / 2.0;
  CHECK((h - (w0 * x + scale * state.b * state.a * x)).cwiseAbs().maxCoeff() < 1e-12);

  const Vector sigma = svd(lora_delta_w(state)).singular_values;
  for (Index i = 2; i < sigma.size(); ++i) {
    CHECK(sigma[i] < 1e-10 * sigma[0]);
  }

  const Matrix ones = Matrix::Ones(6, 3);
  LoraGrads grads = lora_backward(state, xin, w0, ones);
  const double step = 1e-6;
  const auto loss_of = [&]() { return lora_forward(state, w0, x).first.sum(); };
  const auto check_fd = [&](double* data, Index size, const double* analytic) {
    for (Index i = 0; i < size; ++i) {
      const double saved = data[i];
      data[i] = saved + step;
      const double up = loss_of();
      data[i] = saved - step;
      const double down = loss_of();
      data[i] = saved;
      const double fd = (up - down) / (2 * step);
      CHECK(std::abs(analytic[i] - fd) /
                std::max({1.0, std::abs(analytic[i]), std::abs(fd)}) < 1e-6);
    }
  };
  check_fd(state.b.data(), state.b.size(), grads.b.data());
  check_fd(state.a.data(), state.a.size(), grads.a.data());
  check_fd(x.data(), x.size(), grads.x.data());

  // merged weights equal the adapter path
  const Matrix merged = lora_merge(state, w0);
  const Vector probe = rng.normal(0.0, 1.0, 8);
  CHECK((merged * probe - lora_forward(state, w0, probe).first).cwiseAbs().maxCoeff() < 1e-9);
}
