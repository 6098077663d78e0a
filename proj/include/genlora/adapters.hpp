#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "genlora/core.hpp"
#include "genlora/rbf.hpp"
#include "genlora/rng.hpp"

namespace genlora {

struct FreezeFlags {
  bool z_a = false;
  bool z_b = false;
  bool theta_a = false;
  bool theta_b = false;
};

/// Adapter state for one m x n weight: two latent vectors plus r generator
/// parameter banks per side. The synthesized update is
///   delta_w = [f(z_b; theta_b[0]) ... ] * [f(z_a; theta_a[0]) ... ]^T.
struct GenLoraState {
  Index m = 0;
  Index n = 0;
  Index rank = 0;
  Index groups = 0;
  Vector z_b;                          // length m
  Vector z_a;                          // length n
  std::vector<GeneratorParams> theta_b;  // rank banks over GroupLayout(m, groups)
  std::vector<GeneratorParams> theta_a;  // rank banks over GroupLayout(n, groups)
  GridSpec grid;
  double epsilon = 1e-5;
  double scale = 1.0;
  bool normalize = true;
  FreezeFlags freeze;

  GroupLayout layout_b() const { return make_group_layout(m, groups); }
  GroupLayout layout_a() const { return make_group_layout(n, groups); }
};

/// Gradients mirroring the trainable blocks of a GenLoraState.
struct GenLoraGrads {
  Vector z_b;
  Vector z_a;
  std::vector<GeneratorParams> theta_b;
  std::vector<GeneratorParams> theta_a;
  Matrix x;  // gradient wrt the layer input
};

/// Forward tape: synthesized factors plus generator tapes and the input.
struct GenLoraTape {
  Matrix b;  // m x rank
  Matrix a;  // rank x n
  std::vector<GeneratorTape> tapes_b;
  std::vector<GeneratorTape> tapes_a;
  Matrix x;  // n x batch input as seen by the adapter
};

/// Standard LoRA baseline, update scaled by alpha / rank.
struct LoraState {
  Index m = 0;
  Index n = 0;
  Index rank = 0;
  Matrix b;  // m x rank
  Matrix a;  // rank x n
  double alpha = 0.0;
};

struct LoraGrads {
  Matrix b;
  Matrix a;
  Matrix x;
};

/// Named weight shapes of a model family, used for parameter accounting.
struct ModelSpec {
  struct Entry {
    std::string name;
    Index out_dim = 0;
    Index in_dim = 0;
    Index count = 1;  // e.g. number of layers carrying this matrix
  };
  std::string name;
  std::vector<Entry> entries;
};

/// Asymmetric zero init: z_a Kaiming-uniform on [-sqrt(3/n), sqrt(3/n)],
/// theta_a banks i.i.d. normal with std 1/sqrt(n/groups); z_b and theta_b
/// zero, so the synthesized update starts exactly at zero.
GenLoraState genlora_init(Index m, Index n, Index rank, Index groups, const GridSpec& grid,
                          double epsilon, RngStream& rng);

/// Runs all 2r generators; column i of B and row i of A come from bank i.
std::tuple<Matrix, Matrix, std::vector<GeneratorTape>, std::vector<GeneratorTape>> synthesize(
    const GenLoraState& state);

/// delta_w = B * A (equal to the sum of rank-1 outer products).
Matrix delta_w(const GenLoraState& state);

/// h = w0 * x + scale * B * A * x.
std::pair<Matrix, GenLoraTape> adapter_forward(const GenLoraState& state,
                                               const Eigen::Ref<const Matrix>& w0,
                                               const Eigen::Ref<const Matrix>& x);

/// Reverse-mode gradients through the adapter path. With
/// g_hat = scale * upstream * x^T, column i of B sees g_hat * a_i and row i
/// of A sees b_i^T * g_hat; the generator backward maps those onto the
/// latents and parameter banks. Frozen blocks come back zeroed.
GenLoraGrads adapter_backward(const GenLoraState& state, const GenLoraTape& tape,
                              const Eigen::Ref<const Matrix>& w0,
                              const Eigen::Ref<const Matrix>& upstream);

/// w0 + scale * delta_w, for zero-overhead inference.
Matrix merge(const GenLoraState& state, const Eigen::Ref<const Matrix>& w0);

/// B zero, A normal with std 1/sqrt(n); update starts at zero.
LoraState lora_init(Index m, Index n, Index rank, double alpha, RngStream& rng);
std::pair<Matrix, Matrix> lora_forward(const LoraState& state, const Eigen::Ref<const Matrix>& w0,
                                       const Eigen::Ref<const Matrix>& x);
LoraGrads lora_backward(const LoraState& state, const Eigen::Ref<const Matrix>& x,
                        const Eigen::Ref<const Matrix>& w0,
                        const Eigen::Ref<const Matrix>& upstream);
Matrix lora_delta_w(const LoraState& state);
Matrix lora_merge(const LoraState& state, const Eigen::Ref<const Matrix>& w0);

struct ParamCountBreakdown {
  struct Row {
    std::string name;
    Index count = 1;
    std::uint64_t per_matrix = 0;
    std::uint64_t subtotal = 0;
  };
  std::vector<Row> rows;
  std::uint64_t total = 0;
};

/// (m + n) + 2 r G (K + 1) per matrix.
ParamCountBreakdown param_count_genlora(const ModelSpec& spec, Index rank, Index groups,
                                        Index k_centers);

/// r (m + n) per matrix.
ParamCountBreakdown param_count_lora(const ModelSpec& spec, Index rank);

/// Literal enumeration of trainable scalars held by a state (ignores
/// freeze flags); must match the closed form exactly.
std::uint64_t enumerate_trainable(const GenLoraState& state);

}  // namespace genlora
