#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "genlora/adapters.hpp"
#include "genlora/analysis.hpp"
#include "genlora/core.hpp"
#include "genlora/optim.hpp"

namespace genlora {

enum class TaskKind { teacher_student, tiny_classification };
enum class AdapterKind { genlora, lora };

struct AdapterConfig {
  AdapterKind kind = AdapterKind::genlora;
  Index rank = 8;
  Index groups = 4;
  Index k_centers = 15;
  double grid_lo = -3.0;
  double grid_hi = 3.0;
  double epsilon = 1e-5;
  double alpha = 16.0;  // LoRA baseline only; update scaled by alpha / rank
  double scale = 1.0;   // GenLoRA path scale, 1 by default
  double dropout = 0.0;
};

struct TrainConfig {
  TaskKind task = TaskKind::teacher_student;
  Index m = 64;
  Index n = 64;
  Index layers = 1;
  Index teacher_rank = 4;
  Index samples = 256;
  Index batch = 256;
  AdapterConfig adapter;
  double lr = 0.1;
  Index warmup_steps = 100;
  Index total_steps = 500;
  std::uint64_t seed = 42;
  bool disable_norm = false;
  bool force_single_group = false;
  FreezeFlags freeze;
};

/// Deterministic synthetic dataset. Teacher-student draws a hidden rank-r*
/// perturbation realizable by the generator family (a random hidden
/// adapter state), so the ground truth is reachable by training;
/// tiny-classification draws noisy class prototypes with integer labels.
struct SyntheticTask {
  TaskKind kind = TaskKind::teacher_student;
  std::vector<Matrix> w0;   // frozen base weights, one per layer
  Matrix inputs;            // n x samples
  Matrix targets;           // m x samples (teacher-student)
  std::vector<int> labels;  // tiny-classification
  Matrix teacher_delta;     // hidden perturbation of the first layer (teacher-student)
};

SyntheticTask make_synthetic_task(const TrainConfig& config);

/// The toy model: `layers` adapted linear maps with SiLU between layers
/// (requires m == n when layers > 1).
struct ToyModel {
  AdapterKind kind = AdapterKind::genlora;
  std::vector<Matrix> w0;
  std::vector<GenLoraState> gen;
  std::vector<LoraState> lora;
};

struct TrainReport {
  std::vector<double> losses;  // one entry per executed step
  std::vector<double> lrs;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double wall_seconds = 0.0;  // not serialized; reruns must be byte-identical
  struct RankCheck {
    Index step = 0;
    Index effective_rank = 0;
    bool rank_bounded = false;  // singular values past `rank` below 1e-10 * sigma_max
  };
  std::vector<RankCheck> rank_checks;  // sampled checkpoints, first layer
  std::vector<SpectrumReport> final_spectra;
  std::uint64_t seed = 0;
};

/// Algorithm loop: synthesize, forward, loss, backward, AdamW update.
/// Aborts with NumericalError naming the step if the loss or any gradient
/// goes non-finite.
std::pair<ToyModel, TrainReport> train(const TrainConfig& config);

/// Trainable views over a model's adapter blocks (for the optimizer).
std::vector<ParamBlock> collect_params(ToyModel& model);

}  // namespace genlora
