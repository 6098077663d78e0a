#pragma once

#include <string>
#include <vector>

#include "genlora/core.hpp"

namespace genlora {

/// View of one named, contiguous parameter (or gradient) block.
struct ParamBlock {
  std::string name;
  double* data = nullptr;
  Index size = 0;
  bool frozen = false;
};

/// AdamW moments. Weight decay is decoupled; with weight_decay = 0 the
/// update is plain Adam.
struct OptimizerState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  long step = 0;
  std::vector<Vector> first_moment;
  std::vector<Vector> second_moment;
};

OptimizerState make_optimizer(const std::vector<ParamBlock>& params, double weight_decay = 0.0);

/// One bias-corrected update. Frozen blocks are skipped entirely (their
/// moments do not advance either, so unfreezing later starts cold).
void adamw_step(std::vector<ParamBlock>& params, const std::vector<ParamBlock>& grads,
                OptimizerState& opt, double lr);

struct Schedule {
  double base_lr = 0.0;
  Index warmup_steps = 0;
  Index total_steps = 0;
};

/// Linear ramp 0 -> base over [0, warmup], then linear decay base -> 0
/// over [warmup, total]. `step` outside [0, total] is a parameter error.
double lr_at(Index step, const Schedule& schedule);

}  // namespace genlora
