#include "genlora/optim.hpp"

#include <cmath>

namespace genlora {

OptimizerState make_optimizer(const std::vector<ParamBlock>& params, double weight_decay) {
  OptimizerState opt;
  opt.weight_decay = weight_decay;
  opt.first_moment.reserve(params.size());
  opt.second_moment.reserve(params.size());
  for (const auto& block : params) {
    opt.first_moment.emplace_back(Vector::Zero(block.size));
    opt.second_moment.emplace_back(Vector::Zero(block.size));
  }
  return opt;
}

void adamw_step(std::vector<ParamBlock>& params, const std::vector<ParamBlock>& grads,
                OptimizerState& opt, double lr) {
  if (params.size() != grads.size() || params.size() != opt.first_moment.size()) {
    throw ShapeError("adamw_step: block counts differ");
  }
  opt.step += 1;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& block = params[i];
    const auto& grad = grads[i];
    if (block.size != grad.size || block.size != opt.first_moment[i].size()) {
      throw ShapeError("adamw_step: shape mismatch in block '" + block.name + "'");
    }
    if (block.frozen) {
      continue;
    }
    Eigen::Map<Vector> p(block.data, block.size);
    Eigen::Map<const Vector> g(grad.data, grad.size);
    Vector& m = opt.first_moment[i];
    Vector& v = opt.second_moment[i];
    m = opt.beta1 * m + (1.0 - opt.beta1) * g;
    v = opt.beta2 * v + (1.0 - opt.beta2) * g.cwiseProduct(g);
    p.array() -= lr * ((m.array() / bc1) / ((v.array() / bc2).sqrt() + opt.eps) +
                       opt.weight_decay * p.array());
  }
}

double lr_at(Index step, const Schedule& schedule) {
  if (step < 0 || step > schedule.total_steps) {
    throw ParameterError("lr_at: step outside [0, total_steps]");
  }
  if (schedule.warmup_steps > schedule.total_steps) {
    throw ParameterError("lr_at: warmup exceeds total steps");
  }
  if (schedule.warmup_steps > 0 && step < schedule.warmup_steps) {
    return schedule.base_lr * static_cast<double>(step) /
           static_cast<double>(schedule.warmup_steps);
  }
  if (schedule.total_steps == schedule.warmup_steps) {
    return schedule.base_lr;
  }
  return schedule.base_lr * static_cast<double>(schedule.total_steps - step) /
         static_cast<double>(schedule.total_steps - schedule.warmup_steps);
}

}  // namespace genlora
