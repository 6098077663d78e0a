#include "genlora/training.hpp"

#include <chrono>
#include <cmath>
#include <utility>

#include "genlora/rng.hpp"
#include "genlora/svd.hpp"

namespace genlora {
namespace {

// Spread of the hidden teacher's generator weights relative to the student
// init. Calibrated so the rank-r* signal sits well above the 0.005
// effective-rank threshold after a desk-scale run.
constexpr double kTeacherThetaScale = 2.0;

void validate(const TrainConfig& config) {
  if (config.m < 1 || config.n < 1 || config.layers < 1 || config.samples < 1 ||
      config.batch < 1) {
    throw ParameterError("train config: dims, layers, samples, batch must be positive");
  }
  if (config.layers > 1 && config.m != config.n) {
    throw ParameterError("train config: stacked layers require m == n");
  }
  if (!(config.lr > 0.0)) {
    throw ParameterError("train config: lr must be > 0");
  }
  if (config.warmup_steps < 0 || config.total_steps < 0 ||
      config.warmup_steps > config.total_steps) {
    throw ParameterError("train config: need 0 <= warmup_steps <= total_steps");
  }
  if (config.teacher_rank < 0) {
    throw ParameterError("train config: teacher rank must be >= 0");
  }
  if (config.adapter.dropout < 0.0 || config.adapter.dropout >= 1.0) {
    throw ParameterError("train config: dropout must be in [0, 1)");
  }
}

Matrix draw_matrix(RngStream& rng, Index rows, Index cols, double std) {
  Vector draws = rng.normal(0.0, std, rows * cols);
  return Eigen::Map<const Matrix>(draws.data(), cols, rows).transpose();
}

// Hidden rank-r* perturbation built from a random generator state, so the
// ground truth lies inside the family the student searches over.
Matrix draw_teacher_delta(RngStream& rng, const TrainConfig& config) {
  if (config.teacher_rank == 0) {
    return Matrix::Zero(config.m, config.n);
  }
  const Index groups = config.adapter.groups;
  GenLoraState teacher;
  teacher.m = config.m;
  teacher.n = config.n;
  teacher.rank = config.teacher_rank;
  teacher.groups = groups;
  teacher.grid = make_grid(config.adapter.k_centers, config.adapter.grid_lo,
                           config.adapter.grid_hi);
  teacher.epsilon = config.adapter.epsilon;
  const GroupLayout layout_b = teacher.layout_b();
  const GroupLayout layout_a = teacher.layout_a();
  teacher.z_b = rng.normal(0.0, 1.0, config.m);
  teacher.z_a = rng.normal(0.0, 1.0, config.n);
  const double std_b = kTeacherThetaScale / std::sqrt(static_cast<double>(layout_b.group_dim));
  const double std_a = kTeacherThetaScale / std::sqrt(static_cast<double>(layout_a.group_dim));
  for (Index i = 0; i < config.teacher_rank; ++i) {
    GeneratorParams bank_b;
    bank_b.rbf_weights = draw_matrix(rng, groups, teacher.grid.k_centers, std_b);
    bank_b.base_weights = rng.normal(0.0, std_b, groups);
    teacher.theta_b.push_back(std::move(bank_b));
    GeneratorParams bank_a;
    bank_a.rbf_weights = draw_matrix(rng, groups, teacher.grid.k_centers, std_a);
    bank_a.base_weights = rng.normal(0.0, std_a, groups);
    teacher.theta_a.push_back(std::move(bank_a));
  }
  return delta_w(teacher);
}

Matrix silu_map(const Matrix& m) {
  return m.unaryExpr([](double t) { return silu(t); });
}

}  // namespace

SyntheticTask make_synthetic_task(const TrainConfig& config) {
  validate(config);
  RngStream rng(config.seed);
  SyntheticTask task;
  task.kind = config.task;
  const double w0_std = 1.0 / std::sqrt(static_cast<double>(config.n));
  for (Index l = 0; l < config.layers; ++l) {
    task.w0.push_back(draw_matrix(rng, config.m, config.n, w0_std));
  }
  if (config.task == TaskKind::teacher_student) {
    task.teacher_delta = draw_teacher_delta(rng, config);
    task.inputs = draw_matrix(rng, config.n, config.samples, 1.0);
    // teacher forward: the perturbation sits on the first layer
    Matrix act = (task.w0[0] + task.teacher_delta) * task.inputs;
    for (Index l = 1; l < config.layers; ++l) {
      act = task.w0[static_cast<std::size_t>(l)] * silu_map(act);
    }
    task.targets = std::move(act);
  } else {
    // noisy prototypes, one class per output coordinate
    const Index classes = config.m;
    Matrix prototypes = draw_matrix(rng, config.n, classes, 1.0);
    task.inputs.resize(config.n, config.samples);
    task.labels.resize(static_cast<std::size_t>(config.samples));
    for (Index s = 0; s < config.samples; ++s) {
      const int label = static_cast<int>(s % classes);
      task.labels[static_cast<std::size_t>(s)] = label;
      task.inputs.col(s) = prototypes.col(label) + 0.3 * rng.normal(0.0, 1.0, config.n);
    }
  }
  return task;
}

std::vector<ParamBlock> collect_params(ToyModel& model) {
  std::vector<ParamBlock> blocks;
  if (model.kind == AdapterKind::genlora) {
    for (std::size_t l = 0; l < model.gen.size(); ++l) {
      auto& state = model.gen[l];
      const std::string prefix = "layer" + std::to_string(l) + ".";
      blocks.push_back({prefix + "z_b", state.z_b.data(), state.z_b.size(), state.freeze.z_b});
      blocks.push_back({prefix + "z_a", state.z_a.data(), state.z_a.size(), state.freeze.z_a});
      for (std::size_t i = 0; i < state.theta_b.size(); ++i) {
        auto& bank = state.theta_b[i];
        const std::string base = prefix + "theta_b." + std::to_string(i);
        blocks.push_back({base + ".rbf", bank.rbf_weights.data(), bank.rbf_weights.size(),
                          state.freeze.theta_b});
        blocks.push_back({base + ".base", bank.base_weights.data(), bank.base_weights.size(),
                          state.freeze.theta_b});
      }
      for (std::size_t i = 0; i < state.theta_a.size(); ++i) {
        auto& bank = state.theta_a[i];
        const std::string base = prefix + "theta_a." + std::to_string(i);
        blocks.push_back({base + ".rbf", bank.rbf_weights.data(), bank.rbf_weights.size(),
                          state.freeze.theta_a});
        blocks.push_back({base + ".base", bank.base_weights.data(), bank.base_weights.size(),
                          state.freeze.theta_a});
      }
    }
  } else {
    for (std::size_t l = 0; l < model.lora.size(); ++l) {
      auto& state = model.lora[l];
      const std::string prefix = "layer" + std::to_string(l) + ".";
      blocks.push_back({prefix + "b", state.b.data(), state.b.size(), false});
      blocks.push_back({prefix + "a", state.a.data(), state.a.size(), false});
    }
  }
  return blocks;
}

namespace {

std::vector<ParamBlock> gen_grad_blocks(std::vector<GenLoraGrads>& grads,
                                        const std::vector<GenLoraState>& states) {
  std::vector<ParamBlock> blocks;
  for (std::size_t l = 0; l < grads.size(); ++l) {
    auto& g = grads[l];
    const auto& state = states[l];
    const std::string prefix = "layer" + std::to_string(l) + ".";
    blocks.push_back({prefix + "z_b", g.z_b.data(), g.z_b.size(), state.freeze.z_b});
    blocks.push_back({prefix + "z_a", g.z_a.data(), g.z_a.size(), state.freeze.z_a});
    for (std::size_t i = 0; i < g.theta_b.size(); ++i) {
      auto& bank = g.theta_b[i];
      const std::string base = prefix + "theta_b." + std::to_string(i);
      blocks.push_back(
          {base + ".rbf", bank.rbf_weights.data(), bank.rbf_weights.size(), state.freeze.theta_b});
      blocks.push_back({base + ".base", bank.base_weights.data(), bank.base_weights.size(),
                        state.freeze.theta_b});
    }
    for (std::size_t i = 0; i < g.theta_a.size(); ++i) {
      auto& bank = g.theta_a[i];
      const std::string base = prefix + "theta_a." + std::to_string(i);
      blocks.push_back(
          {base + ".rbf", bank.rbf_weights.data(), bank.rbf_weights.size(), state.freeze.theta_a});
      blocks.push_back({base + ".base", bank.base_weights.data(), bank.base_weights.size(),
                        state.freeze.theta_a});
    }
  }
  return blocks;
}

std::vector<ParamBlock> lora_grad_blocks(std::vector<LoraGrads>& grads) {
  std::vector<ParamBlock> blocks;
  for (std::size_t l = 0; l < grads.size(); ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    blocks.push_back({prefix + "b", grads[l].b.data(), grads[l].b.size(), false});
    blocks.push_back({prefix + "a", grads[l].a.data(), grads[l].a.size(), false});
  }
  return blocks;
}

Matrix model_delta_w(const ToyModel& model, std::size_t layer) {
  if (model.kind == AdapterKind::genlora) {
    return model.gen[layer].scale * delta_w(model.gen[layer]);
  }
  const auto& state = model.lora[layer];
  return (state.alpha / static_cast<double>(state.rank)) * lora_delta_w(state);
}

struct LossGrad {
  double loss = 0.0;
  Matrix upstream;  // dL/dh for the final layer output
};

LossGrad mse_loss(const Matrix& h, const Matrix& y) {
  LossGrad out;
  const Matrix resid = h - y;
  const double count = static_cast<double>(resid.size());
  out.loss = resid.squaredNorm() / count;
  out.upstream = (2.0 / count) * resid;
  return out;
}

LossGrad cross_entropy_loss(const Matrix& logits, const std::vector<int>& labels,
                            const std::vector<Index>& batch_index) {
  LossGrad out;
  const Index batch = logits.cols();
  out.upstream.resize(logits.rows(), batch);
  double total = 0.0;
  for (Index c = 0; c < batch; ++c) {
    const Vector col = logits.col(c);
    const double max_logit = col.maxCoeff();
    Vector probs = (col.array() - max_logit).exp();
    probs /= probs.sum();
    const int label = labels[static_cast<std::size_t>(batch_index[static_cast<std::size_t>(c)])];
    total -= std::log(probs[label]);
    out.upstream.col(c) = probs / static_cast<double>(batch);
    out.upstream(label, c) -= 1.0 / static_cast<double>(batch);
  }
  out.loss = total / static_cast<double>(batch);
  return out;
}

}  // namespace

std::pair<ToyModel, TrainReport> train(const TrainConfig& config) {
  validate(config);
  const auto wall_start = std::chrono::steady_clock::now();
  SyntheticTask task = make_synthetic_task(config);

  // one stream drives task generation, init, and batch sampling, in order
  RngStream rng(config.seed ^ 0x243f6a8885a308d3ULL);  // init/batch stream
  ToyModel model;
  model.kind = config.adapter.kind;
  model.w0 = task.w0;
  const Index groups = config.force_single_group ? 1 : config.adapter.groups;
  const GridSpec grid =
      make_grid(config.adapter.k_centers, config.adapter.grid_lo, config.adapter.grid_hi);
  for (Index l = 0; l < config.layers; ++l) {
    if (config.adapter.kind == AdapterKind::genlora) {
      GenLoraState state = genlora_init(config.m, config.n, config.adapter.rank, groups, grid,
                                        config.adapter.epsilon, rng);
      state.scale = config.adapter.scale;
      state.normalize = !config.disable_norm;
      state.freeze = config.freeze;
      model.gen.push_back(std::move(state));
    } else {
      model.lora.push_back(
          lora_init(config.m, config.n, config.adapter.rank, config.adapter.alpha, rng));
    }
  }

  std::vector<ParamBlock> params = collect_params(model);
  OptimizerState opt = make_optimizer(params);  // weight decay 0 throughout
  const Schedule schedule{config.lr, config.warmup_steps, config.total_steps};

  TrainReport report;
  report.seed = config.seed;
  report.losses.reserve(static_cast<std::size_t>(config.total_steps));
  report.lrs.reserve(static_cast<std::size_t>(config.total_steps));
  const Index check_every = std::max<Index>(1, config.total_steps / 10);

  const bool full_batch = config.batch >= config.samples;
  std::vector<Index> batch_index(static_cast<std::size_t>(
      full_batch ? config.samples : config.batch));

  // full-dataset loss at the current parameters
  auto evaluate_full = [&]() {
    Matrix act = task.inputs;
    for (Index l = 0; l < config.layers; ++l) {
      if (l > 0) act = silu_map(act);
      Matrix h;
      if (model.kind == AdapterKind::genlora) {
        h = adapter_forward(model.gen[static_cast<std::size_t>(l)],
                            task.w0[static_cast<std::size_t>(l)], act)
                .first;
      } else {
        h = lora_forward(model.lora[static_cast<std::size_t>(l)],
                         task.w0[static_cast<std::size_t>(l)], act)
                .first;
      }
      act = std::move(h);
    }
    if (config.task == TaskKind::teacher_student) {
      return mse_loss(act, task.targets).loss;
    }
    std::vector<Index> all(static_cast<std::size_t>(config.samples));
    for (Index s = 0; s < config.samples; ++s) all[static_cast<std::size_t>(s)] = s;
    return cross_entropy_loss(act, task.labels, all).loss;
  };
  report.initial_loss = evaluate_full();

  for (Index step = 0; step < config.total_steps; ++step) {
    // pick the batch
    if (full_batch) {
      for (Index s = 0; s < config.samples; ++s) batch_index[static_cast<std::size_t>(s)] = s;
    } else {
      for (auto& idx : batch_index) {
        idx = static_cast<Index>(rng.next_u64() % static_cast<std::uint64_t>(config.samples));
      }
    }
    Matrix x(config.n, static_cast<Index>(batch_index.size()));
    for (std::size_t c = 0; c < batch_index.size(); ++c) {
      x.col(static_cast<Index>(c)) = task.inputs.col(batch_index[c]);
    }

    // forward through the stack, keeping tapes and pre-activations
    std::vector<GenLoraTape> gen_tapes(static_cast<std::size_t>(config.layers));
    std::vector<Matrix> lora_inputs(static_cast<std::size_t>(config.layers));
    std::vector<Matrix> preacts(static_cast<std::size_t>(config.layers));
    Matrix act = x;
    for (Index l = 0; l < config.layers; ++l) {
      if (l > 0) act = silu_map(act);
      const auto& w0 = task.w0[static_cast<std::size_t>(l)];
      if (model.kind == AdapterKind::genlora) {
        auto& state = model.gen[static_cast<std::size_t>(l)];
        if (config.adapter.dropout > 0.0) {
          // dropout on the adapter-branch input only, inverted scaling
          Matrix x_adapter = act;
          const double keep = 1.0 - config.adapter.dropout;
          for (Index j = 0; j < x_adapter.size(); ++j) {
            x_adapter.data()[j] =
                (rng.next_unit() < keep) ? x_adapter.data()[j] / keep : 0.0;
          }
          auto [h_branch, tape] = adapter_forward(state, Matrix::Zero(config.m, config.n),
                                                  x_adapter);
          preacts[static_cast<std::size_t>(l)] = w0 * act + h_branch;
          gen_tapes[static_cast<std::size_t>(l)] = std::move(tape);
        } else {
          auto [h, tape] = adapter_forward(state, w0, act);
          preacts[static_cast<std::size_t>(l)] = std::move(h);
          gen_tapes[static_cast<std::size_t>(l)] = std::move(tape);
        }
      } else {
        auto [h, xin] = lora_forward(model.lora[static_cast<std::size_t>(l)], w0, act);
        preacts[static_cast<std::size_t>(l)] = std::move(h);
        lora_inputs[static_cast<std::size_t>(l)] = std::move(xin);
      }
      act = preacts[static_cast<std::size_t>(l)];
    }

    LossGrad lg;
    if (config.task == TaskKind::teacher_student) {
      Matrix y(config.m, static_cast<Index>(batch_index.size()));
      for (std::size_t c = 0; c < batch_index.size(); ++c) {
        y.col(static_cast<Index>(c)) = task.targets.col(batch_index[c]);
      }
      lg = mse_loss(act, y);
    } else {
      lg = cross_entropy_loss(act, task.labels, batch_index);
    }
    if (!std::isfinite(lg.loss)) {
      throw NumericalError("train: non-finite loss at step " + std::to_string(step));
    }
    report.losses.push_back(lg.loss);
    const double lr = lr_at(step, schedule);
    report.lrs.push_back(lr);

    // backward through the stack
    std::vector<GenLoraGrads> gen_grads(static_cast<std::size_t>(config.layers));
    std::vector<LoraGrads> lora_grads(static_cast<std::size_t>(config.layers));
    Matrix upstream = std::move(lg.upstream);
    for (Index l = config.layers - 1; l >= 0; --l) {
      const auto& w0 = task.w0[static_cast<std::size_t>(l)];
      if (model.kind == AdapterKind::genlora) {
        gen_grads[static_cast<std::size_t>(l)] =
            adapter_backward(model.gen[static_cast<std::size_t>(l)],
                             gen_tapes[static_cast<std::size_t>(l)], w0, upstream);
        upstream = std::move(gen_grads[static_cast<std::size_t>(l)].x);
      } else {
        lora_grads[static_cast<std::size_t>(l)] =
            lora_backward(model.lora[static_cast<std::size_t>(l)],
                          lora_inputs[static_cast<std::size_t>(l)], w0, upstream);
        upstream = std::move(lora_grads[static_cast<std::size_t>(l)].x);
      }
      if (l > 0) {
        const Matrix& pre = preacts[static_cast<std::size_t>(l - 1)];
        upstream.array() *= pre.unaryExpr([](double t) { return silu_deriv(t); }).array();
      }
    }

    std::vector<ParamBlock> grad_blocks =
        model.kind == AdapterKind::genlora ? gen_grad_blocks(gen_grads, model.gen)
                                           : lora_grad_blocks(lora_grads);
    for (const auto& block : grad_blocks) {
      if (!Eigen::Map<const Vector>(block.data, block.size).allFinite()) {
        throw NumericalError("train: non-finite gradient in block '" + block.name +
                             "' at step " + std::to_string(step));
      }
    }
    adamw_step(params, grad_blocks, opt, lr);

    if ((step + 1) % check_every == 0 || step + 1 == config.total_steps) {
      const Matrix dw = model_delta_w(model, 0);
      if (!dw.allFinite()) {
        throw NumericalError("train: non-finite update at step " + std::to_string(step));
      }
      const Vector sigma = svd(dw).singular_values;
      TrainReport::RankCheck check;
      check.step = step + 1;
      const double sigma_max = sigma.size() > 0 ? sigma[0] : 0.0;
      check.rank_bounded = true;
      for (Index i = config.adapter.rank; i < sigma.size(); ++i) {
        if (sigma[i] >= 1e-10 * sigma_max) {
          check.rank_bounded = false;
          break;
        }
      }
      Index er = 0;
      while (er < sigma.size() && sigma[er] > 0.005) ++er;
      check.effective_rank = er;
      report.rank_checks.push_back(check);
    }
  }

  report.final_loss = config.total_steps > 0 ? evaluate_full() : report.initial_loss;

  for (Index l = 0; l < config.layers; ++l) {
    const Matrix dw = model_delta_w(model, static_cast<std::size_t>(l));
    std::uint64_t param_count = 0;
    if (model.kind == AdapterKind::genlora) {
      param_count = enumerate_trainable(model.gen[static_cast<std::size_t>(l)]);
    } else {
      param_count = static_cast<std::uint64_t>(config.adapter.rank) *
                    static_cast<std::uint64_t>(config.m + config.n);
    }
    report.final_spectra.push_back(
        analyze_matrix("layer" + std::to_string(l), dw, 0.005, param_count));
  }
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();
  return {std::move(model), std::move(report)};
}

}  // namespace genlora
