#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include "genlora/adapters.hpp"
#include "genlora/analysis.hpp"
#include "genlora/gradcheck.hpp"
#include "genlora/io.hpp"
#include "genlora/rng.hpp"
#include "genlora/training.hpp"

namespace fs = std::filesystem;
using namespace genlora;

namespace {

constexpr double kGradCheckTol = 1e-6;
constexpr double kMergeVerifyTol = 1e-9;

std::pair<Index, Index> parse_dims(const std::string& dims) {
  const auto sep = dims.find('x');
  if (sep == std::string::npos) {
    throw ParameterError("--dims expects MxN, e.g. 6x8");
  }
  try {
    return {static_cast<Index>(std::stoll(dims.substr(0, sep))),
            static_cast<Index>(std::stoll(dims.substr(sep + 1)))};
  } catch (const std::exception&) {
    throw ParameterError("--dims expects MxN, e.g. 6x8");
  }
}

int run_param_count(const std::string& spec_path, const std::string& method, Index rank,
                    Index groups, Index centers) {
  const ModelSpec spec = parse_model_spec(load_json_file(spec_path));
  ParamCountBreakdown breakdown;
  if (method == "genlora") {
    breakdown = param_count_genlora(spec, rank, groups, centers);
    std::printf("method: genlora (r=%lld, G=%lld, K=%lld)\n", static_cast<long long>(rank),
                static_cast<long long>(groups), static_cast<long long>(centers));
  } else if (method == "lora") {
    breakdown = param_count_lora(spec, rank);
    std::printf("method: lora (r=%lld)\n", static_cast<long long>(rank));
  } else {
    throw ParameterError("--method must be genlora or lora");
  }
  std::printf("model: %s\n", spec.name.c_str());
  for (const auto& row : breakdown.rows) {
    std::printf("%s: %llu per matrix x %lld = %llu\n", row.name.c_str(),
                static_cast<unsigned long long>(row.per_matrix),
                static_cast<long long>(row.count),
                static_cast<unsigned long long>(row.subtotal));
  }
  std::printf("total: %llu\n", static_cast<unsigned long long>(breakdown.total));
  return 0;
}

int run_train(const std::string& config_path, const std::string& out_dir) {
  const TrainConfig config = parse_train_config(load_json_file(config_path));
  auto [model, report] = train(config);
  fs::create_directories(out_dir);
  save_container(fs::path(out_dir) / "checkpoint.glra", checkpoint_from_model(model, config));
  write_text_atomic(fs::path(out_dir) / "report.json",
                    train_report_to_json(report, config).dump(2) + "\n");
  write_text_atomic(fs::path(out_dir) / "loss.csv", loss_csv(report));
  std::printf("steps: %zu\ninitial loss: %.6g\nfinal loss: %.6g\nwall seconds: %.3f\n",
              report.losses.size(), report.initial_loss, report.final_loss,
              report.wall_seconds);
  return 0;
}

int run_gradcheck(const std::string& dims, Index rank, Index groups, Index centers,
                  std::uint64_t seed, Index trials) {
  GradCheckResult result;
  if (trials > 0) {
    result = gradcheck_random_sweep(trials, seed);
    std::printf("random sweep: %lld configurations\n", static_cast<long long>(trials));
  } else {
    GradCheckConfig config;
    std::tie(config.m, config.n) = parse_dims(dims);
    config.rank = rank;
    config.groups = groups;
    config.k_centers = centers;
    config.seed = seed;
    result = gradcheck(config);
  }
  bool pass = true;
  for (const auto& block : result.blocks) {
    std::printf("%s: max relative error %.3e\n", block.name.c_str(), block.max_rel_error);
    pass = pass && block.max_rel_error < kGradCheckTol;
  }
  std::printf("%s (worst %.3e, tolerance %.0e)\n", pass ? "PASS" : "FAIL", result.worst,
              kGradCheckTol);
  return pass ? 0 : 1;
}

int run_analyze(const std::string& checkpoint_path, double threshold,
                const std::string& out_path) {
  auto [model, config] = model_from_checkpoint(load_container(checkpoint_path));
  std::vector<SpectrumReport> reports;
  for (std::size_t l = 0; l < model.w0.size(); ++l) {
    Matrix dw;
    std::uint64_t params = 0;
    if (model.kind == AdapterKind::genlora) {
      dw = model.gen[l].scale * delta_w(model.gen[l]);
      params = enumerate_trainable(model.gen[l]);
    } else {
      const auto& state = model.lora[l];
      dw = (state.alpha / static_cast<double>(state.rank)) * lora_delta_w(state);
      params = static_cast<std::uint64_t>(state.rank) *
               static_cast<std::uint64_t>(state.m + state.n);
    }
    reports.push_back(analyze_matrix("layer" + std::to_string(l), dw, threshold, params));
  }
  write_text_atomic(out_path, spectra_csv(reports));
  fs::path json_path(out_path);
  json_path.replace_extension(".json");
  write_text_atomic(json_path, spectra_to_json(reports).dump(2) + "\n");
  for (const auto& report : reports) {
    std::printf("%s: effective rank %lld at tau=%g, energy %.6g, params %llu\n",
                report.name.c_str(), static_cast<long long>(report.effective_rank),
                report.threshold, report.energy,
                static_cast<unsigned long long>(report.param_count));
  }
  return 0;
}

int run_reconstruct(const std::string& target_path, Index groups, Index centers, Index epochs,
                    double lr, const std::string& out_path) {
  const Matrix target = load_weight(target_path);
  const GridSpec grid = make_grid(centers, -3.0, 3.0);
  ReconstructOptions options;
  options.groups = groups;
  options.epochs = epochs;
  options.lr = lr;
  const FitReport report = reconstruct_basis(target, grid, options);
  write_text_atomic(out_path, fit_report_to_json(report, groups, centers).dump(2) + "\n");
  std::printf("rows: %lld, dim: %lld\n", static_cast<long long>(target.rows()),
              static_cast<long long>(target.cols()));
  std::printf("parameter ratio: %.6g%%\n", 100.0 * report.parameter_ratio);
  std::printf("mean mse: %.6g (least-squares floor %.6g, gap %.3g)\n", report.mean_mse,
              report.ls_floor_mse, report.gap);
  return 0;
}

int run_merge(const std::string& base_path, const std::string& adapter_path,
              const std::string& out_path, bool verify, Index layer) {
  const Matrix base = load_weight(base_path);
  auto [model, config] = model_from_checkpoint(load_container(adapter_path));
  if (layer < 0 || static_cast<std::size_t>(layer) >= model.w0.size()) {
    throw ParameterError("merge: layer index out of range");
  }
  Matrix merged;
  if (model.kind == AdapterKind::genlora) {
    merged = merge(model.gen[static_cast<std::size_t>(layer)], base);
  } else {
    merged = lora_merge(model.lora[static_cast<std::size_t>(layer)], base);
  }
  save_weight(out_path, merged);
  if (verify) {
    // random-probe forward comparison between merged weights and adapter path
    RngStream rng(0x6d657267ULL);  // fixed probe seed keeps outputs reproducible
    double worst = 0.0;
    for (int probe = 0; probe < 100; ++probe) {
      const Vector x = rng.normal(0.0, 1.0, base.cols());
      Vector via_adapter;
      if (model.kind == AdapterKind::genlora) {
        via_adapter =
            adapter_forward(model.gen[static_cast<std::size_t>(layer)], base, x).first;
      } else {
        via_adapter = lora_forward(model.lora[static_cast<std::size_t>(layer)], base, x).first;
      }
      worst = std::max(worst, (merged * x - via_adapter).cwiseAbs().maxCoeff());
    }
    const bool pass = worst < kMergeVerifyTol;
    std::printf("verify: %s (max abs diff %.3e over 100 probes, tolerance %.0e)\n",
                pass ? "PASS" : "FAIL", worst, kMergeVerifyTol);
    if (!pass) {
      return 1;
    }
  }
  std::printf("merged %lldx%lld weight written to %s\n", static_cast<long long>(merged.rows()),
              static_cast<long long>(merged.cols()), out_path.c_str());
  return 0;
}

int run_make_target(const std::string& kind, Index rows, Index dim, const std::string& out_path) {
  if (rows < 1 || dim < 1) {
    throw ParameterError("make-target: rows and dim must be positive");
  }
  Matrix target;
  if (kind == "zero") {
    target = Matrix::Zero(rows, dim);
  } else if (kind == "sinusoid") {
    target = sinusoid_target(rows, dim);
  } else {
    throw ParameterError("make-target: kind must be sinusoid or zero");
  }
  save_weight(out_path, target);
  std::printf("wrote %lldx%lld target to %s\n", static_cast<long long>(rows),
              static_cast<long long>(dim), out_path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GenLoRA: generative low-rank adapters with RBF basis-vector generators"};
  app.require_subcommand(1);

  std::string spec_path, method = "genlora";
  Index pc_rank = 8, pc_groups = 16, pc_centers = 15;
  auto* param_count = app.add_subcommand("param-count", "closed-form trainable parameter counts");
  param_count->add_option("--model-spec", spec_path, "model spec JSON")->required();
  param_count->add_option("--method", method, "genlora or lora");
  param_count->add_option("--rank", pc_rank, "adapter rank r");
  param_count->add_option("--groups", pc_groups, "groups G");
  param_count->add_option("--centers", pc_centers, "RBF centers K");

  std::string config_path, out_dir;
  auto* train_cmd = app.add_subcommand("train", "run the desk-scale training harness");
  train_cmd->add_option("--config", config_path, "train config JSON")->required();
  train_cmd->add_option("--out", out_dir, "output directory")->required();

  std::string gc_dims = "6x8";
  Index gc_rank = 2, gc_groups = 2, gc_centers = 3, gc_trials = 0;
  std::uint64_t gc_seed = 1;
  auto* gradcheck_cmd =
      app.add_subcommand("gradcheck", "analytic backward vs central finite differences");
  gradcheck_cmd->add_option("--dims", gc_dims, "adapter dims MxN");
  gradcheck_cmd->add_option("--rank", gc_rank, "rank r");
  gradcheck_cmd->add_option("--groups", gc_groups, "groups G");
  gradcheck_cmd->add_option("--centers", gc_centers, "RBF centers K");
  gradcheck_cmd->add_option("--seed", gc_seed, "rng seed");
  auto* trials_opt =
      gradcheck_cmd->add_option("--trials", gc_trials, "random configurations to sweep");

  std::string ckpt_path, analyze_out;
  double threshold = 0.005;
  auto* analyze_cmd = app.add_subcommand("analyze", "singular value spectrum of the update");
  analyze_cmd->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  analyze_cmd->add_option("--threshold", threshold, "effective-rank threshold");
  analyze_cmd->add_option("--out", analyze_out, "output CSV path")->required();

  std::string target_path, fit_out;
  Index rc_groups = 16, rc_centers = 15, rc_epochs = 2000;
  double rc_lr = 1e-3;
  auto* reconstruct_cmd =
      app.add_subcommand("reconstruct", "fit generators to explicit basis vectors");
  reconstruct_cmd->add_option("--target", target_path, "row-matrix tensor file")->required();
  reconstruct_cmd->add_option("--groups", rc_groups, "groups G");
  reconstruct_cmd->add_option("--centers", rc_centers, "RBF centers K");
  reconstruct_cmd->add_option("--epochs", rc_epochs, "Adam epochs");
  reconstruct_cmd->add_option("--lr", rc_lr, "Adam learning rate");
  reconstruct_cmd->add_option("--out", fit_out, "fit report JSON path")->required();

  std::string base_path, adapter_path, merge_out;
  bool verify = false;
  Index merge_layer = 0;
  auto* merge_cmd = app.add_subcommand("merge", "fold the update into the base weights");
  merge_cmd->add_option("--base", base_path, "base weight tensor file")->required();
  merge_cmd->add_option("--adapter", adapter_path, "adapter checkpoint")->required();
  merge_cmd->add_option("--out", merge_out, "merged weight output")->required();
  merge_cmd->add_option("--layer", merge_layer, "layer to merge");
  merge_cmd->add_flag("--verify", verify, "random-probe equivalence check");

  std::string mt_kind = "sinusoid", mt_out;
  Index mt_rows = 4, mt_dim = 512;
  auto* make_target_cmd =
      app.add_subcommand("make-target", "write a synthetic reconstruction target");
  make_target_cmd->add_option("--kind", mt_kind, "sinusoid or zero");
  make_target_cmd->add_option("--rows", mt_rows, "target rows");
  make_target_cmd->add_option("--dim", mt_dim, "target dim");
  make_target_cmd->add_option("--out", mt_out, "output tensor file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (param_count->parsed()) {
      return run_param_count(spec_path, method, pc_rank, pc_groups, pc_centers);
    }
    if (train_cmd->parsed()) {
      return run_train(config_path, out_dir);
    }
    if (gradcheck_cmd->parsed()) {
      if (trials_opt->count() > 0 && gc_trials < 1) {
        throw ParameterError("gradcheck: --trials must be >= 1");
      }
      return run_gradcheck(gc_dims, gc_rank, gc_groups, gc_centers, gc_seed, gc_trials);
    }
    if (analyze_cmd->parsed()) {
      return run_analyze(ckpt_path, threshold, analyze_out);
    }
    if (reconstruct_cmd->parsed()) {
      return run_reconstruct(target_path, rc_groups, rc_centers, rc_epochs, rc_lr, fit_out);
    }
    if (merge_cmd->parsed()) {
      return run_merge(base_path, adapter_path, merge_out, verify, merge_layer);
    }
    if (make_target_cmd->parsed()) {
      return run_make_target(mt_kind, mt_rows, mt_dim, mt_out);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
