#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "genlora/adapters.hpp"
#include "genlora/analysis.hpp"
#include "genlora/core.hpp"
#include "genlora/training.hpp"

namespace genlora {

/// One tensor of a GLRA container (held as f64 in memory regardless of the
/// on-disk dtype).
struct NamedTensor {
  std::string name;
  std::vector<std::uint64_t> dims;
  Vector data;  // row-major flattening of `dims`

  static NamedTensor from_matrix(const std::string& name, const Eigen::Ref<const Matrix>& m);
  static NamedTensor from_vector(const std::string& name, const Eigen::Ref<const Vector>& v);
  Matrix as_matrix() const;  // requires 2-D
  Vector as_vector() const;  // requires 1-D
};

enum class TensorDType : std::uint8_t { f64 = 0, f32 = 1 };

/// "GLRA" container, version 1, little-endian throughout:
///   magic "GLRA" | u32 version | u64 metadata length | metadata JSON |
///   u64 tensor count | blocks
/// where each block is
///   u64 name length | name | u8 dtype (0 = f64, 1 = f32) | u32 rank |
///   rank x u64 dims | row-major payload.
struct Container {
  nlohmann::json metadata;
  std::vector<NamedTensor> tensors;

  const NamedTensor& get(const std::string& name) const;
};

void save_container(const std::filesystem::path& path, const Container& container,
                    TensorDType dtype = TensorDType::f64);
Container load_container(const std::filesystem::path& path);

/// Single-weight container (metadata kind "tensors", one tensor "weight").
void save_weight(const std::filesystem::path& path, const Eigen::Ref<const Matrix>& weight);
Matrix load_weight(const std::filesystem::path& path);

/// Adapter checkpoint: metadata carries the adapter configuration, tensor
/// blocks carry per-layer latents and parameter banks (and the base
/// weights, so merges can be replayed against the training run).
Container checkpoint_from_model(const ToyModel& model, const TrainConfig& config);
std::pair<ToyModel, TrainConfig> model_from_checkpoint(const Container& container);

/// Config documents are strict: unknown keys anywhere are a FormatError.
TrainConfig parse_train_config(const nlohmann::json& doc);
nlohmann::json train_config_to_json(const TrainConfig& config);
ModelSpec parse_model_spec(const nlohmann::json& doc);

nlohmann::json train_report_to_json(const TrainReport& report, const TrainConfig& config);
std::string loss_csv(const TrainReport& report);  // columns: step, lr, loss
nlohmann::json spectra_to_json(const std::vector<SpectrumReport>& reports);
std::string spectra_csv(const std::vector<SpectrumReport>& reports);
nlohmann::json fit_report_to_json(const FitReport& report, Index groups, Index k_centers);

/// Write-then-rename so partially written files never appear under the
/// final name.
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

nlohmann::json load_json_file(const std::filesystem::path& path);

}  // namespace genlora
