#include "genlora/io.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

namespace genlora {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'G', 'L', 'R', 'A'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) {
    buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
}

void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
}

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  std::uint32_t u32() { return static_cast<std::uint32_t>(take(4)); }
  std::uint64_t u64() { return take(8); }
  std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)); }

  std::string raw(std::uint64_t count) {
    need(count);
    std::string out = bytes_.substr(pos_, count);
    pos_ += count;
    return out;
  }

  const char* raw_ptr(std::uint64_t count) {
    need(count);
    const char* p = bytes_.data() + pos_;
    pos_ += count;
    return p;
  }

  bool exhausted() const { return pos_ == bytes_.size(); }

 private:
  void need(std::uint64_t count) {
    if (count > bytes_.size() - pos_) {
      throw FormatError("container: truncated file");
    }
  }

  std::uint64_t take(int n) {
    need(static_cast<std::uint64_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::string bytes_;
  std::size_t pos_ = 0;
};

std::uint64_t element_count(const std::vector<std::uint64_t>& dims) {
  std::uint64_t count = 1;
  for (std::uint64_t d : dims) {
    count *= d;
  }
  return count;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void require_object(const json& doc, const std::string& context) {
  if (!doc.is_object()) {
    throw FormatError(context + ": expected a JSON object");
  }
}

void require_keys(const json& doc, const std::string& context,
                  std::initializer_list<const char*> allowed) {
  require_object(doc, context);
  for (const auto& item : doc.items()) {
    bool known = false;
    for (const char* key : allowed) {
      if (item.key() == key) {
        known = true;
        break;
      }
    }
    if (!known) {
      throw FormatError(context + ": unknown key '" + item.key() + "'");
    }
  }
}

template <typename T>
T get_or(const json& doc, const char* key, T fallback) {
  if (!doc.contains(key)) {
    return fallback;
  }
  try {
    return doc.at(key).get<T>();
  } catch (const json::exception&) {
    throw FormatError(std::string("config: bad value type for '") + key + "'");
  }
}

json freeze_to_json(const FreezeFlags& freeze) {
  return json{{"z_a", freeze.z_a},
              {"z_b", freeze.z_b},
              {"theta_a", freeze.theta_a},
              {"theta_b", freeze.theta_b}};
}

FreezeFlags freeze_from_json(const json& doc) {
  require_keys(doc, "freeze", {"z_a", "z_b", "theta_a", "theta_b"});
  FreezeFlags freeze;
  freeze.z_a = get_or(doc, "z_a", false);
  freeze.z_b = get_or(doc, "z_b", false);
  freeze.theta_a = get_or(doc, "theta_a", false);
  freeze.theta_b = get_or(doc, "theta_b", false);
  return freeze;
}

}  // namespace

NamedTensor NamedTensor::from_matrix(const std::string& name, const Eigen::Ref<const Matrix>& m) {
  NamedTensor tensor;
  tensor.name = name;
  tensor.dims = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  tensor.data.resize(m.size());
  // row-major flattening
  Index pos = 0;
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) {
      tensor.data[pos++] = m(i, j);
    }
  }
  return tensor;
}

NamedTensor NamedTensor::from_vector(const std::string& name, const Eigen::Ref<const Vector>& v) {
  NamedTensor tensor;
  tensor.name = name;
  tensor.dims = {static_cast<std::uint64_t>(v.size())};
  tensor.data = v;
  return tensor;
}

Matrix NamedTensor::as_matrix() const {
  if (dims.size() != 2) {
    throw FormatError("tensor '" + name + "': expected 2-D");
  }
  const Index rows = static_cast<Index>(dims[0]);
  const Index cols = static_cast<Index>(dims[1]);
  Matrix m(rows, cols);
  Index pos = 0;
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) {
      m(i, j) = data[pos++];
    }
  }
  return m;
}

Vector NamedTensor::as_vector() const {
  if (dims.size() != 1) {
    throw FormatError("tensor '" + name + "': expected 1-D");
  }
  return data;
}

const NamedTensor& Container::get(const std::string& name) const {
  for (const auto& tensor : tensors) {
    if (tensor.name == name) {
      return tensor;
    }
  }
  throw FormatError("container: missing tensor '" + name + "'");
}

void save_container(const std::filesystem::path& path, const Container& container,
                    TensorDType dtype) {
  std::string buf;
  buf.append(kMagic, 4);
  put_u32(buf, kVersion);
  const std::string meta = container.metadata.dump();
  put_u64(buf, meta.size());
  buf.append(meta);
  put_u64(buf, container.tensors.size());
  for (const auto& tensor : container.tensors) {
    put_u64(buf, tensor.name.size());
    buf.append(tensor.name);
    buf.push_back(static_cast<char>(dtype));
    put_u32(buf, static_cast<std::uint32_t>(tensor.dims.size()));
    for (std::uint64_t d : tensor.dims) {
      put_u64(buf, d);
    }
    if (static_cast<std::uint64_t>(tensor.data.size()) != element_count(tensor.dims)) {
      throw ShapeError("container: tensor '" + tensor.name + "' dims do not match data");
    }
    if (dtype == TensorDType::f64) {
      const auto* bytes = reinterpret_cast<const char*>(tensor.data.data());
      buf.append(bytes, sizeof(double) * static_cast<std::size_t>(tensor.data.size()));
    } else {
      for (Index i = 0; i < tensor.data.size(); ++i) {
        const float value = static_cast<float>(tensor.data[i]);
        char bytes[sizeof(float)];
        std::memcpy(bytes, &value, sizeof(float));
        buf.append(bytes, sizeof(float));
      }
    }
  }
  write_text_atomic(path, buf);
}

Container load_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw FormatError("container: cannot open " + path.string());
  }
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader reader(std::move(bytes));
  const std::string magic = reader.raw(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) {
    throw FormatError("container: bad magic");
  }
  const std::uint32_t version = reader.u32();
  if (version != kVersion) {
    throw FormatError("container: unsupported version " + std::to_string(version));
  }
  Container container;
  const std::uint64_t meta_len = reader.u64();
  const std::string meta = reader.raw(meta_len);
  try {
    container.metadata = json::parse(meta);
  } catch (const json::exception& e) {
    throw FormatError(std::string("container: bad metadata JSON: ") + e.what());
  }
  const std::uint64_t count = reader.u64();
  container.tensors.reserve(count);
  for (std::uint64_t t = 0; t < count; ++t) {
    NamedTensor tensor;
    const std::uint64_t name_len = reader.u64();
    tensor.name = reader.raw(name_len);
    const std::uint8_t dtype = reader.u8();
    if (dtype > 1) {
      throw FormatError("container: unknown dtype tag " + std::to_string(dtype));
    }
    const std::uint32_t rank = reader.u32();
    tensor.dims.resize(rank);
    for (auto& d : tensor.dims) {
      d = reader.u64();
    }
    const std::uint64_t n = element_count(tensor.dims);
    tensor.data.resize(static_cast<Index>(n));
    if (dtype == 0) {
      const char* p = reader.raw_ptr(n * sizeof(double));
      std::memcpy(tensor.data.data(), p, n * sizeof(double));
    } else {
      const char* p = reader.raw_ptr(n * sizeof(float));
      for (std::uint64_t i = 0; i < n; ++i) {
        float value;
        std::memcpy(&value, p + i * sizeof(float), sizeof(float));
        tensor.data[static_cast<Index>(i)] = static_cast<double>(value);
      }
    }
    container.tensors.push_back(std::move(tensor));
  }
  if (!reader.exhausted()) {
    throw FormatError("container: trailing bytes");
  }
  return container;
}

void save_weight(const std::filesystem::path& path, const Eigen::Ref<const Matrix>& weight) {
  Container container;
  container.metadata = json{{"kind", "tensors"}};
  container.tensors.push_back(NamedTensor::from_matrix("weight", weight));
  save_container(path, container);
}

Matrix load_weight(const std::filesystem::path& path) {
  const Container container = load_container(path);
  return container.get("weight").as_matrix();
}

Container checkpoint_from_model(const ToyModel& model, const TrainConfig& config) {
  Container container;
  container.metadata =
      json{{"kind", model.kind == AdapterKind::genlora ? "genlora" : "lora"},
           {"config", train_config_to_json(config)}};
  for (std::size_t l = 0; l < model.w0.size(); ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    container.tensors.push_back(NamedTensor::from_matrix(prefix + "w0", model.w0[l]));
    if (model.kind == AdapterKind::genlora) {
      const auto& state = model.gen[l];
      container.tensors.push_back(NamedTensor::from_vector(prefix + "z_b", state.z_b));
      container.tensors.push_back(NamedTensor::from_vector(prefix + "z_a", state.z_a));
      for (std::size_t i = 0; i < state.theta_b.size(); ++i) {
        const std::string base = prefix + "theta_b." + std::to_string(i);
        container.tensors.push_back(
            NamedTensor::from_matrix(base + ".rbf", state.theta_b[i].rbf_weights));
        container.tensors.push_back(
            NamedTensor::from_vector(base + ".base", state.theta_b[i].base_weights));
      }
      for (std::size_t i = 0; i < state.theta_a.size(); ++i) {
        const std::string base = prefix + "theta_a." + std::to_string(i);
        container.tensors.push_back(
            NamedTensor::from_matrix(base + ".rbf", state.theta_a[i].rbf_weights));
        container.tensors.push_back(
            NamedTensor::from_vector(base + ".base", state.theta_a[i].base_weights));
      }
    } else {
      const auto& state = model.lora[l];
      container.tensors.push_back(NamedTensor::from_matrix(prefix + "b", state.b));
      container.tensors.push_back(NamedTensor::from_matrix(prefix + "a", state.a));
    }
  }
  return container;
}

std::pair<ToyModel, TrainConfig> model_from_checkpoint(const Container& container) {
  if (!container.metadata.contains("config")) {
    throw FormatError("checkpoint: missing config metadata");
  }
  const TrainConfig config = parse_train_config(container.metadata.at("config"));
  ToyModel model;
  model.kind = config.adapter.kind;
  const Index groups = config.force_single_group ? 1 : config.adapter.groups;
  const GridSpec grid =
      make_grid(config.adapter.k_centers, config.adapter.grid_lo, config.adapter.grid_hi);
  for (Index l = 0; l < config.layers; ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    Matrix w0 = container.get(prefix + "w0").as_matrix();
    if (w0.rows() != config.m || w0.cols() != config.n) {
      throw FormatError("checkpoint: w0 dims disagree with config");
    }
    model.w0.push_back(std::move(w0));
    if (model.kind == AdapterKind::genlora) {
      GenLoraState state;
      state.m = config.m;
      state.n = config.n;
      state.rank = config.adapter.rank;
      state.groups = groups;
      state.grid = grid;
      state.epsilon = config.adapter.epsilon;
      state.scale = config.adapter.scale;
      state.normalize = !config.disable_norm;
      state.freeze = config.freeze;
      state.z_b = container.get(prefix + "z_b").as_vector();
      state.z_a = container.get(prefix + "z_a").as_vector();
      if (state.z_b.size() != config.m || state.z_a.size() != config.n) {
        throw FormatError("checkpoint: latent dims disagree with config");
      }
      for (Index i = 0; i < config.adapter.rank; ++i) {
        const std::string base_b = prefix + "theta_b." + std::to_string(i);
        const std::string base_a = prefix + "theta_a." + std::to_string(i);
        GeneratorParams bank_b;
        bank_b.rbf_weights = container.get(base_b + ".rbf").as_matrix();
        bank_b.base_weights = container.get(base_b + ".base").as_vector();
        GeneratorParams bank_a;
        bank_a.rbf_weights = container.get(base_a + ".rbf").as_matrix();
        bank_a.base_weights = container.get(base_a + ".base").as_vector();
        if (bank_b.rbf_weights.rows() != groups || bank_a.rbf_weights.rows() != groups ||
            bank_b.rbf_weights.cols() != grid.k_centers ||
            bank_a.rbf_weights.cols() != grid.k_centers) {
          throw FormatError("checkpoint: generator bank dims disagree with config");
        }
        state.theta_b.push_back(std::move(bank_b));
        state.theta_a.push_back(std::move(bank_a));
      }
      model.gen.push_back(std::move(state));
    } else {
      LoraState state;
      state.m = config.m;
      state.n = config.n;
      state.rank = config.adapter.rank;
      state.alpha = config.adapter.alpha;
      state.b = container.get(prefix + "b").as_matrix();
      state.a = container.get(prefix + "a").as_matrix();
      if (state.b.rows() != config.m || state.b.cols() != config.adapter.rank ||
          state.a.rows() != config.adapter.rank || state.a.cols() != config.n) {
        throw FormatError("checkpoint: lora dims disagree with config");
      }
      model.lora.push_back(std::move(state));
    }
  }
  return {std::move(model), config};
}

TrainConfig parse_train_config(const json& doc) {
  require_keys(doc, "config",
               {"task", "m", "n", "layers", "teacher_rank", "samples", "batch", "adapter", "lr",
                "warmup_steps", "total_steps", "seed", "ablation", "freeze"});
  TrainConfig config;
  const std::string task = get_or<std::string>(doc, "task", "teacher_student");
  if (task == "teacher_student") {
    config.task = TaskKind::teacher_student;
  } else if (task == "tiny_classification") {
    config.task = TaskKind::tiny_classification;
  } else {
    throw FormatError("config: unknown task '" + task + "'");
  }
  config.m = get_or<Index>(doc, "m", config.m);
  config.n = get_or<Index>(doc, "n", config.n);
  config.layers = get_or<Index>(doc, "layers", config.layers);
  config.teacher_rank = get_or<Index>(doc, "teacher_rank", config.teacher_rank);
  config.samples = get_or<Index>(doc, "samples", config.samples);
  config.batch = get_or<Index>(doc, "batch", config.batch);
  config.lr = get_or<double>(doc, "lr", config.lr);
  config.warmup_steps = get_or<Index>(doc, "warmup_steps", config.warmup_steps);
  config.total_steps = get_or<Index>(doc, "total_steps", config.total_steps);
  config.seed = get_or<std::uint64_t>(doc, "seed", config.seed);
  if (doc.contains("adapter")) {
    const json& adapter = doc.at("adapter");
    require_keys(adapter, "adapter",
                 {"kind", "rank", "groups", "centers", "grid_lo", "grid_hi", "epsilon", "alpha",
                  "scale", "dropout"});
    const std::string kind = get_or<std::string>(adapter, "kind", "genlora");
    if (kind == "genlora") {
      config.adapter.kind = AdapterKind::genlora;
    } else if (kind == "lora") {
      config.adapter.kind = AdapterKind::lora;
    } else {
      throw FormatError("config: unknown adapter kind '" + kind + "'");
    }
    config.adapter.rank = get_or<Index>(adapter, "rank", config.adapter.rank);
    config.adapter.groups = get_or<Index>(adapter, "groups", config.adapter.groups);
    config.adapter.k_centers = get_or<Index>(adapter, "centers", config.adapter.k_centers);
    config.adapter.grid_lo = get_or<double>(adapter, "grid_lo", config.adapter.grid_lo);
    config.adapter.grid_hi = get_or<double>(adapter, "grid_hi", config.adapter.grid_hi);
    config.adapter.epsilon = get_or<double>(adapter, "epsilon", config.adapter.epsilon);
    config.adapter.alpha = get_or<double>(adapter, "alpha", 2.0 * config.adapter.rank);
    config.adapter.scale = get_or<double>(adapter, "scale", config.adapter.scale);
    config.adapter.dropout = get_or<double>(adapter, "dropout", config.adapter.dropout);
  }
  if (doc.contains("ablation")) {
    const json& ablation = doc.at("ablation");
    require_keys(ablation, "ablation", {"disable_norm", "force_single_group"});
    config.disable_norm = get_or(ablation, "disable_norm", false);
    config.force_single_group = get_or(ablation, "force_single_group", false);
  }
  if (doc.contains("freeze")) {
    config.freeze = freeze_from_json(doc.at("freeze"));
  }
  return config;
}

json train_config_to_json(const TrainConfig& config) {
  return json{
      {"task",
       config.task == TaskKind::teacher_student ? "teacher_student" : "tiny_classification"},
      {"m", config.m},
      {"n", config.n},
      {"layers", config.layers},
      {"teacher_rank", config.teacher_rank},
      {"samples", config.samples},
      {"batch", config.batch},
      {"lr", config.lr},
      {"warmup_steps", config.warmup_steps},
      {"total_steps", config.total_steps},
      {"seed", config.seed},
      {"adapter",
       {{"kind", config.adapter.kind == AdapterKind::genlora ? "genlora" : "lora"},
        {"rank", config.adapter.rank},
        {"groups", config.adapter.groups},
        {"centers", config.adapter.k_centers},
        {"grid_lo", config.adapter.grid_lo},
        {"grid_hi", config.adapter.grid_hi},
        {"epsilon", config.adapter.epsilon},
        {"alpha", config.adapter.alpha},
        {"scale", config.adapter.scale},
        {"dropout", config.adapter.dropout}}},
      {"ablation",
       {{"disable_norm", config.disable_norm}, {"force_single_group", config.force_single_group}}},
      {"freeze", freeze_to_json(config.freeze)}};
}

ModelSpec parse_model_spec(const json& doc) {
  require_keys(doc, "model spec", {"name", "matrices"});
  ModelSpec spec;
  spec.name = get_or<std::string>(doc, "name", "");
  if (!doc.contains("matrices") || !doc.at("matrices").is_array() ||
      doc.at("matrices").empty()) {
    throw FormatError("model spec: needs a non-empty 'matrices' array");
  }
  for (const json& entry : doc.at("matrices")) {
    require_keys(entry, "model spec matrix", {"name", "out", "in", "count"});
    ModelSpec::Entry row;
    row.name = get_or<std::string>(entry, "name", "");
    if (row.name.empty()) {
      throw FormatError("model spec: matrix entries need a name");
    }
    row.out_dim = get_or<Index>(entry, "out", 0);
    row.in_dim = get_or<Index>(entry, "in", 0);
    row.count = get_or<Index>(entry, "count", 1);
    spec.entries.push_back(std::move(row));
  }
  return spec;
}

json train_report_to_json(const TrainReport& report, const TrainConfig& config) {
  json rank_checks = json::array();
  for (const auto& check : report.rank_checks) {
    rank_checks.push_back(json{{"step", check.step},
                               {"effective_rank", check.effective_rank},
                               {"rank_bounded", check.rank_bounded}});
  }
  return json{{"config", train_config_to_json(config)},
              {"seed", report.seed},
              {"steps", report.losses.size()},
              {"initial_loss", report.initial_loss},
              {"final_loss", report.final_loss},
              {"rank_checks", rank_checks},
              {"final_spectra", spectra_to_json(report.final_spectra)}};
}

std::string loss_csv(const TrainReport& report) {
  std::string out = "step,lr,loss\n";
  for (std::size_t i = 0; i < report.losses.size(); ++i) {
    out += std::to_string(i);
    out += ',';
    out += format_double(report.lrs[i]);
    out += ',';
    out += format_double(report.losses[i]);
    out += '\n';
  }
  return out;
}

json spectra_to_json(const std::vector<SpectrumReport>& reports) {
  json out = json::array();
  for (const auto& report : reports) {
    json sigmas = json::array();
    for (Index i = 0; i < report.singular_values.size(); ++i) {
      sigmas.push_back(report.singular_values[i]);
    }
    out.push_back(json{{"name", report.name},
                       {"singular_values", sigmas},
                       {"effective_rank", report.effective_rank},
                       {"threshold", report.threshold},
                       {"energy", report.energy},
                       {"params", report.param_count}});
  }
  return out;
}

std::string spectra_csv(const std::vector<SpectrumReport>& reports) {
  std::string out = "name,sigma_index,sigma_value\n";
  for (const auto& report : reports) {
    for (Index i = 0; i < report.singular_values.size(); ++i) {
      out += report.name + ',' + std::to_string(i) + ',' +
             format_double(report.singular_values[i]) + '\n';
    }
    out += report.name + ",effective_rank," + std::to_string(report.effective_rank) + '\n';
    out += report.name + ",energy," + format_double(report.energy) + '\n';
    out += report.name + ",params," + std::to_string(report.param_count) + '\n';
  }
  return out;
}

json fit_report_to_json(const FitReport& report, Index groups, Index k_centers) {
  return json{{"groups", groups},
              {"centers", k_centers},
              {"epochs", report.epochs},
              {"parameter_ratio", report.parameter_ratio},
              {"per_row_mse", report.per_row_mse},
              {"mean_mse", report.mean_mse},
              {"initial_mse", report.initial_mse},
              {"ls_floor_mse", report.ls_floor_mse},
              {"gap", report.gap}};
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw FormatError("cannot write " + tmp.string());
    }
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) {
      throw FormatError("short write to " + tmp.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

json load_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw FormatError("cannot open " + path.string());
  }
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("bad JSON in " + path.string() + ": " + e.what());
  }
}

}  // namespace genlora
