#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "genlora/io.hpp"

using namespace genlora;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path temp_dir() {
  const fs::path dir = fs::temp_directory_path() / "genlora_io_tests";
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("container round trip is bitwise for f64") {
  const fs::path path = temp_dir() / "roundtrip.glra";
  Container container;
  container.metadata = json{{"kind", "tensors"}, {"note", 7}};
  RngStream rng(1);
  Matrix m(3, 5);
  Vector draws = rng.normal(0.0, 1.0, 15);
  m = Eigen::Map<const Matrix>(draws.data(), 5, 3).transpose();
  container.tensors.push_back(NamedTensor::from_matrix("weight", m));
  container.tensors.push_back(NamedTensor::from_vector("bias", rng.normal(0.0, 1.0, 4)));
  save_container(path, container);

  const Container loaded = load_container(path);
  CHECK(loaded.metadata.at("note") == 7);
  CHECK((loaded.get("weight").as_matrix() - m).cwiseAbs().maxCoeff() == 0.0);
  CHECK(loaded.get("bias").dims.size() == 1);
  CHECK_THROWS_AS(loaded.get("missing"), FormatError);

  // rewriting the same container gives the same bytes
  const std::string first = slurp(path);
  save_container(path, container);
  CHECK(slurp(path) == first);
}

TEST_CASE("f32 serialization narrows") {
  const fs::path path = temp_dir() / "f32.glra";
  Container container;
  container.metadata = json{{"kind", "tensors"}};
  Vector v(3);
  v << 1.0, 1.0 / 3.0, 2.0 / 7.0;
  container.tensors.push_back(NamedTensor::from_vector("v", v));
  save_container(path, container, TensorDType::f32);
  const Container loaded = load_container(path);
  const Vector back = loaded.get("v").as_vector();
  CHECK(back[0] == 1.0);
  CHECK(back[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-7));
  CHECK(back[1] != 1.0 / 3.0);  // narrowing is lossy by design
}

TEST_CASE("container rejects corrupt files") {
  const fs::path dir = temp_dir();
  const fs::path good = dir / "good.glra";
  save_weight(good, Matrix::Identity(4, 4));

  // bad magic
  std::string bytes = slurp(good);
  std::string bad = bytes;
  bad[0] = 'X';
  const fs::path bad_magic = dir / "bad_magic.glra";
  write_text_atomic(bad_magic, bad);
  CHECK_THROWS_WITH_AS(load_container(bad_magic), doctest::Contains("magic"), FormatError);

  // truncated
  const fs::path truncated = dir / "truncated.glra";
  write_text_atomic(truncated, bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS_WITH_AS(load_container(truncated), doctest::Contains("truncated"), FormatError);

  // trailing garbage
  const fs::path trailing = dir / "trailing.glra";
  write_text_atomic(trailing, bytes + "junk");
  CHECK_THROWS_AS(load_container(trailing), FormatError);

  CHECK_THROWS_AS(load_container(dir / "does_not_exist.glra"), FormatError);
}

TEST_CASE("checkpoint round trip restores the exact model") {
  TrainConfig config;
  config.m = 12;
  config.n = 8;
  config.teacher_rank = 2;
  config.samples = 32;
  config.batch = 32;
  config.adapter.rank = 3;
  config.adapter.groups = 2;
  config.adapter.k_centers = 5;
  config.lr = 0.05;
  config.warmup_steps = 5;
  config.total_steps = 25;
  config.seed = 21;
  auto [model, report] = train(config);

  const fs::path path = temp_dir() / "checkpoint.glra";
  save_container(path, checkpoint_from_model(model, config));
  auto [loaded, loaded_config] = model_from_checkpoint(load_container(path));

  CHECK(loaded_config.seed == config.seed);
  CHECK(loaded.kind == AdapterKind::genlora);
  CHECK((loaded.w0[0] - model.w0[0]).cwiseAbs().maxCoeff() == 0.0);
  CHECK((loaded.gen[0].z_a - model.gen[0].z_a).cwiseAbs().maxCoeff() == 0.0);
  CHECK((loaded.gen[0].z_b - model.gen[0].z_b).cwiseAbs().maxCoeff() == 0.0);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK((loaded.gen[0].theta_a[i].rbf_weights - model.gen[0].theta_a[i].rbf_weights)
              .cwiseAbs()
              .maxCoeff() == 0.0);
    CHECK((loaded.gen[0].theta_b[i].base_weights - model.gen[0].theta_b[i].base_weights)
              .cwiseAbs()
              .maxCoeff() == 0.0);
  }
  CHECK((delta_w(loaded.gen[0]) - delta_w(model.gen[0])).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("lora checkpoint round trip") {
  TrainConfig config;
  config.m = 8;
  config.n = 8;
  config.teacher_rank = 1;
  config.samples = 16;
  config.batch = 16;
  config.adapter.kind = AdapterKind::lora;
  config.adapter.rank = 2;
  config.adapter.alpha = 4.0;
  config.lr = 0.05;
  config.warmup_steps = 2;
  config.total_steps = 10;
  config.seed = 9;
  auto [model, report] = train(config);
  const fs::path path = temp_dir() / "lora.glra";
  save_container(path, checkpoint_from_model(model, config));
  auto [loaded, loaded_config] = model_from_checkpoint(load_container(path));
  CHECK(loaded.kind == AdapterKind::lora);
  CHECK((loaded.lora[0].b - model.lora[0].b).cwiseAbs().maxCoeff() == 0.0);
  CHECK((loaded.lora[0].a - model.lora[0].a).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("train config parsing: defaults, round trip, strictness") {
  const TrainConfig defaults = parse_train_config(json::object());
  CHECK(defaults.m == 64);
  CHECK(defaults.adapter.k_centers == 15);

  TrainConfig config = parse_train_config(json::parse(R"({
    "task": "teacher_student", "m": 32, "n": 16, "lr": 0.02, "seed": 7,
    "adapter": {"kind": "genlora", "rank": 4, "groups": 2, "centers": 9},
    "ablation": {"disable_norm": true},
    "freeze": {"z_a": true}
  })"));
  CHECK(config.m == 32);
  CHECK(config.adapter.k_centers == 9);
  CHECK(config.disable_norm);
  CHECK(config.freeze.z_a);
  CHECK_FALSE(config.freeze.z_b);

  const json echoed = train_config_to_json(config);
  const TrainConfig back = parse_train_config(echoed);
  CHECK(back.m == config.m);
  CHECK(back.adapter.k_centers == config.adapter.k_centers);
  CHECK(back.disable_norm == config.disable_norm);
  CHECK(back.freeze.z_a == config.freeze.z_a);

  CHECK_THROWS_WITH_AS(parse_train_config(json::parse(R"({"lerning_rate": 0.1})")),
                       doctest::Contains("lerning_rate"), FormatError);
  CHECK_THROWS_AS(parse_train_config(json::parse(R"({"adapter": {"rnak": 2}})")), FormatError);
  CHECK_THROWS_AS(parse_train_config(json::parse(R"({"freeze": {"za": true}})")), FormatError);
  CHECK_THROWS_AS(parse_train_config(json::parse(R"({"m": "many"})")), FormatError);
  CHECK_THROWS_AS(parse_train_config(json::parse(R"({"task": "imagenet"})")), FormatError);
  CHECK_THROWS_AS(parse_train_config(json::parse("[1,2]")), FormatError);
}

TEST_CASE("model spec parsing") {
  const ModelSpec spec = parse_model_spec(json::parse(R"({
    "name": "toy",
    "matrices": [{"name": "w", "out": 8, "in": 4, "count": 2}]
  })"));
  CHECK(spec.entries.size() == 1);
  CHECK(spec.entries[0].count == 2);

  CHECK_THROWS_AS(parse_model_spec(json::parse(R"({"name": "x", "matrices": []})")), FormatError);
  CHECK_THROWS_AS(parse_model_spec(json::parse(R"({"name": "x"})")), FormatError);
  CHECK_THROWS_AS(
      parse_model_spec(json::parse(
          R"({"name": "x", "matrices": [{"name": "w", "out": 2, "in": 2, "rows": 1}]})")),
      FormatError);
}

TEST_CASE("csv and json report emission") {
  TrainReport report;
  report.losses = {1.0, 0.5};
  report.lrs = {0.0, 0.1};
  report.initial_loss = 1.0;
  report.final_loss = 0.5;
  report.seed = 3;
  const std::string csv = loss_csv(report);
  CHECK(csv == "step,lr,loss\n0,0,1\n1,0.10000000000000001,0.5\n");

  SpectrumReport spectrum;
  spectrum.name = "layer0";
  spectrum.singular_values = Vector::Zero(2);
  spectrum.singular_values << 2.0, 0.5;
  spectrum.effective_rank = 2;
  spectrum.threshold = 0.005;
  spectrum.energy = 4.25;
  spectrum.param_count = 42;
  const std::string spectra = spectra_csv({spectrum});
  CHECK(spectra.find("name,sigma_index,sigma_value\n") == 0);
  CHECK(spectra.find("layer0,0,2\n") != std::string::npos);
  CHECK(spectra.find("layer0,effective_rank,2\n") != std::string::npos);
  CHECK(spectra.find("layer0,energy,4.25\n") != std::string::npos);
  CHECK(spectra.find("layer0,params,42\n") != std::string::npos);

  TrainConfig config;
  const json doc = train_report_to_json(report, config);
  CHECK(doc.at("initial_loss") == 1.0);
  CHECK(doc.at("steps") == 2);
  CHECK(doc.contains("config"));
  CHECK_FALSE(doc.contains("wall_seconds"));  // reruns must be byte-identical
}

TEST_CASE("atomic write leaves no temp file") {
  const fs::path path = temp_dir() / "atomic.txt";
  write_text_atomic(path, "hello");
  CHECK(slurp(path) == "hello");
  CHECK_FALSE(fs::exists(path.string() + ".tmp"));
}
