#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "puredesk/checkpoint.hpp"
#include "puredesk/config.hpp"
#include "puredesk/csv.hpp"
#include "puredesk/dataset.hpp"
#include "puredesk/ppm.hpp"

using namespace puredesk;
using ad::Tensor;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  static const fs::path dir = [] {
    fs::path p = fs::temp_directory_path() / "puredesk-io-tests";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("rng streams are deterministic and independent") {
  Rng a = Rng::stream(7, "train");
  Rng b = Rng::stream(7, "train");
  Rng c = Rng::stream(7, "eval");
  CHECK(a.raw() == b.raw());
  Rng a2 = Rng::stream(7, "train");
  CHECK(a2.raw() != c.raw());

  Rng d(5);
  for (int i = 0; i < 1000; ++i) {
    const auto v = d.uniform_int(3, 9);
    CHECK(v >= 3);
    CHECK(v <= 9);
  }
  std::vector<double> ns(10000);
  Rng e(6);
  e.fill_normal(ns.data(), static_cast<std::int64_t>(ns.size()));
  const auto mv = oracles::mean_var(ns);
  CHECK(std::abs(mv.mean) < 0.05);
  CHECK(mv.var == Catch::Approx(1.0).margin(0.06));
}

TEST_CASE("ppm export uses the documented byte mapping") {
  const fs::path p = temp_dir() / "map.ppm";

  Tensor lo = Tensor::full({3, 2, 2}, -1.0);
  export_image_ppm(lo, p.string());
  std::string bytes = slurp(p);
  const std::string header = "P6\n2 2\n255\n";
  REQUIRE(bytes.substr(0, header.size()) == header);
  for (std::size_t i = header.size(); i < bytes.size(); ++i) CHECK(bytes[i] == '\0');

  Tensor hi = Tensor::full({3, 2, 2}, 1.0);
  export_image_ppm(hi, p.string());
  bytes = slurp(p);
  for (std::size_t i = header.size(); i < bytes.size(); ++i)
    CHECK(static_cast<unsigned char>(bytes[i]) == 255);

  // v = 0 maps to 127.5, which rounds half-to-even up to 128
  Tensor mid = Tensor::full({3, 2, 2}, 0.0);
  export_image_ppm(mid, p.string());
  bytes = slurp(p);
  for (std::size_t i = header.size(); i < bytes.size(); ++i)
    CHECK(static_cast<unsigned char>(bytes[i]) == 128);

  // out-of-range values clamp before quantization
  Tensor wild = Tensor::full({3, 2, 2}, 7.0);
  export_image_ppm(wild, p.string());
  CHECK(slurp(p).substr(header.size()) == std::string(12, static_cast<char>(255)));

  CHECK_THROWS_AS(export_image_ppm(Tensor::zeros({1, 2, 2}), p.string()), std::invalid_argument);
}

TEST_CASE("ppm round trip is exact on the byte grid") {
  Rng rng(41);
  Tensor img = Tensor::zeros({3, 5, 7});
  for (std::int64_t i = 0; i < img.size(); ++i) img.data()[i] = rng.uniform(-1, 1);
  const fs::path p = temp_dir() / "rt.ppm";
  export_image_ppm(img, p.string());
  Tensor back = import_image_ppm(p.string());
  REQUIRE(back.shape() == img.shape());
  // quantize-import-export must be stable: a second round trip is identity
  export_image_ppm(back, (temp_dir() / "rt2.ppm").string());
  CHECK(slurp(temp_dir() / "rt.ppm") == slurp(temp_dir() / "rt2.ppm"));
  for (std::int64_t i = 0; i < img.size(); ++i)
    CHECK(std::abs(back.at(i) - img.at(i)) <= 0.5 / 127.5 + 1e-12);
}

TEST_CASE("checkpoints round-trip bit-exactly and reject foreign files") {
  DenoiserDescriptor d;
  d.image_size = 8;
  d.widths = {4, 8};
  d.embed_dim = 8;
  d.max_timestep = 10;
  DenoiserParams params = init_denoiser(d, 42);
  const fs::path p = temp_dir() / "model.pdck";
  save_checkpoint(p.string(), params,
                  {{"schedule.T", "10"},
                   {"schedule.beta_start", "0.01"},
                   {"schedule.beta_end", "0.2"},
                   {"provenance", "unit-test"},
                   {"seed", "42"}});

  LoadedCheckpoint back = load_checkpoint(p.string());
  CHECK(back.params.desc == d);
  CHECK(back.metadata.at("provenance") == "unit-test");
  REQUIRE(back.params.tensors.size() == params.tensors.size());
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    CHECK(back.params.tensors[i].first == params.tensors[i].first);
    CHECK(back.params.tensors[i].second.values() == params.tensors[i].second.values());
  }

  // saving the loaded snapshot reproduces the file byte for byte
  const fs::path p2 = temp_dir() / "model2.pdck";
  std::map<std::string, std::string> meta(back.metadata.begin(), back.metadata.end());
  meta.erase("desc.image_size");
  meta.erase("desc.channels");
  meta.erase("desc.widths");
  meta.erase("desc.embed_dim");
  meta.erase("desc.max_timestep");
  save_checkpoint(p2.string(), back.params, meta);
  CHECK(slurp(p) == slurp(p2));

  // version bump is refused
  std::string blob = slurp(p);
  blob[4] = 2;
  const fs::path bad = temp_dir() / "bad.pdck";
  std::ofstream(bad, std::ios::binary).write(blob.data(), static_cast<std::streamsize>(blob.size()));
  CHECK_THROWS_WITH(load_checkpoint(bad.string()), Catch::Matchers::ContainsSubstring("version"));

  std::ofstream(bad, std::ios::binary) << "JUNKJUNKJUNK";
  CHECK_THROWS_AS(load_checkpoint(bad.string()), std::runtime_error);
}

TEST_CASE("image record files parse and round-trip") {
  // 10 CIFAR-style records of 3073 bytes
  const fs::path p = temp_dir() / "records.bin";
  {
    Rng rng(43);
    std::ofstream f(p, std::ios::binary);
    for (int i = 0; i < 10; ++i) {
      f.put(static_cast<char>(i % 10));
      for (int j = 0; j < 3072; ++j) f.put(static_cast<char>(rng.uniform_int(0, 255)));
    }
  }
  REQUIRE(fs::file_size(p) == 30730);
  ImageDataset ds = load_cifar10_binary(p.string());
  CHECK(ds.images.shape() == ad::Shape{10, 3, 32, 32});
  CHECK(ds.labels.size() == 10);

  const fs::path p2 = temp_dir() / "records2.bin";
  save_image_records(p2.string(), ds);
  CHECK(slurp(p) == slurp(p2));

  // byte mapping endpoints
  const fs::path ends = temp_dir() / "ends.bin";
  {
    std::ofstream f(ends, std::ios::binary);
    f.put(0);
    f.put(static_cast<char>(255));
    for (int j = 1; j < 3072; ++j) f.put(0);
  }
  ImageDataset e = load_cifar10_binary(ends.string());
  CHECK(e.images.at(0) == 1.0);
  CHECK(e.images.at(1) == -1.0);

  // bad sizes and labels
  const fs::path trunc = temp_dir() / "trunc.bin";
  std::ofstream(trunc, std::ios::binary) << "abc";
  CHECK_THROWS_WITH(load_cifar10_binary(trunc.string()),
                    Catch::Matchers::ContainsSubstring("record size"));
  const fs::path badlabel = temp_dir() / "badlabel.bin";
  {
    std::ofstream f(badlabel, std::ios::binary);
    f.put(11);
    for (int j = 0; j < 3072; ++j) f.put(0);
  }
  CHECK_THROWS_WITH(load_cifar10_binary(badlabel.string()),
                    Catch::Matchers::ContainsSubstring("label"));
}

TEST_CASE("procedural dataset is seeded, bounded and balanced") {
  ImageDataset a = gen_shapes_dataset(64, 16, 99);
  ImageDataset b = gen_shapes_dataset(64, 16, 99);
  CHECK(a.images.values() == b.images.values());
  CHECK(a.labels == b.labels);
  CHECK(gen_shapes_dataset(64, 16, 100).images.values() != a.images.values());

  for (std::int64_t i = 0; i < a.images.size(); ++i) {
    CHECK(a.images.at(i) >= -1.0);
    CHECK(a.images.at(i) <= 1.0);
  }

  ImageDataset big = gen_shapes_dataset(3000, 16, 7);
  int counts[3] = {0, 0, 0};
  for (auto l : big.labels) counts[l]++;
  for (int k = 0; k < 3; ++k)
    CHECK(std::abs(counts[k] / 3000.0 - 1.0 / 3.0) < 0.05);

  CHECK_THROWS_AS(gen_shapes_dataset(0, 16, 1), std::invalid_argument);
  CHECK_THROWS_AS(gen_shapes_dataset(10, 12, 1), std::invalid_argument);
}

TEST_CASE("stock triggers and target have the advertised structure") {
  Tensor trig = make_corner_trigger(16, 6, 0.6);
  int nonzero = 0;
  for (std::int64_t i = 0; i < trig.size(); ++i)
    if (trig.at(i) != 0.0) {
      CHECK(trig.at(i) == 0.6);
      ++nonzero;
    }
  CHECK(nonzero == 3 * 6 * 6);

  Tensor target = default_target_image(16);
  CHECK(target.shape() == ad::Shape{3, 16, 16});
  CHECK(default_target_image(16).values() == target.values());

  Tensor sur = surrogate_patch_trigger(16, 5);
  CHECK(ad::norm2_sq(sur) == Catch::Approx(3 * 64 * 0.64).epsilon(1e-12));
  Tensor cross = surrogate_cross_trigger(16, 5);
  CHECK(ad::norm2_sq(cross) > 0.0);
}

TEST_CASE("config parsing, overrides and rejection of unknown keys") {
  RunConfig cfg;
  CHECK(cfg.T == 100);

  const fs::path p = temp_dir() / "run.cfg";
  std::ofstream(p) << "# comment\n"
                   << "schedule.T = 50\n"
                   << "model.widths = 8, 16\n"
                   << "train.lr = 5e-4   # inline comment\n"
                   << "run.out_dir = /tmp/somewhere\n";
  load_config_file(cfg, p.string());
  CHECK(cfg.T == 50);
  CHECK(cfg.widths == std::vector<int>{8, 16});
  CHECK(cfg.train_lr == 5e-4);
  CHECK(cfg.out_dir == "/tmp/somewhere");

  apply_config_line(cfg, "schedule.T = 25");
  CHECK(cfg.T == 25);

  CHECK_THROWS_WITH(apply_config_line(cfg, "nope.key = 3"),
                    Catch::Matchers::ContainsSubstring("unknown key"));
  CHECK_THROWS_AS(apply_config_line(cfg, "schedule.T = -1"), std::invalid_argument);
  CHECK_THROWS_AS(apply_config_line(cfg, "schedule.T = abc"), std::invalid_argument);
  CHECK_THROWS_AS(apply_config_line(cfg, "train.from_scratch = maybe"), std::invalid_argument);
  CHECK_THROWS_AS(apply_config_line(cfg, "invert.init = sideways"), std::invalid_argument);
  CHECK_THROWS_AS(apply_config_line(cfg, "garbage"), std::invalid_argument);

  // the echoed form reparses to the identical echo
  RunConfig again;
  std::istringstream echo(cfg.echo());
  std::string line;
  while (std::getline(echo, line)) apply_config_line(again, line);
  CHECK(again.echo() == cfg.echo());
}

TEST_CASE("shift-scale csv round trips at full precision") {
  NoiseSchedule s = make_schedule(100, 1e-3, 0.2);
  ShiftScales l = lambda_closed_form(s);
  const fs::path p = temp_dir() / "lambda.csv";
  write_lambda_csv(p.string(), l);

  const std::string text = slurp(p);
  CHECK(text.rfind("t,lambda\n", 0) == 0);
  CHECK(text.find("\r") == std::string::npos);

  ShiftScales back = read_lambda_csv(p.string());
  CHECK(back.lambda == l.lambda);

  std::ofstream(p) << "wrong,header\n1,0.5\n";
  CHECK_THROWS_AS(read_lambda_csv(p.string()), std::runtime_error);
  std::ofstream(p) << "t,lambda\n2,0.5\n";
  CHECK_THROWS_AS(read_lambda_csv(p.string()), std::runtime_error);
}

TEST_CASE("loss trace csv") {
  const fs::path p = temp_dir() / "trace.csv";
  write_trace_csv(p.string(), {0.5, 0.25, 0.125});
  CHECK(slurp(p) == "epoch,loss\n1,0.5\n2,0.25\n3,0.125\n");
}
