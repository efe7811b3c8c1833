#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cstring>
#include <functional>
#include <filesystem>
#include <set>

#include "promptseg/data/io.hpp"
#include "promptseg/data/manifest.hpp"
#include "promptseg/data/synth.hpp"
#include "promptseg/data/weights.hpp"
#include "promptseg/error.hpp"
#include "model_fixtures.hpp"
#include "temp_dir.hpp"

using namespace promptseg;
using namespace promptseg::data;
namespace fs = std::filesystem;

namespace {

struct TempDir : testing::TempDir {
  TempDir() : testing::TempDir("test_data") {}
};

double fg_fraction(const ClassMask& m) {
  return static_cast<double>(std::count(m.labels.begin(), m.labels.end(), 1)) / static_cast<double>(m.labels.size());
}

DataError::Kind error_kind(const std::function<void()>& f) {
  try {
    f();
  } catch (const DataError& e) {
    return e.kind();
  }
  FAIL("expected DataError");
  return DataError::Kind::kIo;
}

}  // namespace

TEST_CASE("index PNG roundtrip") {
  TempDir tmp;
  nn::Rng rng(1);
  ClassMask m{13, 7, std::vector<std::uint8_t>(13 * 7)};
  for (auto& v : m.labels) v = static_cast<std::uint8_t>(rng.uniform_int(0, 4));
  save_prediction(m, tmp.path / "m.png");
  CHECK(load_mask(tmp.path / "m.png") == m);

  ClassMask bg{8, 8, std::vector<std::uint8_t>(64, 0)};
  save_prediction(bg, tmp.path / "bg.png");
  const auto back = load_mask(tmp.path / "bg.png");
  CHECK(std::all_of(back.labels.begin(), back.labels.end(), [](auto v) { return v == 0; }));
}

TEST_CASE("RGB PNG roundtrip at 8-bit precision") {
  TempDir tmp;
  const auto s = synth_vessel(3, 32, SynthStyle{});
  save_image(s.image, tmp.path / "i.png");
  const auto img = load_image(tmp.path / "i.png");
  REQUIRE(img.shape() == s.image.shape());
  for (std::size_t i = 0; i < img.numel(); ++i) CHECK(std::abs(img[i] - s.image[i]) <= 0.5f / 255.0f + 1e-6f);
  // A second save of the loaded image is lossless.
  save_image(img, tmp.path / "j.png");
  CHECK(load_image(tmp.path / "j.png") == img);
}

TEST_CASE("load_sample: valid pair and distinct failure kinds") {
  TempDir tmp;
  const auto s = synth_vessel(4, 32, SynthStyle{});
  save_image(s.image, tmp.path / "img.png");
  save_prediction(s.mask, tmp.path / "mask.png");
  const auto back = load_sample(tmp.path / "img.png", tmp.path / "mask.png", 2);
  CHECK(back.mask == s.mask);
  CHECK(back.image.shape() == nn::Shape{3, 32, 32});
  CHECK(back.id == "img");

  CHECK(error_kind([&] { load_sample(tmp.path / "nope.png", tmp.path / "mask.png", 2); }) ==
        DataError::Kind::kMissingFile);

  save_prediction(ClassMask{16, 32, std::vector<std::uint8_t>(16 * 32, 0)}, tmp.path / "short.png");
  CHECK(error_kind([&] { load_sample(tmp.path / "img.png", tmp.path / "short.png", 2); }) ==
        DataError::Kind::kSizeMismatch);

  auto seven = s.mask;
  seven.labels[5] = 7;
  save_prediction(seven, tmp.path / "seven.png");
  CHECK(error_kind([&] { load_sample(tmp.path / "img.png", tmp.path / "seven.png", 2); }) ==
        DataError::Kind::kClassRange);

  // An RGB file is not an index mask.
  CHECK(error_kind([&] { load_mask(tmp.path / "img.png"); }) == DataError::Kind::kFormat);
  write_file(tmp.path / "junk.png", "definitely not a png");
  CHECK(error_kind([&] { load_image(tmp.path / "junk.png"); }) == DataError::Kind::kFormat);
}

TEST_CASE("overlay matches the input size and leaves background pixels alone") {
  TempDir tmp;
  const auto s = synth_vessel(5, 32, SynthStyle{});
  save_overlay(s.image, s.mask, tmp.path / "o.png");
  const auto o = load_image(tmp.path / "o.png");
  CHECK(o.shape() == s.image.shape());
  const std::size_t P = 32 * 32;
  for (std::size_t p = 0; p < P; ++p) {
    if (s.mask.labels[p] != 0) continue;
    for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(o[c * P + p] - s.image[c * P + p]) <= 0.5f / 255.0f + 1e-6f);
  }
}

TEST_CASE("synth_vessel: deterministic, nonempty, bounded foreground") {
  const SynthStyle style;
  CHECK(synth_vessel(9, 64, style).mask == synth_vessel(9, 64, style).mask);
  CHECK(synth_vessel(9, 64, style).image == synth_vessel(9, 64, style).image);
  CHECK_FALSE(synth_vessel(9, 64, style).mask == synth_vessel(10, 64, style).mask);

  // Bounds measured over seeds 0..99 with the default style: [0.185, 0.489].
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto s = synth_vessel(seed, 64, style);
    const double f = fg_fraction(s.mask);
    INFO("seed " << seed);
    CHECK(f > 0.10);
    CHECK(f < 0.55);
    for (float v : s.image.data()) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }
  SynthStyle one = style;
  one.curve_count = 1;
  for (std::uint64_t seed = 0; seed < 20; ++seed) CHECK(fg_fraction(synth_vessel(seed, 32, one).mask) > 0.0);
}

TEST_CASE("synth: appearance-only changes keep the mask") {
  SynthStyle a, b;
  b.texture_seed = 77;
  b.contrast = 0.3;
  b.noise = 0.06;
  b.background = 0.4;
  b.tint = {0.6, 0.9, 0.5};
  for (std::uint64_t seed : {0u, 1u, 2u, 3u}) {
    const auto sa = synth_vessel(seed, 64, a), sb = synth_vessel(seed, 64, b);
    CHECK(sa.mask == sb.mask);
    CHECK_FALSE(sa.image == sb.image);
  }
  a.kind = b.kind = SynthKind::kLayers;
  CHECK(synth_layers(5, 64, a).mask == synth_layers(5, 64, b).mask);
}

TEST_CASE("synth: style validation") {
  SynthStyle s;
  s.thickness_min = 5;
  s.thickness_max = 2;
  CHECK_THROWS_AS(synth_vessel(0, 64, s), ConfigError);
  s = SynthStyle{};
  s.curve_count = 0;
  CHECK_THROWS_AS(synth_vessel(0, 64, s), ConfigError);
  CHECK_THROWS_AS(synth_vessel(0, 16, SynthStyle{}), ConfigError);
  SynthStyle layers;
  layers.kind = SynthKind::kLayers;
  layers.band_count = 1;
  CHECK_THROWS_AS(synth_layers(0, 64, layers), ConfigError);
  layers.band_count = 17;
  CHECK_THROWS_AS(synth_layers(0, 64, layers), ConfigError);
  CHECK_THROWS_AS(parse_kind("retina"), ConfigError);
}

TEST_CASE("synth_layers: ordered partition with every band present") {
  SynthStyle s;
  s.kind = SynthKind::kLayers;
  for (std::size_t bands : {2u, 4u, 8u}) {
    s.band_count = bands;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto smp = synth_layers(seed, 64, s);
      std::set<std::uint8_t> seen(smp.mask.labels.begin(), smp.mask.labels.end());
      CHECK(seen.size() == bands);
      CHECK(*seen.rbegin() == bands - 1);
      for (std::size_t x = 0; x < 64; ++x) {
        for (std::size_t y = 1; y < 64; ++y) CHECK(smp.mask.at(y, x) >= smp.mask.at(y - 1, x));
      }
    }
  }
  s.band_count = 4;
  CHECK(synth_layers(3, 64, s).mask == synth_layers(3, 64, s).mask);
}

TEST_CASE("style JSON roundtrip keeps defaults for missing keys") {
  SynthStyle s;
  s.kind = SynthKind::kLayers;
  s.band_count = 5;
  s.texture_seed = 123;
  const auto back = nlohmann::json(s).get<SynthStyle>();
  CHECK(back.kind == SynthKind::kLayers);
  CHECK(back.band_count == 5);
  CHECK(back.texture_seed == 123);
  const auto partial = nlohmann::json{{"contrast", 0.2}}.get<SynthStyle>();
  CHECK(partial.contrast == 0.2);
  CHECK(partial.curve_count == SynthStyle{}.curve_count);
}

TEST_CASE("weights archive: bit-exact roundtrip and layout") {
  auto m = model::init_model<float>(model::tiny_preset(2), 11);
  testing::randomize_trainable(m, 3);
  const auto bytes = save_weights(m);

  std::size_t tensor_bytes = 0;
  for (const auto* p : m.parameters()) tensor_bytes += p->value.numel() * 4;
  std::uint32_t hlen = 0;
  for (int i = 0; i < 4; ++i) hlen |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  CHECK(bytes.substr(0, 8) == "PSEGWA01");
  CHECK(bytes.size() == 12 + hlen + tensor_bytes);

  const auto back = load_weights(bytes, m.config);
  const auto a = m.parameters();
  const auto b = back.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i]->name == b[i]->name);
    CHECK(a[i]->trainable == b[i]->trainable);
    CHECK(std::memcmp(a[i]->value.data().data(), b[i]->value.data().data(), a[i]->value.numel() * 4) == 0);
  }
  CHECK(read_weights_config(bytes) == m.config);
  CHECK(save_weights(load_weights(bytes)) == bytes);
}

TEST_CASE("weights archive: corrupt inputs are rejected") {
  const auto m = model::init_model<float>(model::tiny_preset(2), 0);
  const auto bytes = save_weights(m);

  CHECK_THROWS_AS(load_weights(bytes.substr(0, bytes.size() - 4), m.config), FormatError);
  CHECK_THROWS_AS(load_weights(bytes.substr(0, 10), m.config), FormatError);
  CHECK_THROWS_AS(load_weights(bytes + "xxxx", m.config), FormatError);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(load_weights(bad_magic, m.config), FormatError);

  auto bad_header = bytes;
  bad_header[12] = '#';
  CHECK_THROWS_AS(load_weights(bad_header, m.config), FormatError);

  // Same archive against a config with a different class count.
  CHECK_THROWS_AS(load_weights(bytes, model::tiny_preset(3)), FormatError);
  CHECK_THROWS_AS(load_weights(bytes, testing::small_config()), FormatError);
}

TEST_CASE("manifest: roundtrip and relative path resolution") {
  TempDir tmp;
  fs::create_directories(tmp.path / "ds" / "images");
  const auto s = synth_vessel(2, 32, SynthStyle{});
  save_image(s.image, tmp.path / "ds" / "images" / "a.png");
  save_prediction(s.mask, tmp.path / "ds" / "images" / "a_mask.png");

  DatasetManifest m;
  m.name = "toy";
  m.num_classes = 2;
  m.class_names = {"background", "vessel"};
  m.train = {{"images/a.png", "images/a_mask.png"}};
  save_manifest(m, tmp.path / "ds" / "manifest.json");

  const auto back = load_manifest(tmp.path / "ds" / "manifest.json");
  CHECK(back.name == "toy");
  CHECK(back.train == m.train);
  CHECK(back.test.empty());
  const auto samples = load_split(back, "train");
  REQUIRE(samples.size() == 1);
  CHECK(samples[0].mask == s.mask);
  CHECK(load_split(back, "test").empty());
  CHECK_THROWS_AS(back.split("val"), ConfigError);
}

TEST_CASE("manifest: malformed files") {
  TempDir tmp;
  CHECK_THROWS_AS(load_manifest(tmp.path / "missing.json"), DataError);
  write_file(tmp.path / "a.json", "{not json");
  CHECK_THROWS_AS(load_manifest(tmp.path / "a.json"), FormatError);
  write_file(tmp.path / "b.json", R"({"name":"x","num_classes":3,"class_names":["a","b"],"train":[]})");
  CHECK_THROWS_AS(load_manifest(tmp.path / "b.json"), FormatError);
  write_file(tmp.path / "c.json", R"({"name":"x","num_classes":2,"class_names":["a","b"],"train":[["only"]]})");
  CHECK_THROWS_AS(load_manifest(tmp.path / "c.json"), FormatError);
}
