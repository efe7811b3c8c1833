#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <filesystem>
#include <map>
#include <sstream>

#include "json.hpp"
#include "promptseg/cli/cli.hpp"
#include "promptseg/data/io.hpp"
#include "promptseg/data/weights.hpp"
#include "closed_form.hpp"
#include "temp_dir.hpp"

using namespace promptseg;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result invoke(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = data::read_file(e.path());
  }
  return files;
}

// Small vessel dataset plus a model trained on it, shared by several cases.
struct Trained {
  testing::TempDir tmp{"test_cli"};
  fs::path data = tmp.path / "data";
  fs::path manifest = data / "manifest.json";
  fs::path model = tmp.path / "model.wa";

  Trained() {
    REQUIRE(invoke({"synth", "--seed", "3", "--count", "1", "--test-count", "3", "--out", data.string()}).code == 0);
    const auto r = invoke({"train", "--manifest", manifest.string(), "--out", model.string(), "--max-iter", "60"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
  }
};

}  // namespace

TEST_CASE("help and usage errors") {
  const auto help = invoke({"--help"});
  CHECK(help.code == cli::kExitOk);
  CHECK(help.out.find("synth") != std::string::npos);
  CHECK(invoke({"train", "--help"}).code == cli::kExitOk);

  CHECK(invoke({}).code == cli::kExitUsage);
  CHECK(invoke({"bogus"}).code == cli::kExitUsage);
  const auto missing = invoke({"train", "--out", "x.wa"});
  CHECK(missing.code == cli::kExitUsage);
  CHECK(missing.err.rfind("error code=usage exit=2 message=", 0) == 0);
  CHECK(invoke({"synth", "--out", "x", "--kind", "spiral"}).code == cli::kExitUsage);
}

TEST_CASE("synth writes a manifest and is deterministic") {
  testing::TempDir tmp("test_cli_synth");
  const std::vector<std::string> base{"synth", "--kind", "layers", "--seed", "9", "--count", "2", "--test-count", "1"};
  auto a = base, b = base;
  a.insert(a.end(), {"--out", (tmp.path / "a").string()});
  b.insert(b.end(), {"--out", (tmp.path / "b").string()});
  REQUIRE(invoke(a).code == 0);
  REQUIRE(invoke(b).code == 0);
  CHECK(snapshot(tmp.path / "a") == snapshot(tmp.path / "b"));

  const auto j = nlohmann::json::parse(data::read_file(tmp.path / "a" / "manifest.json"));
  CHECK(j.at("num_classes") == 4);
  CHECK(j.at("train").size() == 2);
  CHECK(j.at("test").size() == 1);
  const auto mask = data::load_mask(tmp.path / "a" / j.at("train")[0][1].get<std::string>());
  CHECK(*std::max_element(mask.labels.begin(), mask.labels.end()) == 3);
}

TEST_CASE("train eval predict inspect") {
  Trained t;
  const auto fit = nlohmann::json::parse(data::read_file(t.tmp.path / "model.fit.json"));
  CHECK(fit.at("iterations") == 60);
  CHECK(fit.at("loss_curve").size() == 60);
  CHECK_FALSE(fit.contains("wall_time"));

  const auto csv = (t.tmp.path / "r.csv").string(), json = (t.tmp.path / "r.json").string();
  const auto ev = invoke({"eval", "--manifest", t.manifest.string(), "--model", t.model.string(), "--report", csv,
                          "--report", json});
  REQUIRE_MESSAGE(ev.code == 0, ev.err);
  CHECK(ev.out.find("vessel:P=") != std::string::npos);
  CHECK(data::read_file(csv).rfind("class_id,class_name,headline,", 0) == 0);
  const auto rep = nlohmann::json::parse(data::read_file(json));
  CHECK(rep.at("samples") == 3);
  CHECK(rep.at("split") == "test");
  CHECK(rep.at("classes").size() == 2);

  const auto pred = (t.tmp.path / "p.png").string(), over = (t.tmp.path / "o.png").string();
  const auto image = (t.data / "images" / "test_000.png").string();
  REQUIRE(invoke({"predict", "--image", image, "--model", t.model.string(), "--out", pred, "--overlay", over}).code ==
          0);
  const auto mask = data::load_mask(pred);
  CHECK(mask.height == 64);
  CHECK(*std::max_element(mask.labels.begin(), mask.labels.end()) <= 1);
  CHECK(data::load_image(over).dim(1) == 64);

  const auto ins = invoke({"inspect", "--model", t.model.string()});
  REQUIRE(ins.code == 0);
  const auto j = nlohmann::json::parse(ins.out);
  const auto cfg = j.at("config").get<model::ViTConfig>();
  CHECK(j["parameters"]["trainable"] == testing::trainable_count(cfg));
  CHECK(j["parameters"]["frozen"] == testing::backbone_count(cfg));
  CHECK(j["parameters"]["total"] == testing::trainable_count(cfg) + testing::backbone_count(cfg));
}

TEST_CASE("commands leave their inputs untouched") {
  Trained t;
  const auto before = snapshot(t.data);
  const auto model_bytes = data::read_file(t.model);
  invoke({"eval", "--manifest", t.manifest.string(), "--model", t.model.string(), "--split", "train"});
  invoke({"predict", "--image", (t.data / "images" / "train_000.png").string(), "--model", t.model.string(), "--out",
          (t.tmp.path / "p.png").string()});
  invoke({"inspect", "--model", t.model.string()});
  CHECK(snapshot(t.data) == before);
  CHECK(data::read_file(t.model) == model_bytes);
}

TEST_CASE("data errors exit 3 with a stable token") {
  Trained t;
  const auto layers = t.tmp.path / "layers";
  REQUIRE(invoke({"synth", "--kind", "layers", "--count", "1", "--test-count", "1", "--out", layers.string()}).code ==
          0);
  const auto mismatch =
      invoke({"eval", "--manifest", (layers / "manifest.json").string(), "--model", t.model.string()});
  CHECK(mismatch.code == cli::kExitData);
  CHECK(mismatch.err.rfind("error code=class_mismatch exit=3 message=", 0) == 0);
  CHECK(mismatch.err.find("model has 2 classes") != std::string::npos);
  CHECK(mismatch.err.find("has 4") != std::string::npos);
  CHECK(std::count(mismatch.err.begin(), mismatch.err.end(), '\n') == 1);

  const auto big = t.tmp.path / "big";
  REQUIRE(invoke({"synth", "--size", "96", "--count", "1", "--test-count", "1", "--out", big.string()}).code == 0);
  const auto size = invoke({"eval", "--manifest", (big / "manifest.json").string(), "--model", t.model.string()});
  CHECK(size.code == cli::kExitData);
  CHECK(size.err.find("code=size_mismatch") != std::string::npos);

  const auto none = invoke({"eval", "--manifest", (t.tmp.path / "nope.json").string(), "--model", t.model.string()});
  CHECK(none.code == cli::kExitData);
  CHECK(none.err.find("code=missing_file") != std::string::npos);

  const auto bad = invoke({"inspect", "--model", t.manifest.string()});
  CHECK(bad.code == cli::kExitData);
  CHECK(bad.err.find("code=bad_format") != std::string::npos);
}

TEST_CASE("config and numeric errors") {
  Trained t;
  const auto out = (t.tmp.path / "x.wa").string();
  const auto lr = invoke({"train", "--manifest", t.manifest.string(), "--out", out, "--init-lr", "-1"});
  CHECK(lr.code == cli::kExitUsage);
  CHECK(lr.err.find("init_lr") != std::string::npos);
  CHECK_FALSE(fs::exists(out));

  const auto ext = invoke({"eval", "--manifest", t.manifest.string(), "--model", t.model.string(), "--report",
                           (t.tmp.path / "r.txt").string()});
  CHECK(ext.code == cli::kExitUsage);

  const auto blow = invoke({"train", "--manifest", t.manifest.string(), "--out", out, "--init-lr", "1e6"});
  CHECK(blow.code == cli::kExitNumeric);
  CHECK(blow.err.find("iteration") != std::string::npos);
  CHECK_FALSE(fs::exists(out));
}

TEST_CASE("config file supplies subcommand flags") {
  Trained t;
  const auto cfg = t.tmp.path / "run.toml";
  const auto out = t.tmp.path / "c.wa";
  data::write_file(cfg, "[train]\nmanifest = \"" + t.manifest.string() + "\"\nout = \"" + out.string() +
                            "\"\nmax-iter = 4\n");
  const auto r = invoke({"--config", cfg.string(), "train"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(nlohmann::json::parse(data::read_file(t.tmp.path / "c.fit.json")).at("iterations") == 4);
}

TEST_CASE("train is byte-reproducible") {
  Trained t;
  const auto again = t.tmp.path / "again.wa";
  REQUIRE(invoke({"train", "--manifest", t.manifest.string(), "--out", again.string(), "--max-iter", "60"}).code == 0);
  CHECK(data::read_file(again) == data::read_file(t.model));
  CHECK(data::read_file(t.tmp.path / "again.fit.json") == data::read_file(t.tmp.path / "model.fit.json"));
}
