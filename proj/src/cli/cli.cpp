#include "promptseg/cli/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "promptseg/data/io.hpp"
#include "promptseg/data/manifest.hpp"
#include "promptseg/data/synth.hpp"
#include "promptseg/data/weights.hpp"
#include "promptseg/error.hpp"
#include "promptseg/metrics/metrics.hpp"
#include "promptseg/model/seg_model.hpp"
#include "promptseg/training/train.hpp"

namespace promptseg::cli {

namespace fs = std::filesystem;

namespace {

struct SynthArgs {
  std::string kind = "vessel";
  std::uint64_t seed = 0;
  std::size_t size = 64;
  std::size_t count = 1;
  std::size_t test_count = 0;
  std::string style_file;
  std::string out;
  std::string name;
};

struct TrainArgs {
  std::string manifest;
  std::string split = "train";
  std::string preset = "tiny";
  std::size_t max_iter = 200;
  std::uint64_t seed = 0;
  double init_lr = 0.05;
  double power = 0.9;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  std::vector<double> class_weights;
  std::string out;
  std::string fit_report;
};

struct EvalArgs {
  std::string manifest;
  std::string model;
  std::string split = "test";
  std::vector<std::string> reports;
};

struct PredictArgs {
  std::string image;
  std::string model;
  std::string out;
  std::string overlay;
};

struct InspectArgs {
  std::string model;
};

std::string three_digits(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%03zu", i);
  return buf;
}

std::string fixed(double v, int digits) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) { data::write_file(path, text); }

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  data::SynthStyle style;
  if (!a.style_file.empty()) {
    try {
      style = nlohmann::json::parse(data::read_file(a.style_file)).get<data::SynthStyle>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("style file " + a.style_file + ": " + e.what());
    }
  }
  style.kind = data::parse_kind(a.kind);
  style.validate();
  if (a.count + a.test_count == 0) throw ConfigError("synth: --count and --test-count are both 0");

  const fs::path root(a.out);
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");

  data::DatasetManifest m;
  m.name = a.name.empty() ? data::kind_name(style.kind) + "_" + std::to_string(a.seed) : a.name;
  m.num_classes = style.num_classes();
  m.class_names = style.class_names();
  auto emit = [&](const std::string& split, std::size_t index, std::uint64_t sample_seed) {
    const auto s = data::synthesize(sample_seed, a.size, style);
    const std::string stem = split + "_" + three_digits(index) + ".png";
    data::save_image(s.image, root / "images" / stem);
    data::save_prediction(s.mask, root / "masks" / stem);
    return data::DatasetManifest::Entry{"images/" + stem, "masks/" + stem};
  };
  // Train and test samples draw from disjoint seed streams.
  for (std::size_t i = 0; i < a.count; ++i) m.train.push_back(emit("train", i, nn::mix_seed(a.seed, 2 * i)));
  for (std::size_t i = 0; i < a.test_count; ++i) m.test.push_back(emit("test", i, nn::mix_seed(a.seed, 2 * i + 1)));
  data::save_manifest(m, root / "manifest.json");
  out << "wrote " << (root / "manifest.json").string() << " train=" << m.train.size() << " test=" << m.test.size()
      << "\n";
  return kExitOk;
}

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  training::TrainConfig tc;
  tc.init_lr = a.init_lr;
  tc.power = a.power;
  tc.momentum = a.momentum;
  tc.weight_decay = a.weight_decay;
  tc.max_iter = a.max_iter;
  tc.seed = a.seed;
  tc.class_weights = a.class_weights;
  tc.validate();

  const auto manifest = data::load_manifest(a.manifest);
  auto cfg = model::preset(a.preset, manifest.num_classes);
  cfg.validate();
  const auto samples = data::load_split(manifest, a.split);
  if (samples.empty()) throw ConfigError("train: split '" + a.split + "' of " + a.manifest + " is empty");

  auto m = model::init_model<float>(cfg, a.seed);
  const auto report = training::fit_one_shot(m, std::span<const data::Sample>(samples), tc);

  data::write_file(a.out, data::save_weights(m));
  const fs::path fit = a.fit_report.empty() ? fs::path(a.out).replace_extension(".fit.json") : fs::path(a.fit_report);
  write_text(fit, training::fit_report_json(report, tc, cfg).dump(2) + "\n");
  out << "trained " << a.preset << " iterations=" << report.loss_curve.size()
      << " loss=" << fixed(report.loss_curve.front(), 6) << "->" << fixed(report.loss_curve.back(), 6)
      << " train_dice=" << fixed(report.final_train_dice, 6) << "\n";
  err << "wall_time_s=" << fixed(report.wall_time, 3) << "\n";
  return kExitOk;
}

metrics::MetricsReport evaluate(const model::SegModel<float>& m, const std::vector<data::Sample>& samples,
                                const std::vector<std::string>& class_names) {
  metrics::ReportAccumulator acc(class_names);
  nn::NoGradGuard guard;
  for (const auto& s : samples) {
    const auto logits = model::forward(s.image, m);
    acc.add(model::argmax_classes(logits.value()), s.mask.labels);
  }
  return acc.finish();
}

void check_sample_fits(const data::Sample& s, const model::ViTConfig& cfg) {
  if (s.mask.height != cfg.image_size || s.mask.width != cfg.image_size) {
    throw DataError(DataError::Kind::kSizeMismatch, "size mismatch: sample '" + s.id + "' is " +
                                                        std::to_string(s.mask.width) + "x" +
                                                        std::to_string(s.mask.height) + ", model expects " +
                                                        std::to_string(cfg.image_size));
  }
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  // Validate every report path before any work starts.
  for (const auto& r : a.reports) {
    const auto ext = fs::path(r).extension().string();
    if (ext != ".csv" && ext != ".json") throw ConfigError("eval: --report must end in .csv or .json: " + r);
  }
  const auto manifest = data::load_manifest(a.manifest);
  const auto m = data::load_weights(data::read_file(a.model));
  if (m.config.num_classes != manifest.num_classes) {
    throw DataError(DataError::Kind::kClassMismatch,
                    "class mismatch: model has " + std::to_string(m.config.num_classes) + " classes, manifest " +
                        a.manifest + " has " + std::to_string(manifest.num_classes));
  }
  const auto samples = data::load_split(manifest, a.split);
  if (samples.empty()) throw ConfigError("eval: split '" + a.split + "' of " + a.manifest + " is empty");
  for (const auto& s : samples) check_sample_fits(s, m.config);

  const auto report = evaluate(m, samples, manifest.class_names);
  for (const auto& r : a.reports) {
    if (fs::path(r).extension() == ".csv") {
      write_text(r, report.to_csv());
    } else {
      auto j = report.to_json();
      j["dataset"] = manifest.name;
      j["split"] = a.split;
      j["samples"] = samples.size();
      write_text(r, j.dump(2) + "\n");
    }
  }
  out << "eval " << manifest.name << "/" << a.split << " samples=" << samples.size();
  for (const auto& c : report.headline()) {
    out << " " << c.name << ":P=" << fixed(c.precision, 4) << ",REC=" << fixed(c.recall, 4)
        << ",Dice=" << fixed(c.dice, 4) << ",BM=" << fixed(c.bm, 4) << ",IoU=" << fixed(c.iou, 4);
  }
  out << " mean_dice=" << fixed(report.mean_dice(), 4) << "\n";
  return kExitOk;
}

int cmd_predict(const PredictArgs& a, std::ostream& out) {
  const auto m = data::load_weights(data::read_file(a.model));
  const auto image = data::load_image(a.image);
  if (image.dim(1) != m.config.image_size || image.dim(2) != m.config.image_size) {
    throw DataError(DataError::Kind::kSizeMismatch, "size mismatch: image " + a.image + " is " +
                                                        std::to_string(image.dim(2)) + "x" +
                                                        std::to_string(image.dim(1)) + ", model expects " +
                                                        std::to_string(m.config.image_size));
  }
  data::ClassMask mask;
  {
    nn::NoGradGuard guard;
    const auto logits = model::forward(image, m);
    mask = data::ClassMask{image.dim(1), image.dim(2), model::argmax_classes(logits.value())};
  }
  data::save_prediction(mask, a.out);
  if (!a.overlay.empty()) data::save_overlay(image, mask, a.overlay);
  out << "wrote " << a.out << (a.overlay.empty() ? "" : " and " + a.overlay) << "\n";
  return kExitOk;
}

int cmd_inspect(const InspectArgs& a, std::ostream& out) {
  const auto m = data::load_weights(data::read_file(a.model));
  const auto counts = model::count_parameters(m);
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto* p : m.parameters()) {
    tensors.push_back({{"name", p->name}, {"shape", p->value.shape()}, {"trainable", p->trainable}});
  }
  const nlohmann::json j = {{"config", m.config},
                            {"parameters",
                             {{"backbone", counts.backbone},
                              {"frozen", counts.backbone},
                              {"trainable", counts.trainable()},
                              {"prompts", counts.prompts},
                              {"head", counts.head},
                              {"total", counts.total()}}},
                            {"tensors", tensors}};
  out << j.dump(2) << "\n";
  return kExitOk;
}

std::string data_token(DataError::Kind k) {
  switch (k) {
    case DataError::Kind::kMissingFile: return "missing_file";
    case DataError::Kind::kSizeMismatch: return "size_mismatch";
    case DataError::Kind::kClassRange: return "class_range";
    case DataError::Kind::kClassMismatch: return "class_mismatch";
    case DataError::Kind::kFormat: return "bad_format";
    case DataError::Kind::kIo: return "io";
  }
  return "data";
}

void report_error(std::ostream& err, int code, const std::string& token, const std::string& message) {
  err << "error code=" << token << " exit=" << code << " message=" << nlohmann::json(message).dump() << "\n";
}

}  // namespace

std::pair<int, std::string> classify(const std::exception& e) {
  if (const auto* d = dynamic_cast<const DataError*>(&e)) return {kExitData, data_token(d->kind())};
  if (dynamic_cast<const FormatError*>(&e)) return {kExitData, "bad_format"};
  if (dynamic_cast<const ShapeError*>(&e)) return {kExitData, "shape"};
  if (dynamic_cast<const NumericError*>(&e)) return {kExitNumeric, "numeric"};
  if (dynamic_cast<const ConfigError*>(&e)) return {kExitUsage, "config"};
  if (dynamic_cast<const fs::filesystem_error*>(&e)) return {kExitData, "io"};
  return {kExitInternal, "internal"};
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"One-shot prompt-layer segmentation on a frozen transformer encoder", "promptseg"};
  app.set_config("--config", "", "TOML/INI file supplying flag values ([subcommand] sections)");
  app.require_subcommand(1, 1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Render a synthetic dataset and its manifest");
  synth->add_option("--kind", sa.kind, "vessel|layers")->check(CLI::IsMember({"vessel", "layers"}));
  synth->add_option("--seed", sa.seed, "Structure seed");
  synth->add_option("--size", sa.size, "Image side in pixels")->check(CLI::Range(32, 4096));
  synth->add_option("--count", sa.count, "Training samples");
  synth->add_option("--test-count", sa.test_count, "Test samples");
  synth->add_option("--style-file", sa.style_file, "JSON style overrides")->check(CLI::ExistingFile);
  synth->add_option("--name", sa.name, "Dataset name in the manifest");
  synth->add_option("--out", sa.out, "Output directory")->required();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "One-shot fit of prompt layers and head");
  train->add_option("--manifest", ta.manifest, "Dataset manifest")->required();
  train->add_option("--split", ta.split, "Split to train on")->check(CLI::IsMember({"train", "test"}));
  train->add_option("--preset", ta.preset, "tiny|base")->check(CLI::IsMember({"tiny", "base"}));
  train->add_option("--max-iter", ta.max_iter, "Iterations")->check(CLI::PositiveNumber);
  train->add_option("--seed", ta.seed, "Model init seed");
  train->add_option("--init-lr", ta.init_lr, "Initial learning rate");
  train->add_option("--power", ta.power, "Poly schedule power");
  train->add_option("--momentum", ta.momentum, "SGD momentum");
  train->add_option("--weight-decay", ta.weight_decay, "Coupled weight decay");
  train->add_option("--class-weights", ta.class_weights, "Per-class loss weights")->delimiter(',');
  train->add_option("--out", ta.out, "Weights archive path")->required();
  train->add_option("--fit-report", ta.fit_report, "Fit report JSON (default: <out stem>.fit.json)");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Score a model on a manifest split");
  eval->add_option("--manifest", ea.manifest, "Dataset manifest")->required();
  eval->add_option("--model", ea.model, "Weights archive")->required();
  eval->add_option("--split", ea.split, "train|test")->check(CLI::IsMember({"train", "test"}));
  eval->add_option("--report", ea.reports, "Report file (.csv or .json), repeatable");

  PredictArgs pa;
  auto* predict = app.add_subcommand("predict", "Segment one image");
  predict->add_option("--image", pa.image, "RGB PNG")->required();
  predict->add_option("--model", pa.model, "Weights archive")->required();
  predict->add_option("--out", pa.out, "Index mask PNG")->required();
  predict->add_option("--overlay", pa.overlay, "Optional colour overlay PNG");

  InspectArgs ia;
  auto* inspect = app.add_subcommand("inspect", "Print config and parameter counts as JSON");
  inspect->add_option("--model", ia.model, "Weights archive")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    report_error(err, kExitUsage, "usage", e.what());
    return kExitUsage;
  }

  try {
    if (synth->parsed()) return cmd_synth(sa, out);
    if (train->parsed()) return cmd_train(ta, out, err);
    if (eval->parsed()) return cmd_eval(ea, out);
    if (predict->parsed()) return cmd_predict(pa, out);
    if (inspect->parsed()) return cmd_inspect(ia, out);
  } catch (const std::exception& e) {
    const auto [code, token] = classify(e);
    report_error(err, code, token, e.what());
    return code;
  }
  report_error(err, kExitUsage, "usage", "no subcommand");
  return kExitUsage;
}

}  // namespace promptseg::cli
