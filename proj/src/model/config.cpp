#include "promptseg/model/config.hpp"

#include <cmath>

#include "promptseg/error.hpp"

namespace promptseg::model {

namespace {

void check(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("invalid model config: " + what);
}

}  // namespace

std::size_t ViTConfig::mlp_hidden() const {
  return static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(embed_dim)));
}

void ViTConfig::validate() const {
  // The head ends on a 4x token grid that is then resized up to image_size.
  check(patch_size >= 4, "patch_size must be >= 4");
  check(image_size >= patch_size, "image_size must be >= patch_size");
  check(image_size % patch_size == 0, "image_size " + std::to_string(image_size) +
                                          " not divisible by patch_size " + std::to_string(patch_size));
  check(embed_dim >= 1 && heads >= 1, "embed_dim and heads must be >= 1");
  check(embed_dim % heads == 0,
        "embed_dim " + std::to_string(embed_dim) + " not divisible by heads " + std::to_string(heads));
  // The head halves channels twice and splits the result into 4 equal groups.
  check(embed_dim % 16 == 0, "embed_dim " + std::to_string(embed_dim) +
                                 " must be a multiple of 16 (C/4 split into 4 multi-scale groups)");
  check(depth >= 1, "depth must be >= 1");
  check(num_classes >= 2, "num_classes must be >= 2");
  check(prompt_hidden >= 1, "prompt_hidden must be >= 1");
  check(mlp_ratio > 0.0 && mlp_hidden() >= 1, "mlp_ratio must give a positive hidden width");
  check(std::abs(mlp_ratio * static_cast<double>(embed_dim) - static_cast<double>(mlp_hidden())) < 1e-9,
        "mlp_ratio * embed_dim must be an integer");
}

ViTConfig tiny_preset(std::size_t num_classes) {
  ViTConfig c;
  c.image_size = 64;
  c.patch_size = 8;
  c.embed_dim = 32;
  c.depth = 2;
  c.heads = 4;
  c.mlp_ratio = 4.0;
  c.num_classes = num_classes;
  c.prompt_hidden = 8;
  return c;
}

ViTConfig base_preset(std::size_t num_classes) {
  ViTConfig c;
  c.image_size = 256;
  c.patch_size = 16;
  c.embed_dim = 128;
  c.depth = 6;
  c.heads = 4;
  c.mlp_ratio = 4.0;
  c.num_classes = num_classes;
  c.prompt_hidden = 32;
  return c;
}

ViTConfig preset(const std::string& name, std::size_t num_classes) {
  if (name == "tiny") return tiny_preset(num_classes);
  if (name == "base") return base_preset(num_classes);
  throw ConfigError("unknown preset '" + name + "' (expected tiny|base)");
}

ShapePlan plan_shapes(const ViTConfig& cfg) {
  cfg.validate();
  const std::size_t grid = cfg.grid();
  return {grid, grid * 4, cfg.image_size};
}

void to_json(nlohmann::json& j, const ViTConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size},   {"patch_size", c.patch_size},
                     {"embed_dim", c.embed_dim},     {"depth", c.depth},
                     {"heads", c.heads},             {"mlp_ratio", c.mlp_ratio},
                     {"num_classes", c.num_classes}, {"prompt_hidden", c.prompt_hidden}};
}

void from_json(const nlohmann::json& j, ViTConfig& c) {
  j.at("image_size").get_to(c.image_size);
  j.at("patch_size").get_to(c.patch_size);
  j.at("embed_dim").get_to(c.embed_dim);
  j.at("depth").get_to(c.depth);
  j.at("heads").get_to(c.heads);
  j.at("mlp_ratio").get_to(c.mlp_ratio);
  j.at("num_classes").get_to(c.num_classes);
  j.at("prompt_hidden").get_to(c.prompt_hidden);
}

}  // namespace promptseg::model
