#pragma once

#include <cstddef>
#include <string>

#include "json.hpp"

namespace promptseg::model {

struct ViTConfig {
  std::size_t image_size = 64;
  std::size_t patch_size = 8;
  std::size_t embed_dim = 32;
  std::size_t depth = 2;
  std::size_t heads = 4;
  double mlp_ratio = 4.0;
  std::size_t num_classes = 2;
  std::size_t prompt_hidden = 8;

  // Throws ConfigError naming the first violated constraint.
  void validate() const;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t mlp_hidden() const;
  std::size_t head_channels() const { return embed_dim / 4; }

  friend bool operator==(const ViTConfig&, const ViTConfig&) = default;
};

// S=64, patch 8, C=32, depth 2, 4 heads, C_h=8.
ViTConfig tiny_preset(std::size_t num_classes = 2);
// S=256, patch 16, C=128, depth 6, 4 heads, C_h=32.
ViTConfig base_preset(std::size_t num_classes = 2);
// Throws ConfigError for names other than "tiny" and "base".
ViTConfig preset(const std::string& name, std::size_t num_classes);

// Spatial sizes along the pipeline, derived from the config alone.
struct ShapePlan {
  std::size_t token_grid;   // image_size / patch_size
  std::size_t logit_grid;   // token_grid * 4 after the two transpose convs
  std::size_t output_size;  // image_size after the final resize
};
ShapePlan plan_shapes(const ViTConfig& cfg);

void to_json(nlohmann::json& j, const ViTConfig& c);
void from_json(const nlohmann::json& j, ViTConfig& c);

}  // namespace promptseg::model
