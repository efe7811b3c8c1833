#pragma once

// Parameter counts written out from the architecture, independent of the
// model's own bookkeeping.

#include <cstddef>

#include "promptseg/model/config.hpp"

namespace promptseg::testing {

inline std::size_t prompt_layer_count(std::size_t c, std::size_t ch) {
  const std::size_t w_in = c * ch + ch;
  const std::size_t dw = 3 * 3 * ch + ch;
  const std::size_t w_out = ch * c + c;
  const std::size_t norms = 2 * ch + 2 * ch + 2 * c;
  return w_in + dw + w_out + norms;
}

inline std::size_t head_count(std::size_t c, std::size_t classes) {
  const std::size_t c2 = c / 2, c4 = c / 4, g = c / 16;
  const std::size_t up = c * c2 * 4 + c2 + c2 * c4 * 4 + c4;
  const std::size_t ms = g * g * (1 + 9 + 25 + 49) + c4;
  return up + ms + c4 * classes + classes;
}

inline std::size_t backbone_count(const model::ViTConfig& cfg) {
  const std::size_t c = cfg.embed_dim, p = cfg.patch_size, g = cfg.image_size / cfg.patch_size;
  const auto m = static_cast<std::size_t>(cfg.mlp_ratio * static_cast<double>(c));
  const std::size_t embed = c * 3 * p * p + c + g * g * c;
  const std::size_t block = 4 * c + 4 * c * c + c * m + m + m * c + c;
  return embed + cfg.depth * block;
}

inline std::size_t trainable_count(const model::ViTConfig& cfg) {
  return cfg.depth * prompt_layer_count(cfg.embed_dim, cfg.prompt_hidden) + head_count(cfg.embed_dim, cfg.num_classes);
}

}  // namespace promptseg::testing
