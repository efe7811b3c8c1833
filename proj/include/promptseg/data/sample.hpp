#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "promptseg/nn/tensor.hpp"

namespace promptseg::data {

// Row-major grid of class indices.
struct ClassMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> labels;

  std::uint8_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
  std::uint8_t& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }
  friend bool operator==(const ClassMask&, const ClassMask&) = default;
};

struct Sample {
  std::string id;
  nn::Tensor image;  // [3, H, W], values in [0, 1]
  ClassMask mask;    // H x W
};

}  // namespace promptseg::data
