#pragma once

#include <array>
#include <filesystem>
#include <string>

#include "promptseg/data/sample.hpp"

namespace promptseg::data {

// 8-bit RGB (gray and alpha inputs are expanded/stripped). Returns [3, H, W]
// scaled to [0, 1].
nn::Tensor load_image(const std::filesystem::path& path);

// Single-channel 8-bit PNG holding class indices. Anything else is a
// DataError of kind kFormat.
ClassMask load_mask(const std::filesystem::path& path);

// Distinct DataError kinds: kMissingFile, kSizeMismatch, kClassRange.
Sample load_sample(const std::filesystem::path& image_path, const std::filesystem::path& mask_path,
                   std::size_t num_classes);

// Values are clamped to [0, 1] and rounded to the nearest of 256 levels.
void save_image(const nn::Tensor& image, const std::filesystem::path& path);
// Index PNG, 8-bit gray.
void save_prediction(const ClassMask& mask, const std::filesystem::path& path);
// Blends a fixed per-class palette over `image` (class 0 left untouched).
void save_overlay(const nn::Tensor& image, const ClassMask& mask, const std::filesystem::path& path,
                  double alpha = 0.5);

// RGB of class k in the overlay palette.
std::array<std::uint8_t, 3> palette_color(std::size_t k);

}  // namespace promptseg::data
