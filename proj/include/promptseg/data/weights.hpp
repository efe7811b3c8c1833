#pragma once

#include <array>
#include <filesystem>
#include <string>

#include "promptseg/model/seg_model.hpp"

namespace promptseg::data {

// Layout: 8-byte magic, uint32 little-endian header length, JSON header, then
// the tensor blob as little-endian float32 in header order.
inline constexpr std::array<char, 8> kWeightsMagic{'P', 'S', 'E', 'G', 'W', 'A', '0', '1'};

std::string save_weights(const model::SegModel<float>& m);

// Rebuilds the model for `config` and fills it from the archive. Every
// parameter must be present exactly once with its expected shape; trainable
// flags come from the model structure. Throws FormatError on any mismatch
// and never returns a partially filled model.
model::SegModel<float> load_weights(const std::string& bytes, const model::ViTConfig& config);
// Uses the config stored in the header.
model::SegModel<float> load_weights(const std::string& bytes);

model::ViTConfig read_weights_config(const std::string& bytes);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace promptseg::data
