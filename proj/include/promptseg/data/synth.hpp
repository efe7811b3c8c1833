#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "json.hpp"
#include "promptseg/data/sample.hpp"

namespace promptseg::data {

enum class SynthKind { kVessel, kLayers };

// Structure fields decide the mask; appearance fields only change pixel
// intensities. Two styles that agree on structure give identical masks for the
// same seed.
struct SynthStyle {
  SynthKind kind = SynthKind::kVessel;

  // structure
  std::size_t curve_count = 3;  // vessel
  std::size_t band_count = 4;   // layers
  double thickness_min = 6.0;   // vessel width in pixels at size 64
  double thickness_max = 10.0;
  double waviness = 1.0;  // layers: boundary amplitude scale

  // appearance
  std::uint64_t texture_seed = 0;
  double contrast = 0.5;
  double noise = 0.03;
  double texture_amplitude = 0.12;
  double background = 0.55;
  std::array<double, 3> tint{1.0, 0.55, 0.3};

  // Throws ConfigError for degenerate ranges.
  void validate() const;
  std::size_t num_classes() const { return kind == SynthKind::kVessel ? 2 : band_count; }
  std::vector<std::string> class_names() const;
};

void to_json(nlohmann::json& j, const SynthStyle& s);
// Missing keys keep their defaults.
void from_json(const nlohmann::json& j, SynthStyle& s);

SynthKind parse_kind(const std::string& s);
std::string kind_name(SynthKind k);

// Curvilinear structures over a textured background. The mask is exactly the
// rendered support. size >= 32.
Sample synth_vessel(std::uint64_t seed, std::size_t size, const SynthStyle& style);

// Horizontal bands separated by smooth wavy boundaries that stay ordered in
// every column; band k has class k. size >= 32 and band_count <= size / 4.
Sample synth_layers(std::uint64_t seed, std::size_t size, const SynthStyle& style);

// Dispatches on style.kind.
Sample synthesize(std::uint64_t seed, std::size_t size, const SynthStyle& style);

}  // namespace promptseg::data
