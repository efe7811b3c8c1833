#include "promptseg/data/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "promptseg/error.hpp"

namespace promptseg::data {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Stream labels so structure and appearance never share random draws.
constexpr std::uint64_t kStructureStream = 0x5354525543545552ull;
constexpr std::uint64_t kAppearanceStream = 0x4150504541524e43ull;

void check(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("invalid synth style: " + what);
}

// Smooth low-frequency field in roughly [-1, 1].
struct Texture {
  std::array<double, 4> fx{}, fy{}, phase{}, amp{};

  explicit Texture(nn::Rng& rng, double size) {
    double total = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
      const double ang = rng.uniform(0.0, kTwoPi);
      const double cycles = rng.uniform(0.5, 3.5);
      fx[i] = std::cos(ang) * cycles * kTwoPi / size;
      fy[i] = std::sin(ang) * cycles * kTwoPi / size;
      phase[i] = rng.uniform(0.0, kTwoPi);
      amp[i] = rng.uniform(0.3, 1.0);
      total += amp[i];
    }
    for (auto& a : amp) a /= total;
  }

  double at(double x, double y) const {
    double v = 0.0;
    for (std::size_t i = 0; i < 4; ++i) v += amp[i] * std::sin(fx[i] * x + fy[i] * y + phase[i]);
    return v;
  }
};

// Renders per-pixel intensities (before tint and noise) into an RGB image.
nn::Tensor shade(const std::vector<double>& level, std::size_t size, const SynthStyle& style, nn::Rng& rng) {
  const std::size_t P = size * size;
  Texture tex(rng, static_cast<double>(size));
  nn::Tensor img({3, size, size});
  auto out = img.data();
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const std::size_t p = y * size + x;
      const double base = level[p] + style.texture_amplitude * tex.at(static_cast<double>(x), static_cast<double>(y));
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = style.tint[c] * base + style.noise * rng.normal();
        out[c * P + p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return img;
}

void check_size(std::size_t size) {
  if (size < 32) throw ConfigError("synth: size must be >= 32, got " + std::to_string(size));
}

}  // namespace

void SynthStyle::validate() const {
  if (kind == SynthKind::kVessel) {
    check(curve_count >= 1, "curve_count must be >= 1");
    check(thickness_min > 0.0, "thickness_min must be > 0");
    check(thickness_min <= thickness_max, "thickness_min must be <= thickness_max");
  } else {
    check(band_count >= 2, "band_count must be >= 2");
    check(band_count <= 255, "band_count must be <= 255");
    check(waviness >= 0.0 && waviness <= 1.0, "waviness must be in [0, 1]");
  }
  check(contrast > 0.0 && contrast <= 1.0, "contrast must be in (0, 1]");
  check(noise >= 0.0 && noise <= 1.0, "noise must be in [0, 1]");
  check(texture_amplitude >= 0.0 && texture_amplitude <= 1.0, "texture_amplitude must be in [0, 1]");
  check(background >= 0.0 && background <= 1.0, "background must be in [0, 1]");
  for (double t : tint) check(t >= 0.0 && t <= 1.0, "tint entries must be in [0, 1]");
}

std::vector<std::string> SynthStyle::class_names() const {
  if (kind == SynthKind::kVessel) return {"background", "vessel"};
  std::vector<std::string> names;
  for (std::size_t k = 0; k < band_count; ++k) names.push_back("band" + std::to_string(k));
  return names;
}

SynthKind parse_kind(const std::string& s) {
  if (s == "vessel") return SynthKind::kVessel;
  if (s == "layers") return SynthKind::kLayers;
  throw ConfigError("unknown synth kind '" + s + "' (expected vessel|layers)");
}

std::string kind_name(SynthKind k) { return k == SynthKind::kVessel ? "vessel" : "layers"; }

void to_json(nlohmann::json& j, const SynthStyle& s) {
  j = nlohmann::json{{"kind", kind_name(s.kind)},
                     {"curve_count", s.curve_count},
                     {"band_count", s.band_count},
                     {"thickness_min", s.thickness_min},
                     {"thickness_max", s.thickness_max},
                     {"waviness", s.waviness},
                     {"texture_seed", s.texture_seed},
                     {"contrast", s.contrast},
                     {"noise", s.noise},
                     {"texture_amplitude", s.texture_amplitude},
                     {"background", s.background},
                     {"tint", s.tint}};
}

void from_json(const nlohmann::json& j, SynthStyle& s) {
  if (j.contains("kind")) s.kind = parse_kind(j.at("kind").get<std::string>());
  if (j.contains("curve_count")) j.at("curve_count").get_to(s.curve_count);
  if (j.contains("band_count")) j.at("band_count").get_to(s.band_count);
  if (j.contains("thickness_min")) j.at("thickness_min").get_to(s.thickness_min);
  if (j.contains("thickness_max")) j.at("thickness_max").get_to(s.thickness_max);
  if (j.contains("waviness")) j.at("waviness").get_to(s.waviness);
  if (j.contains("texture_seed")) j.at("texture_seed").get_to(s.texture_seed);
  if (j.contains("contrast")) j.at("contrast").get_to(s.contrast);
  if (j.contains("noise")) j.at("noise").get_to(s.noise);
  if (j.contains("texture_amplitude")) j.at("texture_amplitude").get_to(s.texture_amplitude);
  if (j.contains("background")) j.at("background").get_to(s.background);
  if (j.contains("tint")) j.at("tint").get_to(s.tint);
}

Sample synth_vessel(std::uint64_t seed, std::size_t size, const SynthStyle& style) {
  check_size(size);
  check(style.kind == SynthKind::kVessel, "synth_vessel needs kind vessel");
  style.validate();

  nn::Rng rng = nn::Rng(seed).fork(kStructureStream);
  const double S = static_cast<double>(size);
  const double unit = S / 64.0;  // thickness is specified at 64 px
  ClassMask mask{size, size, std::vector<std::uint8_t>(size * size, 0)};

  for (std::size_t c = 0; c < style.curve_count; ++c) {
    // Enter from a random edge, aimed roughly across the image.
    const int edge = static_cast<int>(rng.uniform_int(0, 3));
    const double t = rng.uniform(0.15, 0.85) * S;
    double x = edge == 0 ? 0.0 : edge == 1 ? S : t;
    double y = edge == 2 ? 0.0 : edge == 3 ? S : t;
    const double tx = rng.uniform(0.3, 0.7) * S, ty = rng.uniform(0.3, 0.7) * S;
    double heading = std::atan2(ty - y, tx - x);
    double curvature = 0.0;

    const double w0 = rng.uniform(style.thickness_min, style.thickness_max) * unit;
    const double wphase = rng.uniform(0.0, kTwoPi);
    const double step = 0.5;
    const std::size_t max_steps = static_cast<std::size_t>(1.5 * S / step);

    for (std::size_t s = 0; s < max_steps; ++s) {
      const double r = 0.5 * w0 * (1.0 + 0.15 * std::sin(wphase + kTwoPi * static_cast<double>(s) * step / S));
      const long x0 = std::max(0L, static_cast<long>(std::floor(x - r - 1.0)));
      const long x1 = std::min(static_cast<long>(size) - 1, static_cast<long>(std::ceil(x + r + 1.0)));
      const long y0 = std::max(0L, static_cast<long>(std::floor(y - r - 1.0)));
      const long y1 = std::min(static_cast<long>(size) - 1, static_cast<long>(std::ceil(y + r + 1.0)));
      for (long py = y0; py <= y1; ++py) {
        for (long px = x0; px <= x1; ++px) {
          const double dx = static_cast<double>(px) + 0.5 - x, dy = static_cast<double>(py) + 0.5 - y;
          if (dx * dx + dy * dy <= r * r) mask.labels[static_cast<std::size_t>(py) * size + px] = 1;
        }
      }
      curvature = 0.92 * curvature + 0.025 * rng.normal() / unit;
      heading += curvature * step;
      x += step * std::cos(heading);
      y += step * std::sin(heading);
      if (s > 8 && (x < -r || y < -r || x > S + r || y > S + r)) break;
    }
  }

  nn::Rng look = nn::Rng(nn::mix_seed(seed, style.texture_seed)).fork(kAppearanceStream);
  std::vector<double> level(size * size);
  for (std::size_t p = 0; p < level.size(); ++p) {
    level[p] = style.background - (mask.labels[p] ? style.contrast : 0.0);
  }
  Sample out;
  out.id = "vessel_" + std::to_string(seed);
  out.image = shade(level, size, style, look);
  out.mask = std::move(mask);
  return out;
}

Sample synth_layers(std::uint64_t seed, std::size_t size, const SynthStyle& style) {
  check_size(size);
  check(style.kind == SynthKind::kLayers, "synth_layers needs kind layers");
  style.validate();
  const std::size_t B = style.band_count;
  if (B > size / 4) {
    throw ConfigError("synth_layers: " + std::to_string(B) + " bands do not fit in " + std::to_string(size) +
                      " rows (at most size/4)");
  }

  nn::Rng rng = nn::Rng(seed).fork(kStructureStream);
  const double S = static_cast<double>(size);
  const double amp = style.waviness * S / (4.0 * static_cast<double>(B));
  const double min_gap = 2.0;

  // bounds[b][x] is the top edge of band b+1 in column x.
  std::vector<std::vector<double>> bounds(B - 1, std::vector<double>(size));
  for (std::size_t b = 0; b + 1 < B; ++b) {
    const double base = S * static_cast<double>(b + 1) / static_cast<double>(B);
    std::array<double, 2> a{}, f{}, ph{};
    for (std::size_t j = 0; j < 2; ++j) {
      a[j] = rng.uniform(0.2, 1.0) / 2.0;
      f[j] = rng.uniform(0.5, 2.0) * static_cast<double>(j + 1);
      ph[j] = rng.uniform(0.0, kTwoPi);
    }
    for (std::size_t x = 0; x < size; ++x) {
      double v = base;
      for (std::size_t j = 0; j < 2; ++j) v += amp * a[j] * std::sin(kTwoPi * f[j] * static_cast<double>(x) / S + ph[j]);
      if (b > 0) v = std::max(v, bounds[b - 1][x] + min_gap);
      bounds[b][x] = std::min(v, S - min_gap * static_cast<double>(B - 1 - b));
    }
  }

  ClassMask mask{size, size, std::vector<std::uint8_t>(size * size, 0)};
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      std::size_t k = 0;
      while (k + 1 < B && bounds[k][x] <= static_cast<double>(y) + 0.5) ++k;
      mask.labels[y * size + x] = static_cast<std::uint8_t>(k);
    }
  }

  nn::Rng look = nn::Rng(nn::mix_seed(seed, style.texture_seed)).fork(kAppearanceStream);
  std::vector<double> level(size * size);
  for (std::size_t p = 0; p < level.size(); ++p) {
    // Alternate bright and dark bands so neighbours always differ.
    const double rel = mask.labels[p] % 2 == 0 ? 0.5 : -0.5;
    const double drift = static_cast<double>(mask.labels[p]) / static_cast<double>(B - 1) - 0.5;
    level[p] = style.background + style.contrast * (rel + 0.5 * drift);
  }
  Sample out;
  out.id = "layers_" + std::to_string(seed);
  out.image = shade(level, size, style, look);
  out.mask = std::move(mask);
  return out;
}

Sample synthesize(std::uint64_t seed, std::size_t size, const SynthStyle& style) {
  return style.kind == SynthKind::kVessel ? synth_vessel(seed, size, style) : synth_layers(seed, size, style);
}

}  // namespace promptseg::data
