#include "promptseg/data/io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "promptseg/error.hpp"

namespace promptseg::data {

namespace fs = std::filesystem;

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_fail(png_structp png, png_const_charp msg) {
  // Copy the message into the jump target's buffer before unwinding libpng.
  auto* buf = static_cast<std::string*>(png_get_error_ptr(png));
  if (buf) *buf = msg;
  png_longjmp(png, 1);
}

void png_warn(png_structp, png_const_charp) {}

struct Decoded {
  std::size_t width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> pixels;  // row-major, interleaved
};

enum class Want { kRgb, kGrayIndex };

Decoded decode(const fs::path& path, Want want) {
  if (!fs::exists(path)) throw DataError(DataError::Kind::kMissingFile, "missing file: " + path.string());
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw DataError(DataError::Kind::kIo, "cannot open " + path.string());

  png_byte sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw DataError(DataError::Kind::kFormat, "not a PNG file: " + path.string());
  }

  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_fail, png_warn);
  if (!png) throw DataError(DataError::Kind::kIo, "libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw DataError(DataError::Kind::kIo, "libpng init failed");
  }

  Decoded out;
  std::vector<png_bytep> rows;
  std::string reject;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError(DataError::Kind::kFormat, "corrupt PNG " + path.string() + ": " + err);
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  const int bit_depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (want == Want::kGrayIndex) {
    if (color != PNG_COLOR_TYPE_GRAY || bit_depth != 8) reject = "mask must be single-channel 8-bit";
  } else {
    if (bit_depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
      if (bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
      png_set_gray_to_rgb(png);
    }
    png_set_strip_alpha(png);
  }
  if (reject.empty()) {
    png_read_update_info(png, info);
    out.width = png_get_image_width(png, info);
    out.height = png_get_image_height(png, info);
    out.channels = png_get_channels(png, info);
    const std::size_t stride = png_get_rowbytes(png, info);
    out.pixels.resize(stride * out.height);
    rows.resize(out.height);
    for (std::size_t y = 0; y < out.height; ++y) rows[y] = out.pixels.data() + y * stride;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
  }
  png_destroy_read_struct(&png, &info, nullptr);
  if (!reject.empty()) throw DataError(DataError::Kind::kFormat, reject + ": " + path.string());
  return out;
}

void encode(const fs::path& path, std::size_t width, std::size_t height, int color_type,
            const std::vector<std::uint8_t>& pixels, std::size_t channels) {
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw DataError(DataError::Kind::kIo, "cannot write " + path.string());
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_fail, png_warn);
  if (!png) throw DataError(DataError::Kind::kIo, "libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw DataError(DataError::Kind::kIo, "libpng init failed");
  }
  std::vector<png_bytep> rows(height);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError(DataError::Kind::kIo, "writing " + path.string() + ": " + err);
  }
  png_init_io(png, f.get());
  png_set_compression_level(png, 6);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < height; ++y) {
    rows[y] = const_cast<png_bytep>(pixels.data() + y * width * channels);
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fflush(f.get()) != 0) throw DataError(DataError::Kind::kIo, "writing " + path.string());
}

std::uint8_t to_byte(float v) {
  const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

void check_image(const nn::Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError("image must be [3,H,W], got " + nn::shape_str(image.shape()));
  }
}

}  // namespace

nn::Tensor load_image(const fs::path& path) {
  const auto d = decode(path, Want::kRgb);
  const std::size_t H = d.height, W = d.width, P = H * W;
  nn::Tensor img({3, H, W});
  auto out = img.data();
  for (std::size_t p = 0; p < P; ++p) {
    for (std::size_t c = 0; c < 3; ++c) out[c * P + p] = static_cast<float>(d.pixels[p * 3 + c]) / 255.0f;
  }
  return img;
}

ClassMask load_mask(const fs::path& path) {
  auto d = decode(path, Want::kGrayIndex);
  return ClassMask{d.height, d.width, std::move(d.pixels)};
}

Sample load_sample(const fs::path& image_path, const fs::path& mask_path, std::size_t num_classes) {
  Sample s;
  s.id = image_path.stem().string();
  s.image = load_image(image_path);
  s.mask = load_mask(mask_path);
  if (s.mask.height != s.image.dim(1) || s.mask.width != s.image.dim(2)) {
    throw DataError(DataError::Kind::kSizeMismatch,
                    "size mismatch: image " + image_path.string() + " is " + std::to_string(s.image.dim(2)) + "x" +
                        std::to_string(s.image.dim(1)) + ", mask " + mask_path.string() + " is " +
                        std::to_string(s.mask.width) + "x" + std::to_string(s.mask.height));
  }
  for (auto v : s.mask.labels) {
    if (v >= num_classes) {
      throw DataError(DataError::Kind::kClassRange, "class out of range: mask " + mask_path.string() +
                                                        " contains " + std::to_string(v) + " with num_classes " +
                                                        std::to_string(num_classes));
    }
  }
  return s;
}

void save_image(const nn::Tensor& image, const fs::path& path) {
  check_image(image);
  const std::size_t H = image.dim(1), W = image.dim(2), P = H * W;
  std::vector<std::uint8_t> px(P * 3);
  const auto in = image.data();
  for (std::size_t p = 0; p < P; ++p) {
    for (std::size_t c = 0; c < 3; ++c) px[p * 3 + c] = to_byte(in[c * P + p]);
  }
  encode(path, W, H, PNG_COLOR_TYPE_RGB, px, 3);
}

void save_prediction(const ClassMask& mask, const fs::path& path) {
  if (mask.labels.size() != mask.height * mask.width) throw ShapeError("mask label count does not match its size");
  encode(path, mask.width, mask.height, PNG_COLOR_TYPE_GRAY, mask.labels, 1);
}

std::array<std::uint8_t, 3> palette_color(std::size_t k) {
  static constexpr std::array<std::array<std::uint8_t, 3>, 8> kPalette{{{0, 0, 0},
                                                                        {255, 64, 64},
                                                                        {64, 200, 64},
                                                                        {64, 96, 255},
                                                                        {255, 200, 0},
                                                                        {200, 64, 255},
                                                                        {0, 220, 220},
                                                                        {255, 128, 0}}};
  return kPalette[k % kPalette.size()];
}

void save_overlay(const nn::Tensor& image, const ClassMask& mask, const fs::path& path, double alpha) {
  check_image(image);
  const std::size_t H = image.dim(1), W = image.dim(2), P = H * W;
  if (mask.height != H || mask.width != W) {
    throw DataError(DataError::Kind::kSizeMismatch, "overlay: mask size does not match image");
  }
  std::vector<std::uint8_t> px(P * 3);
  const auto in = image.data();
  for (std::size_t p = 0; p < P; ++p) {
    const auto k = mask.labels[p];
    const auto col = palette_color(k);
    for (std::size_t c = 0; c < 3; ++c) {
      const double base = std::clamp(static_cast<double>(in[c * P + p]), 0.0, 1.0) * 255.0;
      const double v = k == 0 ? base : (1.0 - alpha) * base + alpha * col[c];
      px[p * 3 + c] = static_cast<std::uint8_t>(std::lround(v));
    }
  }
  encode(path, W, H, PNG_COLOR_TYPE_RGB, px, 3);
}

}  // namespace promptseg::data
