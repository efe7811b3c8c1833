#include "promptseg/data/weights.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "json.hpp"
#include "promptseg/error.hpp"

namespace promptseg::data {

namespace fs = std::filesystem;

namespace {

constexpr std::size_t kPrefix = kWeightsMagic.size() + 4;

void put_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32_le(const char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

void put_f32_le(std::string& out, float f) { put_u32_le(out, std::bit_cast<std::uint32_t>(f)); }

float get_f32_le(const char* p) { return std::bit_cast<float>(get_u32_le(p)); }

struct Parsed {
  nlohmann::json header;
  std::size_t blob_offset = 0;
};

Parsed parse(const std::string& bytes) {
  if (bytes.size() < kPrefix || std::memcmp(bytes.data(), kWeightsMagic.data(), kWeightsMagic.size()) != 0) {
    throw FormatError("weights archive: bad magic");
  }
  const std::size_t hlen = get_u32_le(bytes.data() + kWeightsMagic.size());
  if (bytes.size() < kPrefix + hlen) throw FormatError("weights archive: truncated header");
  Parsed p;
  try {
    p.header = nlohmann::json::parse(bytes.begin() + kPrefix, bytes.begin() + static_cast<long>(kPrefix + hlen));
    if (!p.header.is_object() || !p.header.contains("config") || !p.header.contains("tensors")) {
      throw FormatError("weights archive: header lacks config or tensors");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("weights archive: corrupt header: ") + e.what());
  }
  p.blob_offset = kPrefix + hlen;
  return p;
}

}  // namespace

std::string save_weights(const model::SegModel<float>& m) {
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto* p : m.parameters()) {
    const std::size_t nbytes = p->value.numel() * sizeof(float);
    tensors.push_back({{"name", p->name}, {"shape", p->value.shape()}, {"dtype", "f32"}, {"offset", offset},
                       {"nbytes", nbytes}});
    offset += nbytes;
  }
  const nlohmann::json header = {{"format", "promptseg-weights"}, {"version", 1}, {"config", m.config},
                                 {"tensors", tensors}};
  const std::string h = header.dump();
  std::string out(kWeightsMagic.begin(), kWeightsMagic.end());
  put_u32_le(out, static_cast<std::uint32_t>(h.size()));
  out += h;
  out.reserve(out.size() + offset);
  for (const auto* p : m.parameters()) {
    for (float v : p->value.data()) put_f32_le(out, v);
  }
  return out;
}

model::ViTConfig read_weights_config(const std::string& bytes) {
  const auto p = parse(bytes);
  try {
    auto cfg = p.header.at("config").get<model::ViTConfig>();
    cfg.validate();
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("weights archive: bad config: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("weights archive: ") + e.what());
  }
}

model::SegModel<float> load_weights(const std::string& bytes, const model::ViTConfig& config) {
  const auto p = parse(bytes);
  const std::size_t blob = bytes.size() - p.blob_offset;

  struct Entry {
    nn::Shape shape;
    std::size_t offset = 0, nbytes = 0;
  };
  std::map<std::string, Entry> entries;
  try {
    for (const auto& t : p.header.at("tensors")) {
      Entry e;
      const auto name = t.at("name").get<std::string>();
      if (t.at("dtype").get<std::string>() != "f32") throw FormatError("weights archive: tensor '" + name + "' is not f32");
      e.shape = t.at("shape").get<nn::Shape>();
      e.offset = t.at("offset").get<std::size_t>();
      e.nbytes = t.at("nbytes").get<std::size_t>();
      if (e.nbytes != nn::shape_numel(e.shape) * sizeof(float)) {
        throw FormatError("weights archive: tensor '" + name + "' byte length does not match its shape");
      }
      if (e.offset > blob || e.nbytes > blob - e.offset) {
        throw FormatError("weights archive: tensor '" + name + "' runs past the end (truncated blob)");
      }
      if (!entries.emplace(name, std::move(e)).second) {
        throw FormatError("weights archive: duplicate tensor '" + name + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("weights archive: bad tensor table: ") + e.what());
  }

  // Offsets must tile the blob exactly.
  std::map<std::size_t, std::size_t> spans;
  for (const auto& [name, e] : entries) spans[e.offset] = e.nbytes;
  std::size_t cursor = 0;
  for (const auto& [off, len] : spans) {
    if (off != cursor) throw FormatError("weights archive: tensor offsets overlap or leave gaps");
    cursor += len;
  }
  if (cursor != blob) throw FormatError("weights archive: blob length does not match the tensor table");

  auto m = model::init_model<float>(config, 0);
  auto params = m.parameters();
  if (params.size() != entries.size()) {
    throw FormatError("weights archive: holds " + std::to_string(entries.size()) + " tensors, model expects " +
                      std::to_string(params.size()));
  }
  for (auto* param : params) {
    const auto it = entries.find(param->name);
    if (it == entries.end()) throw FormatError("weights archive: missing tensor '" + param->name + "'");
    if (it->second.shape != param->value.shape()) {
      throw FormatError("weights archive: tensor '" + param->name + "' has shape " + nn::shape_str(it->second.shape) +
                        ", model expects " + nn::shape_str(param->value.shape()));
    }
    const char* src = bytes.data() + p.blob_offset + it->second.offset;
    auto dst = param->value.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = get_f32_le(src + 4 * i);
  }
  return m;
}

model::SegModel<float> load_weights(const std::string& bytes) { return load_weights(bytes, read_weights_config(bytes)); }

std::string read_file(const fs::path& path) {
  if (!fs::exists(path)) throw DataError(DataError::Kind::kMissingFile, "missing file: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(DataError::Kind::kIo, "cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(DataError::Kind::kIo, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError(DataError::Kind::kIo, "writing " + path.string());
}

}  // namespace promptseg::data
