#include "promptseg/data/manifest.hpp"

#include <fstream>
#include <sstream>

#include "promptseg/data/io.hpp"
#include "promptseg/error.hpp"

namespace promptseg::data {

namespace fs = std::filesystem;

const std::vector<DatasetManifest::Entry>& DatasetManifest::split(const std::string& which) const {
  if (which == "train") return train;
  if (which == "test") return test;
  throw ConfigError("unknown split '" + which + "' (expected train|test)");
}

void to_json(nlohmann::json& j, const DatasetManifest& m) {
  auto entries = [](const std::vector<DatasetManifest::Entry>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& [img, mask] : v) a.push_back({img, mask});
    return a;
  };
  j = nlohmann::json{{"name", m.name},
                     {"num_classes", m.num_classes},
                     {"class_names", m.class_names},
                     {"train", entries(m.train)},
                     {"test", entries(m.test)}};
}

void from_json(const nlohmann::json& j, DatasetManifest& m) {
  j.at("name").get_to(m.name);
  j.at("num_classes").get_to(m.num_classes);
  j.at("class_names").get_to(m.class_names);
  auto entries = [&](const char* key) {
    std::vector<DatasetManifest::Entry> v;
    if (!j.contains(key)) return v;
    for (const auto& e : j.at(key)) {
      if (!e.is_array() || e.size() != 2) throw FormatError(std::string("manifest: ") + key + " entries must be [image, mask]");
      v.emplace_back(e[0].get<std::string>(), e[1].get<std::string>());
    }
    return v;
  };
  m.train = entries("train");
  m.test = entries("test");
  if (m.num_classes < 2) throw FormatError("manifest: num_classes must be >= 2");
  if (m.class_names.size() != m.num_classes) {
    throw FormatError("manifest: " + std::to_string(m.class_names.size()) + " class names for num_classes " +
                      std::to_string(m.num_classes));
  }
}

DatasetManifest load_manifest(const fs::path& path) {
  if (!fs::exists(path)) throw DataError(DataError::Kind::kMissingFile, "missing file: " + path.string());
  std::ifstream in(path);
  if (!in) throw DataError(DataError::Kind::kIo, "cannot open " + path.string());
  DatasetManifest m;
  try {
    const auto j = nlohmann::json::parse(in);
    m = j.get<DatasetManifest>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest " + path.string() + ": " + e.what());
  }
  m.base_dir = path.parent_path();
  return m;
}

void save_manifest(const DatasetManifest& m, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(DataError::Kind::kIo, "cannot write " + path.string());
  out << nlohmann::json(m).dump(2) << "\n";
  if (!out) throw DataError(DataError::Kind::kIo, "writing " + path.string());
}

std::vector<Sample> load_split(const DatasetManifest& m, const std::string& which) {
  std::vector<Sample> out;
  for (const auto& [img, mask] : m.split(which)) {
    const fs::path ip = fs::path(img).is_absolute() ? fs::path(img) : m.base_dir / img;
    const fs::path mp = fs::path(mask).is_absolute() ? fs::path(mask) : m.base_dir / mask;
    out.push_back(load_sample(ip, mp, m.num_classes));
  }
  return out;
}

}  // namespace promptseg::data
