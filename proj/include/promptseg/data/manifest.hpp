#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "promptseg/data/sample.hpp"

namespace promptseg::data {

// Paths are stored as written in the file, relative to the manifest's
// directory unless absolute.
struct DatasetManifest {
  using Entry = std::pair<std::string, std::string>;  // image, mask

  std::string name;
  std::size_t num_classes = 2;
  std::vector<std::string> class_names;
  std::vector<Entry> train;
  std::vector<Entry> test;
  std::filesystem::path base_dir;  // not serialized

  const std::vector<Entry>& split(const std::string& which) const;
};

void to_json(nlohmann::json& j, const DatasetManifest& m);
void from_json(const nlohmann::json& j, DatasetManifest& m);

// FormatError for malformed JSON or fields, DataError(kMissingFile) when the
// manifest itself is missing.
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);

// Loads every entry of a split ("train" or "test").
std::vector<Sample> load_split(const DatasetManifest& m, const std::string& which);

}  // namespace promptseg::data
