#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "cmdgoal/scene.hpp"

namespace cmdgoal {

struct LoadOptions {
  /// Read per-object feature side-cars (needed for grounding only).
  bool load_features = true;
  /// Skip malformed lines (logged with line numbers) instead of failing.
  bool skip_invalid = false;
};

struct LoadReport {
  std::size_t loaded = 0;
  std::size_t skipped = 0;
  std::vector<std::string> warnings;
};

/// Reads `<dir>/<split>.jsonl`. Relative side-car paths (road PNGs, feature
/// arrays) resolve against `dir`. Schema violations raise SchemaError naming
/// the line; duplicate ids are rejected.
DatasetSplit load_dataset(const std::string& dir, SplitName split, const LoadOptions& opts = {},
                          LoadReport* report = nullptr);

/// Writes `<dir>/<split>.jsonl` plus `<dir>/features/<id>.f32` side-cars for
/// records that carry object features. In-memory road images are written to
/// `<dir>/roads/<id>.png`.
void write_dataset(const DatasetSplit& split, const std::string& dir);

/// One record <-> one JSON object (the JSON-Lines adapter). `feature_path`
/// is the side-car the record's features are stored in (empty = inline).
nlohmann::json record_to_json(const SceneRecord& rec, const std::string& feature_path = {},
                              const std::string& road_path = {});
SceneRecord record_from_json(const nlohmann::json& j, const std::string& base_dir, bool load_features);

/// Little-endian float32 arrays.
void write_f32(const std::string& path, const std::vector<float>& values);
std::vector<float> read_f32(const std::string& path);

}  // namespace cmdgoal
