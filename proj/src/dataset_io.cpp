#include "cmdgoal/dataset_io.hpp"

#include <bit>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

#include "cmdgoal/error.hpp"
#include "cmdgoal/log.hpp"
#include "cmdgoal/png_io.hpp"

namespace cmdgoal {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json box_to_json(const FootprintBox& b) {
  return {{"x", b.center.x},   {"y", b.center.y}, {"length", b.length},
          {"width", b.width},  {"yaw", b.yaw},    {"class", std::string(to_string(b.label))}};
}

FootprintBox box_from_json(const json& j) {
  FootprintBox b;
  b.center = {j.at("x").get<double>(), j.at("y").get<double>()};
  b.length = j.at("length").get<double>();
  b.width = j.at("width").get<double>();
  b.yaw = j.value("yaw", 0.0);
  b.label = parse_object_class(j.at("class").get<std::string>());
  return b;
}

json aligned_to_json(const AlignedBox2D& b) { return json::array({b.x0, b.y0, b.x1, b.y1}); }

AlignedBox2D aligned_from_json(const json& j) {
  const auto v = j.get<std::vector<double>>();
  if (v.size() != 4) throw SchemaError("aligned box needs 4 numbers");
  AlignedBox2D b{v[0], v[1], v[2], v[3]};
  if (b.x1 < b.x0 || b.y1 < b.y0) throw SchemaError("aligned box has x1 < x0 or y1 < y0");
  return b;
}

std::string resolve(const std::string& base, const std::string& p) {
  fs::path path(p);
  if (path.is_relative() && !base.empty()) path = fs::path(base) / path;
  return path.string();
}

std::string split_file(const std::string& dir, SplitName split) {
  return (fs::path(dir) / (std::string(to_string(split)) + ".jsonl")).string();
}

}  // namespace

void write_f32(const std::string& path, const std::vector<float>& values) {
  std::vector<char> bytes(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(values[i]);
    for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<char>((u >> (8 * b)) & 0xff);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for '" + path + "'");
}

std::vector<float> read_f32(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "'");
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() % 4 != 0) throw SchemaError("'" + path + "' is not a float32 array");
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(bytes[i * 4 + b]) << (8 * b);
    out[i] = std::bit_cast<float>(u);
  }
  return out;
}

json record_to_json(const SceneRecord& rec, const std::string& feature_path, const std::string& road_path) {
  json j;
  j["id"] = rec.id;
  if (const auto* pr = std::get_if<ProceduralRoad>(&rec.road)) {
    j["road"] = {{"procedural",
                  {{"width_m", pr->width_m}, {"center_offset_m", pr->center_offset_m}, {"curvature", pr->curvature}}}};
  } else if (const auto* file = std::get_if<RoadImageFile>(&rec.road)) {
    j["road"] = {{"png", file->path}};
  } else {
    if (road_path.empty()) throw InvalidArgument("in-memory road image needs a side-car path");
    j["road"] = {{"png", road_path}};
  }
  j["ego"] = box_to_json(rec.ego_box);
  j["objects"] = json::array();
  const bool inline_features = feature_path.empty();
  for (const auto& o : rec.objects) {
    json oj = box_to_json(o.box);
    oj["frontal_box"] = aligned_to_json(o.frontal_box);
    if (inline_features && !o.features.empty()) oj["features"] = o.features;
    j["objects"].push_back(std::move(oj));
  }
  if (!inline_features && !rec.objects.empty()) {
    j["object_features"] = {{"path", feature_path}, {"dim", rec.objects.front().features.size()}};
  }
  j["referred_index"] = rec.referred_index ? json(*rec.referred_index) : json(nullptr);
  j["command_embedding"] = rec.command_embedding;
  j["destinations"] = json::array();
  for (const auto& d : rec.destinations) j["destinations"].push_back({d.x, d.y});
  j["intent"] = std::string(to_string(rec.intent));
  j["gt_referred_frontal_box"] =
      rec.gt_referred_frontal_box ? aligned_to_json(*rec.gt_referred_frontal_box) : json(nullptr);
  return j;
}

SceneRecord record_from_json(const json& j, const std::string& base_dir, bool load_features) {
  SceneRecord rec;
  try {
    rec.id = j.at("id").get<std::string>();
    const auto& road = j.at("road");
    if (road.contains("procedural")) {
      const auto& p = road.at("procedural");
      rec.road = ProceduralRoad{p.at("width_m").get<double>(), p.value("center_offset_m", 0.0),
                                p.value("curvature", 0.0)};
    } else if (road.contains("png")) {
      rec.road = RoadImageFile{resolve(base_dir, road.at("png").get<std::string>())};
    } else {
      throw SchemaError("road needs 'procedural' or 'png'");
    }
    rec.ego_box = box_from_json(j.at("ego"));
    for (const auto& oj : j.at("objects")) {
      SceneObject o;
      o.box = box_from_json(oj);
      if (oj.contains("frontal_box") && !oj.at("frontal_box").is_null()) {
        o.frontal_box = aligned_from_json(oj.at("frontal_box"));
      }
      if (load_features && oj.contains("features")) o.features = oj.at("features").get<std::vector<float>>();
      rec.objects.push_back(std::move(o));
    }
    if (load_features && j.contains("object_features") && !j.at("object_features").is_null()) {
      const auto& fj = j.at("object_features");
      const auto dim = fj.at("dim").get<std::size_t>();
      const auto flat = read_f32(resolve(base_dir, fj.at("path").get<std::string>()));
      if (dim == 0 || flat.size() != dim * rec.objects.size()) {
        throw SchemaError("feature side-car has " + std::to_string(flat.size()) + " values, expected " +
                          std::to_string(dim * rec.objects.size()));
      }
      for (std::size_t i = 0; i < rec.objects.size(); ++i) {
        rec.objects[i].features.assign(flat.begin() + static_cast<std::ptrdiff_t>(i * dim),
                                       flat.begin() + static_cast<std::ptrdiff_t>((i + 1) * dim));
      }
    }
    if (j.contains("referred_index") && !j.at("referred_index").is_null()) {
      rec.referred_index = j.at("referred_index").get<std::size_t>();
    }
    rec.command_embedding = j.at("command_embedding").get<std::vector<float>>();
    for (const auto& d : j.at("destinations")) {
      const auto v = d.get<std::vector<double>>();
      if (v.size() != 2) throw SchemaError("destination needs 2 coordinates");
      rec.destinations.push_back({v[0], v[1]});
    }
    rec.intent = parse_intent(j.at("intent").get<std::string>());
    if (j.contains("gt_referred_frontal_box") && !j.at("gt_referred_frontal_box").is_null()) {
      rec.gt_referred_frontal_box = aligned_from_json(j.at("gt_referred_frontal_box"));
    }
  } catch (const Error&) {
    throw;
  } catch (const json::exception& e) {
    throw SchemaError(e.what());
  }
  validate(rec);
  return rec;
}

DatasetSplit load_dataset(const std::string& dir, SplitName split, const LoadOptions& opts, LoadReport* report) {
  const std::string path = split_file(dir, split);
  std::ifstream f(path);
  if (!f) throw IoError("missing dataset file '" + path + "'");
  DatasetSplit out{split, {}};
  LoadReport local;
  std::set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      json j;
      try {
        j = json::parse(line);
      } catch (const json::exception& e) {
        throw SchemaError(std::string("malformed JSON: ") + e.what());
      }
      SceneRecord rec = record_from_json(j, dir, opts.load_features);
      if (!ids.insert(rec.id).second) throw SchemaError("duplicate record id '" + rec.id + "'");
      out.records.push_back(std::move(rec));
    } catch (const Error& e) {
      const std::string msg = path + ":" + std::to_string(lineno) + ": " + e.what();
      if (!opts.skip_invalid) throw SchemaError(msg);
      ++local.skipped;
      local.warnings.push_back(msg);
      log_warn("skipping " + msg);
    }
  }
  local.loaded = out.records.size();
  if (out.records.empty()) {
    local.warnings.push_back(path + ": split is empty");
    log_warn(path + ": split is empty");
  }
  log_info("loaded " + std::to_string(local.loaded) + " records from " + path);
  if (report) *report = std::move(local);
  return out;
}

void write_dataset(const DatasetSplit& split, const std::string& dir) {
  fs::create_directories(dir);
  const std::string path = split_file(dir, split.name);
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  for (const auto& rec : split.records) {
    validate(rec);
    std::string feature_rel;
    if (!rec.objects.empty() && !rec.objects.front().features.empty()) {
      feature_rel = "features/" + rec.id + ".f32";
      fs::create_directories(fs::path(dir) / "features");
      std::vector<float> flat;
      for (const auto& o : rec.objects) flat.insert(flat.end(), o.features.begin(), o.features.end());
      write_f32((fs::path(dir) / feature_rel).string(), flat);
    }
    std::string road_rel;
    if (const auto* img = std::get_if<RgbImage>(&rec.road)) {
      road_rel = "roads/" + rec.id + ".png";
      fs::create_directories(fs::path(dir) / "roads");
      write_png_rgb((fs::path(dir) / road_rel).string(), *img);
    }
    f << record_to_json(rec, feature_rel, road_rel).dump() << '\n';
  }
  if (!f) throw IoError("write failed for '" + path + "'");
}

}  // namespace cmdgoal
