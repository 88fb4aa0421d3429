#include "cmdgoal/synthetic.hpp"

#include <algorithm>
#include <cmath>

#include "cmdgoal/error.hpp"
#include "cmdgoal/rng.hpp"

namespace cmdgoal {

namespace {

constexpr double kCameraFocalPx = 1266.0;
constexpr double kImageWidthPx = 1600.0;
constexpr double kImageHeightPx = 900.0;
constexpr double kCameraHeightM = 1.5;
constexpr double kMinObjectSpacingM = 3.0;

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

double class_height(ObjectClass c) {
  switch (c) {
    case ObjectClass::kCar: return 1.6;
    case ObjectClass::kTruck: return 3.2;
    case ObjectClass::kTrailer: return 3.5;
    case ObjectClass::kBus: return 3.3;
    case ObjectClass::kConstructionVehicle: return 3.0;
    case ObjectClass::kBicycle: return 1.2;
    case ObjectClass::kMotorcycle: return 1.3;
    case ObjectClass::kPedestrian: return 1.75;
    case ObjectClass::kTrafficCone: return 0.7;
    case ObjectClass::kBarrier: return 1.0;
  }
  return 1.5;
}

/// Pinhole projection of an object's bounding volume into a 1600x900 frontal image.
AlignedBox2D frontal_projection(const FootprintBox& b) {
  const double x = b.center.x;
  if (x <= 1.0) return {0.0, 0.0, 0.0, 0.0};
  const double half_lat = 0.5 * std::max(b.width, std::abs(std::sin(b.yaw)) * b.length);
  const double uc = 0.5 * kImageWidthPx - kCameraFocalPx * b.center.y / x;
  const double hw = kCameraFocalPx * half_lat / x;
  const double top = 0.5 * kImageHeightPx - kCameraFocalPx * (class_height(b.label) - kCameraHeightM) / x;
  const double bottom = 0.5 * kImageHeightPx + kCameraFocalPx * kCameraHeightM / x;
  AlignedBox2D out{std::clamp(uc - hw, 0.0, kImageWidthPx), std::clamp(top, 0.0, kImageHeightPx),
                   std::clamp(uc + hw, 0.0, kImageWidthPx), std::clamp(bottom, 0.0, kImageHeightPx)};
  return out;
}

double road_heading(const ProceduralRoad& road, double x) {
  return x <= 0.0 ? 0.0 : std::atan(road.curvature * x);
}

std::vector<float> object_features(ObjectClass c, int side, std::size_t dim, double noise, Rng& rng) {
  std::vector<float> f(dim);
  if (dim == 0) return f;
  const auto a = hashed_unit_vector("feature-class:" + std::string(to_string(c)), dim);
  const auto s = hashed_unit_vector(side > 0 ? "feature-side:left" : "feature-side:right", dim);
  const double scale = noise / std::sqrt(static_cast<double>(dim));
  for (std::size_t i = 0; i < dim; ++i) {
    f[i] = static_cast<float>(a[i] + s[i] + scale * rng.normal());
  }
  return f;
}

}  // namespace

void SynthConfig::validate() const {
  CMDGOAL_REQUIRE(num_records > 0, "num_records must be positive");
  CMDGOAL_REQUIRE(min_objects >= 1 && max_objects >= min_objects, "object count range must satisfy 1 <= min <= max");
  CMDGOAL_REQUIRE(sigma_m > 0.0, "sigma_m must be positive");
  CMDGOAL_REQUIRE(mode_a_weight > 0.0 && mode_a_weight < 1.0, "mode_a_weight must lie in (0, 1)");
  CMDGOAL_REQUIRE(referred_min_x < referred_max_x, "referred x range is empty");
  CMDGOAL_REQUIRE(referred_min_x >= kMapMinX && referred_max_x + mode_a_forward_m + 5 * sigma_m <= kMapMaxX,
                  "referred x range lets mode A leave the map");
  CMDGOAL_REQUIRE(curved_fraction >= 0.0 && curved_fraction <= 1.0, "curved_fraction must lie in [0, 1]");
  CMDGOAL_REQUIRE(max_curvature >= 0.0 && max_curvature <= 0.01, "max_curvature must lie in [0, 0.01]");
  CMDGOAL_REQUIRE(min_road_width > 0.0 && max_road_width >= min_road_width, "road width range invalid");
  CMDGOAL_REQUIRE(distractor_prob >= 0.0 && distractor_prob <= 1.0, "distractor_prob must lie in [0, 1]");
  CMDGOAL_REQUIRE(min_destinations >= 1 && max_destinations <= 3 && min_destinations <= max_destinations,
                  "destination count range must lie within [1, 3]");
  CMDGOAL_REQUIRE(feature_noise >= 0.0, "feature_noise must be non-negative");
}

nlohmann::json to_json(const SynthConfig& c) {
  return {{"num_records", c.num_records},
          {"min_objects", c.min_objects},
          {"max_objects", c.max_objects},
          {"sigma_m", c.sigma_m},
          {"mode_a_weight", c.mode_a_weight},
          {"mode_a_forward_m", c.mode_a_forward_m},
          {"mode_a_inward_m", c.mode_a_inward_m},
          {"mode_b_forward_m", c.mode_b_forward_m},
          {"mode_b_lateral_m", c.mode_b_lateral_m},
          {"referred_min_x", c.referred_min_x},
          {"referred_max_x", c.referred_max_x},
          {"curved_fraction", c.curved_fraction},
          {"max_curvature", c.max_curvature},
          {"min_road_width", c.min_road_width},
          {"max_road_width", c.max_road_width},
          {"distractor_prob", c.distractor_prob},
          {"min_destinations", c.min_destinations},
          {"max_destinations", c.max_destinations},
          {"feature_dim", c.feature_dim},
          {"feature_noise", c.feature_noise},
          {"id_prefix", c.id_prefix}};
}

SynthConfig synth_config_from_json(const nlohmann::json& j) {
  SynthConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("num_records", c.num_records);
  get("min_objects", c.min_objects);
  get("max_objects", c.max_objects);
  get("sigma_m", c.sigma_m);
  get("mode_a_weight", c.mode_a_weight);
  get("mode_a_forward_m", c.mode_a_forward_m);
  get("mode_a_inward_m", c.mode_a_inward_m);
  get("mode_b_forward_m", c.mode_b_forward_m);
  get("mode_b_lateral_m", c.mode_b_lateral_m);
  get("referred_min_x", c.referred_min_x);
  get("referred_max_x", c.referred_max_x);
  get("curved_fraction", c.curved_fraction);
  get("max_curvature", c.max_curvature);
  get("min_road_width", c.min_road_width);
  get("max_road_width", c.max_road_width);
  get("distractor_prob", c.distractor_prob);
  get("min_destinations", c.min_destinations);
  get("max_destinations", c.max_destinations);
  get("feature_dim", c.feature_dim);
  get("feature_noise", c.feature_noise);
  get("id_prefix", c.id_prefix);
  return c;
}

std::vector<float> hashed_unit_vector(const std::string& key, std::size_t dim) {
  Rng rng(Rng::splitmix64(fnv1a(key)));
  std::vector<double> v(dim);
  double sq = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    sq += x * x;
  }
  const double inv = sq > 0.0 ? 1.0 / std::sqrt(sq) : 0.0;
  std::vector<float> out(dim);
  for (std::size_t i = 0; i < dim; ++i) out[i] = static_cast<float>(v[i] * inv);
  return out;
}

std::vector<float> encode_command(IntentLabel intent, ObjectClass referred, int side) {
  const auto a = hashed_unit_vector("intent:" + std::string(to_string(intent)), kCommandDim);
  const auto b = hashed_unit_vector("class:" + std::string(to_string(referred)), kCommandDim);
  const auto c = hashed_unit_vector(side > 0 ? "side:left" : "side:right", kCommandDim);
  std::vector<float> out(kCommandDim);
  for (std::size_t i = 0; i < kCommandDim; ++i) out[i] = a[i] + b[i] + c[i];
  return out;
}

std::pair<double, double> class_footprint(ObjectClass c) noexcept {
  switch (c) {
    case ObjectClass::kCar: return {4.5, 1.9};
    case ObjectClass::kTruck: return {8.0, 2.5};
    case ObjectClass::kTrailer: return {10.0, 2.5};
    case ObjectClass::kBus: return {11.0, 2.9};
    case ObjectClass::kConstructionVehicle: return {6.0, 2.8};
    case ObjectClass::kBicycle: return {1.8, 0.6};
    case ObjectClass::kMotorcycle: return {2.1, 0.8};
    case ObjectClass::kPedestrian: return {0.7, 0.7};
    case ObjectClass::kTrafficCone: return {0.4, 0.4};
    case ObjectClass::kBarrier: return {2.0, 0.5};
  }
  return {1.0, 1.0};
}

SyntheticData gen_synthetic_dataset(const SynthConfig& cfg, std::uint64_t seed, SplitName name) {
  cfg.validate();
  SyntheticData out;
  out.split.name = name;
  Rng master(seed);
  for (std::size_t n = 0; n < cfg.num_records; ++n) {
    Rng rng = master.fork(n);
    SceneRecord rec;
    rec.id = cfg.id_prefix + "-" + std::to_string(seed) + "-" + std::to_string(n);

    ProceduralRoad road;
    road.width_m = rng.uniform(cfg.min_road_width, cfg.max_road_width);
    road.center_offset_m = 0.25 * road.width_m;
    road.curvature = rng.bernoulli(cfg.curved_fraction) ? rng.uniform(-cfg.max_curvature, cfg.max_curvature) : 0.0;
    rec.road = road;
    rec.ego_box = {{0.0, 0.0}, 4.5, 1.9, 0.0, ObjectClass::kCar};

    const int side = rng.bernoulli(0.5) ? 1 : -1;
    const auto ref_class = static_cast<ObjectClass>(rng.below(kNumObjectClasses));
    const int total = cfg.min_objects + static_cast<int>(rng.below(cfg.max_objects - cfg.min_objects + 1));

    auto roadside_box = [&](ObjectClass c, double x, int s) {
      const auto [len, wid] = class_footprint(c);
      const double d = 0.5 * road.width_m + 0.5 + 0.5 * wid + rng.uniform(0.0, 3.0);
      return FootprintBox{{x, road.centerline_y(x) + s * d}, len, wid, road_heading(road, x), c};
    };
    auto far_enough = [&](EgoPoint p) {
      if (std::hypot(p.x, p.y) < 2 * kMinObjectSpacingM) return false;
      for (const auto& o : rec.objects) {
        if (std::hypot(o.box.center.x - p.x, o.box.center.y - p.y) < kMinObjectSpacingM) return false;
      }
      return true;
    };
    auto add_object = [&](const FootprintBox& b, int s) {
      SceneObject o;
      o.box = b;
      o.frontal_box = frontal_projection(b);
      o.features = object_features(b.label, s, cfg.feature_dim, cfg.feature_noise, rng);
      rec.objects.push_back(std::move(o));
    };

    // Referred object first; its index is shuffled below.
    const double ref_x = rng.uniform(cfg.referred_min_x, cfg.referred_max_x);
    add_object(roadside_box(ref_class, ref_x, side), side);

    int distractors = 0;
    if (total > 1 && rng.bernoulli(cfg.distractor_prob)) {
      distractors = std::min<int>(total - 1, 1 + static_cast<int>(rng.below(2)));
    }
    for (int tries = 0; static_cast<int>(rec.objects.size()) < 1 + distractors && tries < 200; ++tries) {
      const double x = rng.uniform(cfg.referred_min_x, cfg.referred_max_x);
      if (std::abs(x - ref_x) < 8.0) continue;
      const auto b = roadside_box(ref_class, x, side);
      if (far_enough(b.center)) add_object(b, side);
    }
    for (int tries = 0; static_cast<int>(rec.objects.size()) < total && tries < 400; ++tries) {
      const auto c = static_cast<ObjectClass>(rng.below(kNumObjectClasses));
      const double x = rng.uniform(-5.0, 100.0);
      const int s = rng.bernoulli(0.5) ? 1 : -1;
      const auto b = roadside_box(c, x, s);
      if (std::abs(b.center.y) < kMapMaxY - 2.0 && far_enough(b.center)) add_object(b, s);
    }

    // Random slot for the referred object.
    const std::size_t slot = rng.below(rec.objects.size());
    std::swap(rec.objects[0], rec.objects[slot]);
    rec.referred_index = slot;
    const auto& ref = rec.objects[slot];

    rec.intent = static_cast<IntentLabel>(rng.below(kNumIntents));
    rec.command_embedding = encode_command(rec.intent, ref_class, side);
    AlignedBox2D gt = ref.frontal_box;
    const double jitter = 0.03 * (gt.x1 - gt.x0);
    gt.x0 += rng.uniform(-jitter, jitter);
    gt.x1 += rng.uniform(-jitter, jitter);
    if (gt.x1 < gt.x0) std::swap(gt.x0, gt.x1);
    rec.gt_referred_frontal_box = gt;

    const EgoPoint mode_a{ref.box.center.x + cfg.mode_a_forward_m, ref.box.center.y - side * cfg.mode_a_inward_m};
    const EgoPoint mode_b{cfg.mode_b_forward_m, side * cfg.mode_b_lateral_m};
    Mixture2D truth({{mode_a, DiagScale{cfg.sigma_m, cfg.sigma_m}, std::log(cfg.mode_a_weight)},
                     {mode_b, DiagScale{cfg.sigma_m, cfg.sigma_m}, std::log(1.0 - cfg.mode_a_weight)}});
    const int n_dest = cfg.min_destinations + static_cast<int>(rng.below(cfg.max_destinations - cfg.min_destinations + 1));
    while (static_cast<int>(rec.destinations.size()) < n_dest) {
      const EgoPoint d = sample(truth, 1, rng).front();
      if (inside_map(d)) rec.destinations.push_back(d);
    }
    validate(rec);
    out.split.records.push_back(std::move(rec));
    out.truth.mixtures.push_back(std::move(truth));
  }
  return out;
}

}  // namespace cmdgoal
