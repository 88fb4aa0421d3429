#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "cmdgoal/geometry.hpp"

namespace cmdgoal {

inline constexpr std::size_t kCommandDim = 768;
inline constexpr std::size_t kDefaultObjectFeatureDim = 1538;
inline constexpr std::size_t kMaxDestinations = 3;

/// Command intent categories used for per-intent metric breakdowns.
enum class IntentLabel {
  kTurnLeft,
  kTurnRight,
  kChangeLaneLeft,
  kChangeLaneRight,
  kUTurnLeft,
  kUTurnRight,
  kPark,
  kStop,
  kPickUp,
  kContinue,
  kOvertake,
  kDropOff,
  kFollow,
  kSlowDown,
  kWait,
  kApproach,
  kMoveAway,
  kOther,
};
inline constexpr int kNumIntents = 18;

std::string_view to_string(IntentLabel i) noexcept;
/// Throws SchemaError for unknown labels.
IntentLabel parse_intent(std::string_view label);

/// Procedurally drawn road. The centerline is y_c(x) = center_offset for
/// x <= 0 and center_offset + curvature * x^2 / 2 beyond; the drivable
/// surface is |y - y_c(x)| <= width / 2.
struct ProceduralRoad {
  double width_m = 8.0;
  double center_offset_m = 0.0;
  double curvature = 0.0;  // 1/m; 0 for a straight road

  double centerline_y(double x) const noexcept {
    return x <= 0.0 ? center_offset_m : center_offset_m + 0.5 * curvature * x * x;
  }
};

/// 8-bit RGB image, row-major, 3 bytes per pixel.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;
};

/// PNG on disk, loaded lazily at rasterization time.
struct RoadImageFile {
  std::string path;
};

using RoadSource = std::variant<ProceduralRoad, RgbImage, RoadImageFile>;

struct SceneObject {
  FootprintBox box;
  AlignedBox2D frontal_box;     // frontal-camera pixels
  std::vector<float> features;  // detector features; may be empty when unused
};

struct SceneRecord {
  std::string id;
  RoadSource road;
  FootprintBox ego_box;
  std::vector<SceneObject> objects;
  std::optional<std::size_t> referred_index;
  std::vector<float> command_embedding;
  std::vector<EgoPoint> destinations;
  IntentLabel intent = IntentLabel::kOther;
  std::optional<AlignedBox2D> gt_referred_frontal_box;

  const SceneObject* referred() const {
    return referred_index ? &objects.at(*referred_index) : nullptr;
  }
};

/// Checks every record invariant; throws SchemaError with the offending field.
void validate(const SceneRecord& rec);

enum class SplitName { kTrain, kVal, kTest };
std::string_view to_string(SplitName s) noexcept;
SplitName parse_split(std::string_view name);

struct DatasetSplit {
  SplitName name = SplitName::kTrain;
  std::vector<SceneRecord> records;
};

}  // namespace cmdgoal
