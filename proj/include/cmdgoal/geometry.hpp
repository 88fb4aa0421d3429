#pragma once

#include <array>
#include <string>
#include <string_view>

namespace cmdgoal {

/// Top-down map extent in the ego frame (meters). The ego sits 7 m from the
/// left image border, vertically centered, facing right.
inline constexpr double kMapMinX = -7.0;
inline constexpr double kMapMaxX = 113.0;
inline constexpr double kMapMinY = -40.0;
inline constexpr double kMapMaxY = 40.0;
inline constexpr double kMapLengthM = kMapMaxX - kMapMinX;  // 120
inline constexpr double kMapWidthM = kMapMaxY - kMapMinY;   // 80

/// Point in the ego-centric frame: x forward, y to the ego's left (meters).
struct EgoPoint {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const EgoPoint&, const EgoPoint&) = default;
};

/// Continuous pixel coordinate: u rightward, v downward. Pixel (i, j) covers
/// [i, i+1) x [j, j+1); its center is (i + 0.5, j + 0.5).
struct PixelPoint {
  double u = 0.0;
  double v = 0.0;
  friend bool operator==(const PixelPoint&, const PixelPoint&) = default;
};

bool inside_map(EgoPoint p) noexcept;

/// Top-down image dimensions covering the full map extent.
class PixelFrame {
 public:
  /// Throws InvalidArgument on non-positive dims or unequal per-axis scale.
  PixelFrame(int width, int height);

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  /// Pixels per meter.
  double scale() const noexcept { return scale_; }

  friend bool operator==(const PixelFrame&, const PixelFrame&) = default;

 private:
  int width_;
  int height_;
  double scale_;
};

PixelPoint ego_to_pixel(EgoPoint p, const PixelFrame& frame) noexcept;
EgoPoint pixel_to_ego(PixelPoint q, const PixelFrame& frame) noexcept;

/// The ten detector classes, in layout channel order.
enum class ObjectClass {
  kCar,
  kTruck,
  kTrailer,
  kBus,
  kConstructionVehicle,
  kBicycle,
  kMotorcycle,
  kPedestrian,
  kTrafficCone,
  kBarrier,
};
inline constexpr int kNumObjectClasses = 10;

std::string_view to_string(ObjectClass c) noexcept;
/// Throws SchemaError for labels outside the closed set.
ObjectClass parse_object_class(std::string_view label);

/// Yaw-rotated rectangle on the ground plane.
struct FootprintBox {
  EgoPoint center;
  double length = 0.0;  // along heading
  double width = 0.0;
  double yaw = 0.0;  // radians, (-pi, pi]
  ObjectClass label = ObjectClass::kCar;
};

/// Throws InvalidArgument unless length > 0, width > 0 and yaw in (-pi, pi].
void validate(const FootprintBox& b);

/// Corners in counter-clockwise order (in the x-forward / y-left frame).
std::array<EgoPoint, 4> footprint_to_polygon(const FootprintBox& b);

/// Axis-aligned box; units are whatever the caller uses consistently.
struct AlignedBox2D {
  double x0 = 0.0;
  double y0 = 0.0;
  double x1 = 0.0;
  double y1 = 0.0;
  double area() const noexcept { return (x1 - x0) * (y1 - y0); }
  friend bool operator==(const AlignedBox2D&, const AlignedBox2D&) = default;
};

/// Intersection over union. Disjoint or zero-area boxes give 0.
/// Throws InvalidArgument when x1 < x0 or y1 < y0.
double iou_2d(const AlignedBox2D& a, const AlignedBox2D& b);

}  // namespace cmdgoal
