#include "cmdgoal/geometry.hpp"

#include <array>
#include <cmath>
#include <numbers>

#include "cmdgoal/error.hpp"

namespace cmdgoal {

bool inside_map(EgoPoint p) noexcept {
  return p.x >= kMapMinX && p.x <= kMapMaxX && p.y >= kMapMinY && p.y <= kMapMaxY;
}

PixelFrame::PixelFrame(int width, int height) : width_(width), height_(height) {
  if (width <= 0 || height <= 0) {
    throw InvalidArgument("pixel frame dims must be positive, got " + std::to_string(width) +
                          "x" + std::to_string(height));
  }
  // width/120 == height/80  <=>  2*width == 3*height
  if (2LL * width != 3LL * height) {
    throw InvalidArgument("pixel frame " + std::to_string(width) + "x" + std::to_string(height) +
                          " does not have a 3:2 aspect (unequal axis scales)");
  }
  scale_ = width / kMapLengthM;
}

PixelPoint ego_to_pixel(EgoPoint p, const PixelFrame& frame) noexcept {
  const double s = frame.scale();
  return {(p.x - kMapMinX) * s, frame.height() * 0.5 - p.y * s};
}

EgoPoint pixel_to_ego(PixelPoint q, const PixelFrame& frame) noexcept {
  const double s = frame.scale();
  return {q.u / s + kMapMinX, (frame.height() * 0.5 - q.v) / s};
}

namespace {
constexpr std::array<std::string_view, kNumObjectClasses> kClassNames = {
    "car",        "truck",      "trailer",    "bus",          "construction_vehicle",
    "bicycle",    "motorcycle", "pedestrian", "traffic_cone", "barrier",
};
}  // namespace

std::string_view to_string(ObjectClass c) noexcept { return kClassNames[static_cast<int>(c)]; }

ObjectClass parse_object_class(std::string_view label) {
  for (int i = 0; i < kNumObjectClasses; ++i) {
    if (kClassNames[i] == label) return static_cast<ObjectClass>(i);
  }
  throw SchemaError("unknown object class '" + std::string(label) + "'");
}

void validate(const FootprintBox& b) {
  if (!(b.length > 0.0) || !(b.width > 0.0)) {
    throw InvalidArgument("footprint length and width must be positive");
  }
  if (!(b.yaw > -std::numbers::pi && b.yaw <= std::numbers::pi)) {
    throw InvalidArgument("footprint yaw must lie in (-pi, pi]");
  }
}

std::array<EgoPoint, 4> footprint_to_polygon(const FootprintBox& b) {
  validate(b);
  const double c = std::cos(b.yaw);
  const double s = std::sin(b.yaw);
  const double hl = b.length * 0.5;
  const double hw = b.width * 0.5;
  // Local corners, counter-clockwise: rear-right, front-right, front-left, rear-left.
  constexpr std::array<std::array<double, 2>, 4> kSigns = {{{-1, -1}, {1, -1}, {1, 1}, {-1, 1}}};
  std::array<EgoPoint, 4> out;
  for (int i = 0; i < 4; ++i) {
    const double lx = kSigns[i][0] * hl;
    const double ly = kSigns[i][1] * hw;
    out[i] = {b.center.x + c * lx - s * ly, b.center.y + s * lx + c * ly};
  }
  return out;
}

double iou_2d(const AlignedBox2D& a, const AlignedBox2D& b) {
  if (a.x1 < a.x0 || a.y1 < a.y0 || b.x1 < b.x0 || b.y1 < b.y0) {
    throw InvalidArgument("malformed box: expected x1 >= x0 and y1 >= y0");
  }
  const double iw = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double ih = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  // Ordered sum keeps the result symmetric even under FMA contraction.
  const double sa = a.area();
  const double sb = b.area();
  const double uni = (std::min(sa, sb) + std::max(sa, sb)) - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

}  // namespace cmdgoal
