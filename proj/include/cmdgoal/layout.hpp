#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cmdgoal/geometry.hpp"
#include "cmdgoal/scene.hpp"

namespace cmdgoal {

inline constexpr int kLayoutChannels = 15;
inline constexpr int kRoadChannel0 = 0;  // 0..2: road RGB
inline constexpr int kEgoChannel = 3;
inline constexpr int kReferredChannel = 4;
inline constexpr int kFirstClassChannel = 5;  // 5..14: ObjectClass order

/// Synthetic road color scheme (linear RGB in [0, 1]).
inline constexpr float kRoadSurfaceGray = 0.35f;
inline constexpr float kLaneMarkingGray = 1.0f;

/// Channel-major 15 x H x W layout grid with values in [0, 1].
class LayoutTensor {
 public:
  LayoutTensor() = default;
  LayoutTensor(int height, int width);

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  PixelFrame frame() const { return PixelFrame(width_, height_); }

  float& at(int c, int y, int x) { return data_[(static_cast<std::size_t>(c) * height_ + y) * width_ + x]; }
  float at(int c, int y, int x) const {
    return data_[(static_cast<std::size_t>(c) * height_ + y) * width_ + x];
  }
  const float* channel(int c) const { return data_.data() + static_cast<std::size_t>(c) * height_ * width_; }
  float* channel(int c) { return data_.data() + static_cast<std::size_t>(c) * height_ * width_; }
  const std::vector<float>& data() const noexcept { return data_; }

  friend bool operator==(const LayoutTensor&, const LayoutTensor&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<float> data_;
};

/// Inclusive per-channel RGB range that counts as drivable surface.
struct RoadColorPredicate {
  std::array<float, 3> lo{0.5f * kRoadSurfaceGray, 0.5f * kRoadSurfaceGray, 0.5f * kRoadSurfaceGray};
  std::array<float, 3> hi{1.0f, 1.0f, 1.0f};
  bool operator()(float r, float g, float b) const noexcept {
    return r >= lo[0] && r <= hi[0] && g >= lo[1] && g <= hi[1] && b >= lo[2] && b <= hi[2];
  }
};

struct RasterOptions {
  /// NoRef ablation: keep the referred object in its class channel and leave
  /// channel 4 empty.
  bool no_referred_channel = false;
  /// Samples per pixel axis when drawing procedural roads.
  int road_supersample = 4;
  /// Directory that relative RoadImageFile paths are resolved against.
  std::string base_dir;
};

/// Channel of a detector class (5..14). Throws SchemaError for unknown labels.
int class_channel_index(ObjectClass c) noexcept;
int class_channel_index(std::string_view label);

LayoutTensor rasterize_scene(const SceneRecord& rec, int height, int width,
                             const RasterOptions& opts = {});

/// Drivable-surface mask from the road channels, row-major H x W.
std::vector<std::uint8_t> road_mask(const LayoutTensor& t, const RoadColorPredicate& pred = {});

/// Draws a procedural road into an RGB image of the given size.
RgbImage render_procedural_road(const ProceduralRoad& road, int width, int height,
                                int supersample = 4);

/// Area-averaging resample of an RGB image.
RgbImage resample_area(const RgbImage& src, int width, int height);

/// Writes one channel as an 8-bit grayscale PNG.
void write_channel_png(const LayoutTensor& t, int channel, const std::string& path);

}  // namespace cmdgoal
