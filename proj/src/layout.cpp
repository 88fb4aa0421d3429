#include "cmdgoal/layout.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "cmdgoal/error.hpp"
#include "cmdgoal/png_io.hpp"

namespace cmdgoal {

LayoutTensor::LayoutTensor(int height, int width)
    : height_(height), width_(width),
      data_(static_cast<std::size_t>(kLayoutChannels) * height * width, 0.0f) {}

int class_channel_index(ObjectClass c) noexcept { return kFirstClassChannel + static_cast<int>(c); }

int class_channel_index(std::string_view label) {
  return class_channel_index(parse_object_class(label));
}

namespace {

constexpr double kMarkingHalfWidthM = 0.15;
constexpr double kDashPeriodM = 6.0;

float procedural_gray(const ProceduralRoad& road, double x, double y) {
  const double d = std::abs(y - road.centerline_y(x));
  if (d > 0.5 * road.width_m) return 0.0f;
  if (d <= kMarkingHalfWidthM && std::fmod(x - kMapMinX, kDashPeriodM) < 0.5 * kDashPeriodM) {
    return kLaneMarkingGray;
  }
  return kRoadSurfaceGray;
}

/// Gray level per pixel, averaged over ss x ss sub-samples.
std::vector<float> procedural_plane(const ProceduralRoad& road, int width, int height, int ss) {
  const PixelFrame frame(width, height);
  std::vector<float> out(static_cast<std::size_t>(width) * height);
  const double inv = 1.0 / ss;
  const float norm = 1.0f / static_cast<float>(ss * ss);
  for (int py = 0; py < height; ++py) {
    for (int px = 0; px < width; ++px) {
      float acc = 0.0f;
      for (int sy = 0; sy < ss; ++sy) {
        for (int sx = 0; sx < ss; ++sx) {
          const EgoPoint p = pixel_to_ego({px + (sx + 0.5) * inv, py + (sy + 0.5) * inv}, frame);
          acc += procedural_gray(road, p.x, p.y);
        }
      }
      out[static_cast<std::size_t>(py) * width + px] = acc * norm;
    }
  }
  return out;
}

/// 1-D area-averaging weights from n_src cells onto n_dst cells.
struct AreaTap {
  int src;
  float weight;
};
std::vector<std::vector<AreaTap>> area_taps(int n_src, int n_dst) {
  std::vector<std::vector<AreaTap>> taps(n_dst);
  const double ratio = static_cast<double>(n_src) / n_dst;
  for (int d = 0; d < n_dst; ++d) {
    const double lo = d * ratio;
    const double hi = (d + 1) * ratio;
    for (int s = static_cast<int>(std::floor(lo)); s < std::min<int>(n_src, std::ceil(hi)); ++s) {
      const double overlap = std::min<double>(hi, s + 1) - std::max<double>(lo, s);
      if (overlap > 0) taps[d].push_back({s, static_cast<float>(overlap / ratio)});
    }
  }
  return taps;
}

/// Resamples 8-bit RGB to three float planes in [0, 1].
std::array<std::vector<float>, 3> resample_planes(const RgbImage& src, int width, int height) {
  if (src.width <= 0 || src.height <= 0 ||
      src.pixels.size() != static_cast<std::size_t>(src.width) * src.height * 3) {
    throw InvalidArgument("road raster has inconsistent dims");
  }
  const auto tx = area_taps(src.width, width);
  const auto ty = area_taps(src.height, height);
  std::array<std::vector<float>, 3> out;
  std::vector<float> rows(static_cast<std::size_t>(src.height) * width);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < src.height; ++y) {
      const std::uint8_t* row = src.pixels.data() + static_cast<std::size_t>(y) * src.width * 3;
      for (int x = 0; x < width; ++x) {
        float acc = 0.0f;
        for (const auto& t : tx[x]) acc += t.weight * row[t.src * 3 + c];
        rows[static_cast<std::size_t>(y) * width + x] = acc / 255.0f;
      }
    }
    out[c].assign(static_cast<std::size_t>(width) * height, 0.0f);
    for (int y = 0; y < height; ++y) {
      for (const auto& t : ty[y]) {
        const float* r = rows.data() + static_cast<std::size_t>(t.src) * width;
        float* o = out[c].data() + static_cast<std::size_t>(y) * width;
        for (int x = 0; x < width; ++x) o[x] += t.weight * r[x];
      }
      for (int x = 0; x < width; ++x) {
        float& v = out[c][static_cast<std::size_t>(y) * width + x];
        v = std::clamp(v, 0.0f, 1.0f);
      }
    }
  }
  return out;
}

bool inside_convex(const std::array<PixelPoint, 4>& poly, double u, double v) {
  bool pos = false;
  bool neg = false;
  for (int i = 0; i < 4; ++i) {
    const auto& a = poly[i];
    const auto& b = poly[(i + 1) % 4];
    const double cross = (b.u - a.u) * (v - a.v) - (b.v - a.v) * (u - a.u);
    if (cross > 0) pos = true;
    if (cross < 0) neg = true;
    if (pos && neg) return false;
  }
  return true;
}

/// Sets every pixel whose center lies in the footprint; off-map parts are clipped.
void fill_footprint(LayoutTensor& t, int channel, const FootprintBox& box) {
  const PixelFrame frame = t.frame();
  const auto corners = footprint_to_polygon(box);
  std::array<PixelPoint, 4> poly;
  double umin = 1e300, umax = -1e300, vmin = 1e300, vmax = -1e300;
  for (int i = 0; i < 4; ++i) {
    poly[i] = ego_to_pixel(corners[i], frame);
    umin = std::min(umin, poly[i].u);
    umax = std::max(umax, poly[i].u);
    vmin = std::min(vmin, poly[i].v);
    vmax = std::max(vmax, poly[i].v);
  }
  const int x0 = std::max(0, static_cast<int>(std::floor(umin - 0.5)));
  const int x1 = std::min(t.width() - 1, static_cast<int>(std::ceil(umax - 0.5)));
  const int y0 = std::max(0, static_cast<int>(std::floor(vmin - 0.5)));
  const int y1 = std::min(t.height() - 1, static_cast<int>(std::ceil(vmax - 0.5)));
  bool any = false;
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      if (inside_convex(poly, x + 0.5, y + 0.5)) {
        t.at(channel, y, x) = 1.0f;
        any = true;
      }
    }
  }
  // Footprints smaller than a pixel still mark the pixel holding their center.
  if (!any) {
    const PixelPoint c = ego_to_pixel(box.center, frame);
    const int cx = static_cast<int>(std::floor(c.u));
    const int cy = static_cast<int>(std::floor(c.v));
    if (cx >= 0 && cx < t.width() && cy >= 0 && cy < t.height()) t.at(channel, cy, cx) = 1.0f;
  }
}

}  // namespace

RgbImage render_procedural_road(const ProceduralRoad& road, int width, int height, int supersample) {
  const auto plane = procedural_plane(road, width, height, std::max(1, supersample));
  RgbImage img{width, height, std::vector<std::uint8_t>(plane.size() * 3)};
  for (std::size_t i = 0; i < plane.size(); ++i) {
    const auto b = static_cast<std::uint8_t>(std::lround(std::clamp(plane[i], 0.0f, 1.0f) * 255.0f));
    img.pixels[i * 3] = img.pixels[i * 3 + 1] = img.pixels[i * 3 + 2] = b;
  }
  return img;
}

RgbImage resample_area(const RgbImage& src, int width, int height) {
  const auto planes = resample_planes(src, width, height);
  RgbImage img{width, height, std::vector<std::uint8_t>(static_cast<std::size_t>(width) * height * 3)};
  for (std::size_t i = 0; i < planes[0].size(); ++i) {
    for (int c = 0; c < 3; ++c) {
      img.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::lround(planes[c][i] * 255.0f));
    }
  }
  return img;
}

LayoutTensor rasterize_scene(const SceneRecord& rec, int height, int width, const RasterOptions& opts) {
  const PixelFrame frame(width, height);  // validates aspect
  LayoutTensor t(height, width);
  const std::size_t plane = static_cast<std::size_t>(width) * height;

  if (const auto* pr = std::get_if<ProceduralRoad>(&rec.road)) {
    const auto gray = procedural_plane(*pr, width, height, std::max(1, opts.road_supersample));
    for (int c = 0; c < 3; ++c) std::copy(gray.begin(), gray.end(), t.channel(kRoadChannel0 + c));
  } else {
    std::array<std::vector<float>, 3> planes;
    if (const auto* img = std::get_if<RgbImage>(&rec.road)) {
      planes = resample_planes(*img, width, height);
    } else {
      const auto& file = std::get<RoadImageFile>(rec.road);
      if (file.path.empty()) throw InvalidArgument("record '" + rec.id + "' has no road raster");
      std::filesystem::path p(file.path);
      if (p.is_relative() && !opts.base_dir.empty()) p = std::filesystem::path(opts.base_dir) / p;
      planes = resample_planes(read_png_rgb(p.string()), width, height);
    }
    for (int c = 0; c < 3; ++c) std::copy(planes[c].begin(), planes[c].begin() + plane, t.channel(c));
  }

  fill_footprint(t, kEgoChannel, rec.ego_box);
  for (std::size_t i = 0; i < rec.objects.size(); ++i) {
    const auto& box = rec.objects[i].box;
    const bool is_referred = rec.referred_index && *rec.referred_index == i;
    if (is_referred && !opts.no_referred_channel) {
      fill_footprint(t, kReferredChannel, box);
    } else {
      fill_footprint(t, class_channel_index(box.label), box);
    }
  }
  return t;
}

std::vector<std::uint8_t> road_mask(const LayoutTensor& t, const RoadColorPredicate& pred) {
  const std::size_t n = static_cast<std::size_t>(t.width()) * t.height();
  std::vector<std::uint8_t> mask(n, 0);
  const float* r = t.channel(0);
  const float* g = t.channel(1);
  const float* b = t.channel(2);
  for (std::size_t i = 0; i < n; ++i) mask[i] = pred(r[i], g[i], b[i]) ? 1 : 0;
  return mask;
}

void write_channel_png(const LayoutTensor& t, int channel, const std::string& path) {
  if (channel < 0 || channel >= kLayoutChannels) throw InvalidArgument("channel out of range");
  const std::size_t n = static_cast<std::size_t>(t.width()) * t.height();
  std::vector<std::uint8_t> px(n);
  const float* c = t.channel(channel);
  for (std::size_t i = 0; i < n; ++i) {
    px[i] = static_cast<std::uint8_t>(std::lround(std::clamp(c[i], 0.0f, 1.0f) * 255.0f));
  }
  write_png_gray(path, t.width(), t.height(), px);
}

}  // namespace cmdgoal
