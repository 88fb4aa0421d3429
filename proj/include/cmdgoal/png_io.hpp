#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cmdgoal/scene.hpp"

namespace cmdgoal {

/// Reads an 8-bit PNG, converting gray/palette/alpha variants to RGB.
RgbImage read_png_rgb(const std::string& path);
void write_png_rgb(const std::string& path, const RgbImage& img);
void write_png_gray(const std::string& path, int width, int height,
                    const std::vector<std::uint8_t>& pixels);

}  // namespace cmdgoal
