#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "dtune/sprite.hpp"

namespace dtune {

void write_png(const std::filesystem::path& path, const Image& img);
void write_png(const std::filesystem::path& path, const Mask& mask);
/// Raw 8-bit RGB buffer, row-major.
void write_png_rgb8(const std::filesystem::path& path, int height, int width,
                    const std::vector<std::uint8_t>& rgb);

Image read_png_image(const std::filesystem::path& path);
Mask read_png_mask(const std::filesystem::path& path);

}  // namespace dtune
