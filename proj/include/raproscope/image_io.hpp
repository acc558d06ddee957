#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "raproscope/tensor.hpp"

namespace raproscope {

struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major RGB triples
};

void write_png(const std::filesystem::path& path, const RgbImage& image);
RgbImage read_png_rgb(const std::filesystem::path& path);

// PNG -> [C,H,W] in [0,1], C = 1 for grayscale and 3 for colour.
Tensor read_png_tensor(const std::filesystem::path& path);

// Raw little-endian float32 file with exactly shape_size(shape) values.
Tensor read_raw_tensor(const std::filesystem::path& path, const Shape& shape);

// Dispatches on extension: ".png" or raw float32 otherwise. PNG images are
// converted to `shape` (grayscale <-> RGB when the channel count differs).
Tensor read_image(const std::filesystem::path& path, const Shape& shape);

}  // namespace raproscope
