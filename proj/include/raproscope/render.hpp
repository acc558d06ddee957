#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "raproscope/image_io.hpp"
#include "raproscope/tensor.hpp"

namespace raproscope {

// Per-pixel relevance scaled into [-1, 1] by the maximum absolute value.
struct Heatmap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<float> values;  // row-major, in [-1, 1]
  float normalization = 0.0f;   // max |R| of the source; 0 for an all-zero map

  // Rank 3 [C,H,W] maps are summed over channels, rank 2 is taken as [H,W]
  // and rank 1 becomes a single row.
  static Heatmap from_relevance(const Tensor& relevance);

  // Nearest-neighbour upscaling by an integer factor.
  RgbImage to_image(std::size_t scale = 1) const;
};

// Blue (-1) -> white (0) -> red (+1).
std::array<std::uint8_t, 3> seismic(float v);

void render_heatmap(const Tensor& relevance, const std::filesystem::path& out_path, std::size_t scale = 1);

}  // namespace raproscope
