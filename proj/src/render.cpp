#include "raproscope/render.hpp"

#include <algorithm>
#include <cmath>

#include "raproscope/errors.hpp"

namespace raproscope {

Heatmap Heatmap::from_relevance(const Tensor& relevance) {
  if (relevance.empty()) throw DimensionError("cannot render an empty relevance map");
  if (relevance.rank() > 3) throw DimensionError("cannot render rank " + std::to_string(relevance.rank()));
  require_finite(relevance, "heatmap");
  const Tensor r = channel_sum(relevance);
  Heatmap h;
  h.height = r.dim(0);
  h.width = r.dim(1);
  for (float v : r.data()) h.normalization = std::max(h.normalization, std::fabs(v));
  h.values.assign(r.size(), 0.0f);
  if (h.normalization > 0.0f) {
    for (std::size_t i = 0; i < r.size(); ++i) h.values[i] = std::clamp(r[i] / h.normalization, -1.0f, 1.0f);
  }
  return h;
}

std::array<std::uint8_t, 3> seismic(float v) {
  v = std::clamp(v, -1.0f, 1.0f);
  const auto level = [](float t) { return static_cast<std::uint8_t>(std::lround(255.0f * t)); };
  if (v >= 0.0f) return {255, level(1.0f - v), level(1.0f - v)};
  return {level(1.0f + v), level(1.0f + v), 255};
}

RgbImage Heatmap::to_image(std::size_t scale) const {
  if (scale == 0) throw ConfigError("heatmap scale must be at least 1");
  RgbImage img{width * scale, height * scale, {}};
  img.pixels.resize(img.width * img.height * 3);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const auto rgb = seismic(values[(y / scale) * width + x / scale]);
      std::copy(rgb.begin(), rgb.end(), img.pixels.begin() + std::ptrdiff_t((y * img.width + x) * 3));
    }
  }
  return img;
}

void render_heatmap(const Tensor& relevance, const std::filesystem::path& out_path, std::size_t scale) {
  write_png(out_path, Heatmap::from_relevance(relevance).to_image(scale));
}

}  // namespace raproscope
