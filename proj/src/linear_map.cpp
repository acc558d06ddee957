#include <limits>

#include "raproscope/attribution.hpp"
#include "raproscope/errors.hpp"

namespace raproscope {

LinearMap::LinearMap(std::size_t in_size, std::size_t out_size)
    : in_size_(in_size), expected_rows_(out_size) {
  if (in_size > std::numeric_limits<std::uint32_t>::max()) throw ShapeError("linear map input too large");
  row_start_.reserve(out_size + 1);
}

void LinearMap::add_edge(std::size_t from, float weight) {
  edges_.push_back({static_cast<std::uint32_t>(from), weight});
}

void LinearMap::end_row() {
  if (out_size() >= expected_rows_) throw ShapeError("linear map has more rows than declared");
  row_start_.push_back(edges_.size());
}

LinearMap LinearMap::from_matrix(const Tensor& w) {
  if (w.rank() != 2) throw DimensionError("weight matrix must be rank 2, got " + shape_string(w.shape()));
  const std::size_t in = w.dim(0), out = w.dim(1);
  LinearMap map(in, out);
  for (std::size_t j = 0; j < out; ++j) {
    for (std::size_t i = 0; i < in; ++i) map.add_edge(i, w[i * out + j]);
    map.end_row();
  }
  return map;
}

LinearMap LinearMap::conv2d(const Shape& in_shape, const Tensor& w, std::size_t stride, std::size_t pad) {
  if (in_shape.size() != 3 || w.rank() != 4 || w.dim(1) != in_shape[0]) {
    throw DimensionError("conv2d map: input " + shape_string(in_shape) + " vs weight " +
                         shape_string(w.shape()));
  }
  const std::size_t C = in_shape[0], H = in_shape[1], W = in_shape[2];
  const std::size_t F = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t OH = conv_extent(H, kh, stride, pad), OW = conv_extent(W, kw, stride, pad);
  LinearMap map(C * H * W, F * OH * OW);
  for (std::size_t f = 0; f < F; ++f) {
    for (std::size_t oy = 0; oy < OH; ++oy) {
      for (std::size_t ox = 0; ox < OW; ++ox) {
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const std::ptrdiff_t iy = std::ptrdiff_t(oy * stride + ky) - std::ptrdiff_t(pad);
            if (iy < 0 || iy >= std::ptrdiff_t(H)) continue;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const std::ptrdiff_t ix = std::ptrdiff_t(ox * stride + kx) - std::ptrdiff_t(pad);
              if (ix < 0 || ix >= std::ptrdiff_t(W)) continue;
              map.add_edge((c * H + std::size_t(iy)) * W + std::size_t(ix),
                           w[((f * C + c) * kh + ky) * kw + kx]);
            }
          }
        }
        map.end_row();
      }
    }
  }
  return map;
}

LinearMap LinearMap::avgpool2d(const Shape& in_shape, std::size_t k, std::size_t stride) {
  if (in_shape.size() != 3) throw DimensionError("avgpool map needs a rank-3 input");
  const std::size_t C = in_shape[0], H = in_shape[1], W = in_shape[2];
  const std::size_t OH = pooled_extent(H, k, stride), OW = pooled_extent(W, k, stride);
  const float w = static_cast<float>(1.0 / double(k * k));
  LinearMap map(C * H * W, C * OH * OW);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t oy = 0; oy < OH; ++oy) {
      for (std::size_t ox = 0; ox < OW; ++ox) {
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            map.add_edge((c * H + oy * stride + ky) * W + ox * stride + kx, w);
          }
        }
        map.end_row();
      }
    }
  }
  return map;
}

LinearMap LinearMap::global_avgpool(const Shape& in_shape) {
  if (in_shape.size() != 3) throw DimensionError("global avgpool map needs a rank-3 input");
  const std::size_t C = in_shape[0], HW = in_shape[1] * in_shape[2];
  const float w = static_cast<float>(1.0 / double(HW));
  LinearMap map(C * HW, C);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t p = 0; p < HW; ++p) map.add_edge(c * HW + p, w);
    map.end_row();
  }
  return map;
}

LinearMap LinearMap::add(std::size_t n) {
  LinearMap map(2 * n, n);
  for (std::size_t j = 0; j < n; ++j) {
    map.add_edge(j, 1.0f);
    map.add_edge(n + j, 1.0f);
    map.end_row();
  }
  return map;
}

LinearMap LinearMap::of(const LayerSpec& l, const Shape& in_shape) {
  switch (l.kind) {
    case LayerKind::kDense:
      return from_matrix(l.weight);
    case LayerKind::kConv2D:
      return conv2d(in_shape, l.weight, l.stride, l.pad);
    case LayerKind::kAvgPool2D:
      return avgpool2d(in_shape, l.kernel_h, l.stride);
    case LayerKind::kGlobalAvgPool:
      return global_avgpool(in_shape);
    case LayerKind::kAdd:
      return add(shape_size(in_shape));
    default:
      throw Error("layer '" + l.id + "' has no linear form");
  }
}

}  // namespace raproscope
