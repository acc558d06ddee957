#include "raproscope/tensor.hpp"

#include <cmath>
#include <sstream>

#include "raproscope/errors.hpp"

namespace raproscope {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void check_dims(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(what) + " expects a rank-" + std::to_string(rank) +
                         " tensor, got " + shape_string(t.shape()));
  }
}

}  // namespace

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
  check_dims(shape_);
  data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_dims(shape_);
  if (data_.size() != shape_size(shape_)) {
    throw DimensionError("data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_string(shape_));
  }
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) throw IndexError("axis out of range for " + shape_string(shape_));
  return shape_[axis];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

double Tensor::sum() const {
  double s = 0.0;
  for (float v : data_) s += v;
  return s;
}

bool Tensor::all_finite() const {
  for (float v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void require_finite(const Tensor& t, const char* where) {
  if (!t.all_finite()) throw NumericError(std::string(where) + ": non-finite value");
}

std::size_t pooled_extent(std::size_t extent, std::size_t k, std::size_t stride) {
  if (k == 0 || stride == 0) throw ShapeError("pool kernel and stride must be positive");
  if (extent < k) {
    throw ShapeError("pool kernel " + std::to_string(k) + " larger than extent " +
                     std::to_string(extent));
  }
  return (extent - k) / stride + 1;
}

std::size_t conv_extent(std::size_t extent, std::size_t k, std::size_t stride, std::size_t pad) {
  if (stride == 0) throw ShapeError("conv stride must be positive");
  const std::size_t padded = extent + 2 * pad;
  if (padded < k || (padded - k) % stride != 0) {
    throw ShapeError("conv output size is not integral: extent " + std::to_string(extent) +
                     ", kernel " + std::to_string(k) + ", stride " + std::to_string(stride) +
                     ", pad " + std::to_string(pad));
  }
  return (padded - k) / stride + 1;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul inner dimensions differ: " + shape_string(a.shape()) + " * " +
                         shape_string(b.shape()));
  }
  require_finite(a, "matmul");
  require_finite(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      double acc = 0.0;
      for (std::size_t i = 0; i < k; ++i) acc += double(a.at(r, i)) * b.at(i, c);
      out[r * n + c] = static_cast<float>(acc);
    }
  }
  require_finite(out, "matmul");
  return out;
}

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank(w, 2, "dense weight");
  const std::size_t in = w.dim(0), out_features = w.dim(1);
  if (x.size() != in) {
    throw DimensionError("dense input " + shape_string(x.shape()) + " does not match weight " +
                         shape_string(w.shape()));
  }
  if (!b.empty() && b.size() != out_features) {
    throw DimensionError("dense bias " + shape_string(b.shape()) + " does not match weight " +
                         shape_string(w.shape()));
  }
  require_finite(x, "dense");
  Tensor out({out_features});
  for (std::size_t j = 0; j < out_features; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < in; ++i) acc += double(x[i]) * w[i * out_features + j];
    if (!b.empty()) acc += b[j];
    out[j] = static_cast<float>(acc);
  }
  require_finite(out, "dense");
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t pad) {
  require_rank(x, 3, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t F = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != C) {
    throw DimensionError("conv2d channels differ: input " + shape_string(x.shape()) + ", weight " +
                         shape_string(w.shape()));
  }
  if (!b.empty() && b.size() != F) {
    throw DimensionError("conv2d bias " + shape_string(b.shape()) + " does not match weight " +
                         shape_string(w.shape()));
  }
  const std::size_t OH = conv_extent(H, kh, stride, pad);
  const std::size_t OW = conv_extent(W, kw, stride, pad);
  require_finite(x, "conv2d");
  Tensor out({F, OH, OW});
  for (std::size_t f = 0; f < F; ++f) {
    for (std::size_t oy = 0; oy < OH; ++oy) {
      for (std::size_t ox = 0; ox < OW; ++ox) {
        double acc = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const std::ptrdiff_t iy = std::ptrdiff_t(oy * stride + ky) - std::ptrdiff_t(pad);
            if (iy < 0 || iy >= std::ptrdiff_t(H)) continue;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const std::ptrdiff_t ix = std::ptrdiff_t(ox * stride + kx) - std::ptrdiff_t(pad);
              if (ix < 0 || ix >= std::ptrdiff_t(W)) continue;
              acc += double(x.at(c, std::size_t(iy), std::size_t(ix))) *
                     w[((f * C + c) * kh + ky) * kw + kx];
            }
          }
        }
        if (!b.empty()) acc += b[f];
        out[(f * OH + oy) * OW + ox] = static_cast<float>(acc);
      }
    }
  }
  require_finite(out, "conv2d");
  return out;
}

PoolResult maxpool2d(const Tensor& x, std::size_t k, std::size_t stride) {
  require_rank(x, 3, "maxpool2d");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t OH = pooled_extent(H, k, stride), OW = pooled_extent(W, k, stride);
  require_finite(x, "maxpool2d");
  PoolResult r{Tensor({C, OH, OW}), std::vector<std::size_t>(C * OH * OW)};
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t oy = 0; oy < OH; ++oy) {
      for (std::size_t ox = 0; ox < OW; ++ox) {
        std::size_t best = (c * H + oy * stride) * W + ox * stride;
        // Row-major scan with strict comparison: ties go to the lowest index.
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::size_t idx = (c * H + oy * stride + ky) * W + ox * stride + kx;
            if (x[idx] > x[best]) best = idx;
          }
        }
        const std::size_t o = (c * OH + oy) * OW + ox;
        r.values[o] = x[best];
        r.argmax[o] = best;
      }
    }
  }
  return r;
}

Tensor avgpool2d(const Tensor& x, std::size_t k, std::size_t stride) {
  require_rank(x, 3, "avgpool2d");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t OH = pooled_extent(H, k, stride), OW = pooled_extent(W, k, stride);
  require_finite(x, "avgpool2d");
  Tensor out({C, OH, OW});
  const double inv = 1.0 / double(k * k);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t oy = 0; oy < OH; ++oy) {
      for (std::size_t ox = 0; ox < OW; ++ox) {
        double acc = 0.0;
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            acc += double(x.at(c, oy * stride + ky, ox * stride + kx)) * inv;
          }
        }
        out[(c * OH + oy) * OW + ox] = static_cast<float>(acc);
      }
    }
  }
  return out;
}

Tensor global_avgpool(const Tensor& x) {
  require_rank(x, 3, "global_avgpool");
  const std::size_t C = x.dim(0), HW = x.dim(1) * x.dim(2);
  require_finite(x, "global_avgpool");
  Tensor out({C});
  const double inv = 1.0 / double(HW);
  for (std::size_t c = 0; c < C; ++c) {
    double acc = 0.0;
    for (std::size_t p = 0; p < HW; ++p) acc += double(x[c * HW + p]) * inv;
    out[c] = static_cast<float>(acc);
  }
  return out;
}

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, const Tensor& mean,
                 const Tensor& var, float eps) {
  const std::size_t C = x.dim(0);
  for (const Tensor* p : {&gamma, &beta, &mean, &var}) {
    if (p->size() != C) {
      throw DimensionError("batchnorm parameter " + shape_string(p->shape()) +
                           " does not match input " + shape_string(x.shape()));
    }
  }
  require_finite(x, "batchnorm");
  const std::size_t inner = x.size() / C;
  Tensor out(x.shape());
  for (std::size_t c = 0; c < C; ++c) {
    const double scale = double(gamma[c]) / std::sqrt(double(var[c]) + eps);
    for (std::size_t p = 0; p < inner; ++p) {
      const std::size_t i = c * inner + p;
      out[i] = static_cast<float>((double(x[i]) - mean[c]) * scale + beta[c]);
    }
  }
  require_finite(out, "batchnorm");
  return out;
}

Tensor relu(const Tensor& x) {
  require_finite(x, "relu");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0f ? x[i] : 0.0f;
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add shapes differ: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  require_finite(a, "add");
  require_finite(b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  require_finite(out, "add");
  return out;
}

Tensor flatten(const Tensor& x) { return x.reshaped({x.size()}); }

Tensor channel_sum(const Tensor& x) {
  if (x.rank() == 1) return x.reshaped({1, x.size()});
  if (x.rank() == 2) return x;
  require_rank(x, 3, "channel_sum");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor out({H, W});
  for (std::size_t p = 0; p < H * W; ++p) {
    double acc = 0.0;
    for (std::size_t c = 0; c < C; ++c) acc += x[c * H * W + p];
    out[p] = static_cast<float>(acc);
  }
  return out;
}

}  // namespace raproscope
