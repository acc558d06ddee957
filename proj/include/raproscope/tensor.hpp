#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace raproscope {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major float32 tensor. Every dimension is positive and the data
// length always equals the product of the shape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const;
  bool empty() const noexcept { return data_.empty(); }

  std::span<const float> data() const noexcept { return data_; }
  std::span<float> mutable_data() noexcept { return data_; }
  const std::vector<float>& values() const noexcept { return data_; }

  float operator[](std::size_t i) const { return data_[i]; }
  float& operator[](std::size_t i) { return data_[i]; }

  // Row-major accessors for rank-2 and rank-3 tensors.
  float at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }

  Tensor reshaped(Shape shape) const;
  double sum() const;
  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

// Throws NumericError naming `where` when any element is NaN or infinite.
void require_finite(const Tensor& t, const char* where);

// Output of maxpool2d: pooled values plus the flat input index of each winner.
struct PoolResult {
  Tensor values;
  std::vector<std::size_t> argmax;
};

// Kernels. All are pure; sums accumulate in double in a fixed order and the
// result is rounded to float once.
Tensor matmul(const Tensor& a, const Tensor& b);
// x: [in] (or any shape with `in` elements), w: [in x out], b: [out] or empty.
Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b);
// Cross-correlation with zero padding. x: [C,H,W], w: [F,C,kh,kw], b: [F] or empty.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t pad);
PoolResult maxpool2d(const Tensor& x, std::size_t k, std::size_t stride);
Tensor avgpool2d(const Tensor& x, std::size_t k, std::size_t stride);
Tensor global_avgpool(const Tensor& x);
Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, const Tensor& mean,
                 const Tensor& var, float eps);
Tensor relu(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor flatten(const Tensor& x);

// [C,H,W] -> [H,W] by summing over channels; [H,W] is returned as is and a
// rank-1 tensor becomes a single row [1,N].
Tensor channel_sum(const Tensor& x);

std::size_t pooled_extent(std::size_t extent, std::size_t k, std::size_t stride);
std::size_t conv_extent(std::size_t extent, std::size_t k, std::size_t stride, std::size_t pad);

}  // namespace raproscope
