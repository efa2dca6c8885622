#pragma once

// Dense row-major double tensor with dynamic rank. All heavy math in this
// project runs on these; shapes are small (desk-scale images), so a plain
// std::vector payload is enough.

#include <cstdint>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace sdlayer {

using Shape = std::vector<std::int64_t>;

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

std::string shape_to_string(const Shape& s);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);  // zero-filled
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double v);
  static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }
  static Tensor randn(const Shape& shape, std::mt19937_64& rng, double stddev = 1.0);
  static Tensor uniform(const Shape& shape, std::mt19937_64& rng, double lo, double hi);

  std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
  // Negative axes count from the back, numpy style.
  std::int64_t dim(std::int64_t axis) const;
  const Shape& shape() const { return shape_; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  double& operator()(std::int64_t a) { return data_[check_index(a * stride(0))]; }
  double operator()(std::int64_t a) const { return data_[check_index(a * stride(0))]; }
  double& operator()(std::int64_t a, std::int64_t b) {
    return data_[check_index(a * stride(0) + b * stride(1))];
  }
  double operator()(std::int64_t a, std::int64_t b) const {
    return data_[check_index(a * stride(0) + b * stride(1))];
  }
  double& operator()(std::int64_t a, std::int64_t b, std::int64_t c) {
    return data_[check_index(a * stride(0) + b * stride(1) + c * stride(2))];
  }
  double operator()(std::int64_t a, std::int64_t b, std::int64_t c) const {
    return data_[check_index(a * stride(0) + b * stride(1) + c * stride(2))];
  }
  double& operator()(std::int64_t a, std::int64_t b, std::int64_t c, std::int64_t d) {
    return data_[check_index(a * stride(0) + b * stride(1) + c * stride(2) + d * stride(3))];
  }
  double operator()(std::int64_t a, std::int64_t b, std::int64_t c, std::int64_t d) const {
    return data_[check_index(a * stride(0) + b * stride(1) + c * stride(2) + d * stride(3))];
  }

  std::int64_t stride(std::int64_t axis) const;

  bool all_finite() const;
  double sum() const;
  double min() const;
  double max() const;
  double abs_max() const;

  void fill(double v);
  Tensor reshaped(Shape new_shape) const;  // numel must match

  std::string shape_str() const { return shape_to_string(shape_); }

 private:
  std::size_t check_index(std::int64_t flat) const { return static_cast<std::size_t>(flat); }

  Shape shape_;
  std::vector<double> data_;
};

// Splits a tensor around `axis` (from the back allowed): outer = product of
// dims before it, inner = product after. Used by axis-wise ops.
struct AxisView {
  std::int64_t outer;
  std::int64_t axis_len;
  std::int64_t inner;
};
AxisView axis_view(const Shape& shape, std::int64_t axis);

}  // namespace sdlayer
