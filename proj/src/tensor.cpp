#include "sdlayer/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace sdlayer {

std::string shape_to_string(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

namespace {
std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) {
    require(d >= 0, "tensor dimension must be non-negative, got shape " + shape_to_string(s));
    n *= d;
  }
  return n;
}
}  // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  data_.assign(static_cast<std::size_t>(shape_numel(shape_)), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  require(shape_numel(shape_) == static_cast<std::int64_t>(data_.size()),
          "tensor data size does not match shape " + shape_to_string(shape_));
}

Tensor Tensor::full(Shape shape, double v) {
  Tensor t(std::move(shape));
  t.fill(v);
  return t;
}

Tensor Tensor::randn(const Shape& shape, std::mt19937_64& rng, double stddev) {
  Tensor t(shape);
  std::normal_distribution<double> dist(0.0, stddev);
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = dist(rng);
  return t;
}

Tensor Tensor::uniform(const Shape& shape, std::mt19937_64& rng, double lo, double hi) {
  Tensor t(shape);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = dist(rng);
  return t;
}

std::int64_t Tensor::dim(std::int64_t axis) const {
  const auto r = rank();
  if (axis < 0) axis += r;
  require(axis >= 0 && axis < r, "axis out of range for shape " + shape_str());
  return shape_[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::stride(std::int64_t axis) const {
  const auto r = rank();
  if (axis < 0) axis += r;
  std::int64_t s = 1;
  for (std::int64_t i = axis + 1; i < r; ++i) s *= shape_[static_cast<std::size_t>(i)];
  return s;
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

double Tensor::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

double Tensor::min() const {
  require(!data_.empty(), "min of empty tensor");
  return *std::min_element(data_.begin(), data_.end());
}

double Tensor::max() const {
  require(!data_.empty(), "max of empty tensor");
  return *std::max_element(data_.begin(), data_.end());
}

double Tensor::abs_max() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::reshaped(Shape new_shape) const {
  require(shape_numel(new_shape) == numel(),
          "reshape from " + shape_str() + " to " + shape_to_string(new_shape) + " changes element count");
  Tensor t;
  t.shape_ = std::move(new_shape);
  t.data_ = data_;
  return t;
}

AxisView axis_view(const Shape& shape, std::int64_t axis) {
  const auto r = static_cast<std::int64_t>(shape.size());
  if (axis < 0) axis += r;
  require(axis >= 0 && axis < r, "axis out of range for shape " + shape_to_string(shape));
  AxisView v{1, shape[static_cast<std::size_t>(axis)], 1};
  for (std::int64_t i = 0; i < axis; ++i) v.outer *= shape[static_cast<std::size_t>(i)];
  for (std::int64_t i = axis + 1; i < r; ++i) v.inner *= shape[static_cast<std::size_t>(i)];
  return v;
}

}  // namespace sdlayer
