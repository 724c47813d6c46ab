#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "bseg/error.hpp"

namespace bseg {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array of doubles. Image tensors use NCHW order.
class Grid {
 public:
  Grid() = default;

  explicit Grid(Shape shape, double fill = 0.0) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    check_extents();
  }

  Grid(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != shape_size(shape_))
      fail(ErrorCode::ShapeMismatch, "data length " + std::to_string(data_.size()) + " does not match shape " +
                                         shape_str(shape_));
  }

  static Grid scalar(double v) { return Grid(Shape{1}, std::vector<double>{v}); }

  static Grid vector(std::initializer_list<double> values) {
    return Grid(Shape{values.size()}, std::vector<double>(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& raw() noexcept { return data_; }
  const std::vector<double>& raw() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }

  /// 4-D accessor (n, c, y, x).
  double& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }
  const double& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }

  double item() const {
    if (data_.size() != 1) fail(ErrorCode::ShapeMismatch, "item() on grid of shape " + shape_str(shape_));
    return data_[0];
  }

  Grid reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size())
      fail(ErrorCode::ShapeMismatch, "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Grid(std::move(shape), data_);
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  double sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }
  double mean() const { return data_.empty() ? 0.0 : sum() / static_cast<double>(data_.size()); }

  friend bool operator==(const Grid& a, const Grid& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  void check_extents() const {
    for (auto e : shape_)
      if (e == 0) fail(ErrorCode::ShapeMismatch, "zero extent in shape " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<double> data_;
};

inline void require_same_shape(const Grid& a, const Grid& b, const char* where) {
  if (a.shape() != b.shape())
    fail(ErrorCode::ShapeMismatch, std::string(where) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline double dot(const Grid& a, const Grid& b) {
  require_same_shape(a, b, "dot");
  return std::inner_product(a.raw().begin(), a.raw().end(), b.raw().begin(), 0.0);
}

inline double max_abs_diff(const Grid& a, const Grid& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline Grid map(const Grid& g, const std::function<double(double)>& f) {
  Grid out(g.shape());
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = f(g[i]);
  return out;
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

}  // namespace bseg
