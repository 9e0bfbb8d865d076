#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ageflow {

/// Training storage precision. Gradient checks and oracle comparisons
/// instantiate the same templates with double.
using Real = float;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Runtime fault: non-finite values, degenerate data, corrupted files.
class Fault : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

std::string shape_string(const Shape& shape);

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

/// Dense row-major array. Value semantics; copies are deep.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), data_(std::move(values)) {
    if (data_.size() != shape_numel(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  const Shape& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(int n, int c, int h, int w) { return data_[offset4(n, c, h, w)]; }
  const T& at(int n, int c, int h, int w) const { return data_[offset4(n, c, h, w)]; }

  std::size_t offset4(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

template <typename T>
void require_rank(const Tensor<T>& t, int rank, const char* what) {
  if (t.ndim() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(t.shape()));
  }
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "max_abs_diff");
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <typename T>
T sum(const Tensor<T>& t) {
  return std::accumulate(t.values().begin(), t.values().end(), T(0));
}

template <typename T>
void add_inplace(Tensor<T>& dst, const Tensor<T>& src) {
  require_same_shape(dst, src, "add_inplace");
  T* d = dst.data();
  const T* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

template <typename T>
void scale_inplace(Tensor<T>& dst, T factor) {
  for (T& v : dst.values()) v *= factor;
}

}  // namespace ageflow
