#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "ageflow/tensor.hpp"

namespace ageflow {

/// Central-difference gradient of a scalar function, one element at a time.
/// Meant as a verification oracle in 64-bit.
template <typename T>
Tensor<T> finite_diff_grad(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x,
                           T eps) {
  Tensor<T> grad(x.shape());
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + eps;
    const T up = f(probe);
    probe[i] = orig - eps;
    const T down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (T(2) * eps);
  }
  return grad;
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor).
template <typename T>
T relative_error(const Tensor<T>& a, const Tensor<T>& b, T floor = T(1e-6)) {
  require_same_shape(a, b, "relative_error");
  T worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const T scale = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
  }
  return worst;
}

}  // namespace ageflow
