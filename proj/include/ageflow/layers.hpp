#pragma once

// Parameterized building blocks shared by the flow subnets, the prior
// generator and the discriminator. Each layer keeps the input of its last
// training-mode forward so backward() can run without extra arguments.

#include <string>

#include "ageflow/adam.hpp"
#include "ageflow/kernels.hpp"
#include "ageflow/rng.hpp"

namespace ageflow {

template <typename T>
Tensor<T> normal_tensor(const Shape& shape, Rng& rng, double stddev) {
  Tensor<T> t(shape);
  for (auto& v : t.values()) v = static_cast<T>(rng.normal() * stddev);
  return t;
}

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;

  /// Kaiming-style normal init; pass zero_init for the identity-preserving
  /// output layers.
  Conv2d(int in_channels, int out_channels, int kernel, Rng& rng, bool zero_init = false)
      : weight({out_channels, in_channels, kernel, kernel}),
        bias({out_channels}),
        grad_weight(weight.shape()),
        grad_bias(bias.shape()),
        padding_((kernel - 1) / 2) {
    if (kernel % 2 == 0) throw ShapeError("Conv2d: kernel size must be odd");
    if (!zero_init) {
      const double fan_in = static_cast<double>(in_channels) * kernel * kernel;
      weight = normal_tensor<T>(weight.shape(), rng, std::sqrt(1.0 / fan_in));
    }
  }

  Tensor<T> forward(const Tensor<T>& x) const { return kernels::conv2d(x, weight, bias, padding_); }

  Tensor<T> forward_train(const Tensor<T>& x) {
    input_ = x;
    return forward(x);
  }

  Tensor<T> backward(const Tensor<T>& grad_y) {
    Tensor<T> gx;
    kernels::conv2d_backward(input_, weight, padding_, grad_y, &gx, &grad_weight, &grad_bias);
    return gx;
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back({prefix + "/w", &weight, &grad_weight});
    out.push_back({prefix + "/b", &bias, &grad_bias});
  }

  int padding() const { return padding_; }

  Tensor<T> weight, bias, grad_weight, grad_bias;

 private:
  int padding_ = 0;
  Tensor<T> input_;
};

template <typename T>
class Dense {
 public:
  Dense() = default;

  Dense(int in, int out, Rng& rng, bool zero_init = false)
      : weight({out, in}), bias({out}), grad_weight(weight.shape()), grad_bias(bias.shape()) {
    if (!zero_init) weight = normal_tensor<T>(weight.shape(), rng, std::sqrt(1.0 / in));
  }

  Tensor<T> forward(const Tensor<T>& x) const { return kernels::dense(x, weight, bias); }

  Tensor<T> forward_train(const Tensor<T>& x) {
    input_ = x;
    return forward(x);
  }

  Tensor<T> backward(const Tensor<T>& grad_y) {
    Tensor<T> gx;
    kernels::dense_backward(input_, weight, grad_y, &gx, &grad_weight, &grad_bias);
    return gx;
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back({prefix + "/w", &weight, &grad_weight});
    out.push_back({prefix + "/b", &bias, &grad_bias});
  }

  int in_features() const { return weight.dim(1); }
  int out_features() const { return weight.dim(0); }

  Tensor<T> weight, bias, grad_weight, grad_bias;

 private:
  Tensor<T> input_;
};

}  // namespace ageflow
