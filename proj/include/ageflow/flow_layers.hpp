#pragma once

// Invertible flow steps: ActNorm, LU-parameterized invertible 1x1
// convolution, additive coupling, and the squeeze permutation.
//
// Every step maps [N,C,H,W] to the same shape. Log-determinants are reported
// per sample; for these layers they do not depend on the input.

#include <string>
#include <vector>

#include "ageflow/layers.hpp"

namespace ageflow {

template <typename T>
class ActNorm {
 public:
  ActNorm() = default;
  explicit ActNorm(int channels) : log_scale({channels}), bias({channels}),
                                   grad_log_scale({channels}), grad_bias({channels}) {}

  /// Data-dependent init: afterwards the batch maps to per-channel zero
  /// mean and unit (population) variance.
  void initialize(const Tensor<T>& batch);
  bool initialized() const { return initialized_; }
  void mark_initialized() { initialized_ = true; }

  Tensor<T> forward(const Tensor<T>& x, T* logdet) const;
  Tensor<T> inverse(const Tensor<T>& y) const;
  T logdet(int height, int width) const;

  Tensor<T> forward_train(const Tensor<T>& x, T* logdet);
  /// grad_logdet is dL/d(per-sample logdet), already summed over the batch.
  Tensor<T> backward(const Tensor<T>& grad_y, T grad_logdet);

  void collect(ParamList<T>& out, const std::string& prefix);
  int channels() const { return static_cast<int>(log_scale.size()); }

  Tensor<T> log_scale, bias, grad_log_scale, grad_bias;

 private:
  void check_input(const Tensor<T>& x, const char* what) const;

  bool initialized_ = false;
  Tensor<T> input_;
};

/// W = P * L * (U + diag(sign * exp(log_diag))) with P fixed, L unit lower
/// triangular and U strictly upper triangular.
template <typename T>
class InvConv1x1 {
 public:
  InvConv1x1() = default;
  /// Starts from a random rotation.
  InvConv1x1(int channels, Rng& rng);

  /// Builds the parameterization from an explicit invertible matrix.
  static InvConv1x1 from_matrix(const Tensor<double>& w);

  int channels() const { return static_cast<int>(perm.size()); }
  Tensor<T> weight() const;
  T logdet(int height, int width) const;

  Tensor<T> forward(const Tensor<T>& x, T* logdet) const;
  /// Permutation transpose, then forward substitution on L and back
  /// substitution on the upper factor, pixel by pixel.
  Tensor<T> inverse(const Tensor<T>& y) const;

  Tensor<T> forward_train(const Tensor<T>& x, T* logdet);
  Tensor<T> backward(const Tensor<T>& grad_y, T grad_logdet);

  void collect(ParamList<T>& out, const std::string& prefix);

  /// Row j of W is row perm[j] of L*U'.
  std::vector<int> perm;
  Tensor<T> sign;
  Tensor<T> lower, upper, log_diag;
  Tensor<T> grad_lower, grad_upper, grad_log_diag;

 private:
  void init_from(const Tensor<double>& w);

  Tensor<T> input_;
};

/// Coupling subnet: conv3x3 -> ReLU -> conv3x3 -> ReLU -> zero-init conv3x3.
template <typename T>
class ConvSubnet {
 public:
  ConvSubnet() = default;
  ConvSubnet(int in_channels, int out_channels, int hidden, Rng& rng)
      : conv1(in_channels, hidden, 3, rng), conv2(hidden, hidden, 3, rng),
        conv_out(hidden, out_channels, 3, rng, /*zero_init=*/true) {}

  Tensor<T> forward(const Tensor<T>& x) const {
    return conv_out.forward(kernels::relu(conv2.forward(kernels::relu(conv1.forward(x)))));
  }

  Tensor<T> forward_train(const Tensor<T>& x) {
    h1_ = conv1.forward_train(x);
    h2_ = conv2.forward_train(kernels::relu(h1_));
    return conv_out.forward_train(kernels::relu(h2_));
  }

  Tensor<T> backward(const Tensor<T>& grad_y) {
    Tensor<T> g = kernels::relu_backward(h2_, conv_out.backward(grad_y));
    g = kernels::relu_backward(h1_, conv2.backward(g));
    return conv1.backward(g);
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    conv1.collect(out, prefix + "/conv1");
    conv2.collect(out, prefix + "/conv2");
    conv_out.collect(out, prefix + "/conv_out");
  }

  Conv2d<T> conv1, conv2, conv_out;

 private:
  Tensor<T> h1_, h2_;
};

template <typename T>
Tensor<T> gather_channels(const Tensor<T>& x, const std::vector<int>& channels);
template <typename T>
void scatter_channels(Tensor<T>& dst, const Tensor<T>& src, const std::vector<int>& channels);

/// y[update] = x[update] + net(x[cond]); y[cond] = x[cond]. Log-determinant 0.
template <typename T, typename Net>
class AdditiveCoupling {
 public:
  AdditiveCoupling() = default;
  AdditiveCoupling(std::vector<int> cond_channels, std::vector<int> update_channels, Net net)
      : net(std::move(net)), cond_(std::move(cond_channels)), update_(std::move(update_channels)) {}

  Tensor<T> forward(const Tensor<T>& x, T* logdet = nullptr) const {
    check(x);
    Tensor<T> y = x;
    Tensor<T> shift = net.forward(gather_channels(x, cond_));
    add_into(y, shift);
    if (logdet) *logdet = T(0);
    return y;
  }

  Tensor<T> inverse(const Tensor<T>& y) const {
    check(y);
    Tensor<T> x = y;
    Tensor<T> shift = net.forward(gather_channels(y, cond_));
    scale_inplace(shift, T(-1));
    add_into(x, shift);
    return x;
  }

  Tensor<T> forward_train(const Tensor<T>& x, T* logdet = nullptr) {
    check(x);
    Tensor<T> y = x;
    Tensor<T> shift = net.forward_train(gather_channels(x, cond_));
    add_into(y, shift);
    if (logdet) *logdet = T(0);
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_y, T /*grad_logdet*/ = T(0)) {
    Tensor<T> gx = grad_y;
    Tensor<T> g_cond = net.backward(gather_channels(grad_y, update_));
    Tensor<T> merged = gather_channels(gx, cond_);
    add_inplace(merged, g_cond);
    scatter_channels(gx, merged, cond_);
    return gx;
  }

  void collect(ParamList<T>& out, const std::string& prefix) { net.collect(out, prefix); }

  const std::vector<int>& cond_channels() const { return cond_; }
  const std::vector<int>& update_channels() const { return update_; }

  Net net;

 private:
  void check(const Tensor<T>& x) const {
    require_rank(x, 4, "coupling");
    if (static_cast<std::size_t>(x.dim(1)) != cond_.size() + update_.size()) {
      throw ShapeError("coupling: input has " + std::to_string(x.dim(1)) + " channels, expected " +
                       std::to_string(cond_.size() + update_.size()));
    }
  }

  void add_into(Tensor<T>& y, const Tensor<T>& shift) const {
    Tensor<T> yb = gather_channels(y, update_);
    add_inplace(yb, shift);
    scatter_channels(y, yb, update_);
  }

  std::vector<int> cond_, update_;
};

/// Channel-halves partition used by the flow-model couplings. Even steps
/// update the second half from the first, odd steps the reverse.
std::pair<std::vector<int>, std::vector<int>> halves_partition(int channels, bool swap);

template <typename T>
using GlowCoupling = AdditiveCoupling<T, ConvSubnet<T>>;

/// Builds a flow-model coupling; odd channel counts are rejected.
template <typename T>
GlowCoupling<T> make_glow_coupling(int channels, int hidden, bool swap, Rng& rng);

/// [N,C,H,W] -> [N,4C,H/2,W/2], y[n,4i+c,h,w] = x[n,i,2h+c/2,2w+c%2].
template <typename T>
Tensor<T> squeeze(const Tensor<T>& x);
template <typename T>
Tensor<T> unsqueeze(const Tensor<T>& y);

}  // namespace ageflow
