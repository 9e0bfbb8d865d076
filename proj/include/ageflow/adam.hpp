#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ageflow/tensor.hpp"

namespace ageflow {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
struct AdamState {
  Tensor<T> m;
  Tensor<T> v;
  std::int64_t t = 0;

  AdamState() = default;
  explicit AdamState(const Shape& shape) : m(shape), v(shape) {}
};

/// Bias-corrected Adam step applied in place. Throws Fault naming the
/// parameter when the gradient holds NaN or Inf.
template <typename T>
void adam_step(Tensor<T>& param, const Tensor<T>& grad, AdamState<T>& state, double lr,
               const AdamConfig& config = {}, std::string_view name = "");

/// Functional form of adam_step.
template <typename T>
std::pair<Tensor<T>, AdamState<T>> adam_update(const Tensor<T>& param, const Tensor<T>& grad,
                                                AdamState<T> state, double lr,
                                                const AdamConfig& config = {},
                                                std::string_view name = "") {
  Tensor<T> out = param;
  adam_step(out, grad, state, lr, config, name);
  return {std::move(out), std::move(state)};
}

/// Handle to one trainable tensor and its gradient accumulator.
template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T>* value;
  Tensor<T>* grad;
};

template <typename T>
using ParamList = std::vector<ParamRef<T>>;

template <typename T>
void zero_grads(const ParamList<T>& params) {
  for (const auto& p : params) p.grad->fill(T(0));
}

/// Adam over a fixed parameter list; moment buffers keyed by parameter name.
template <typename T>
class Adam {
 public:
  Adam(ParamList<T> params, double lr, AdamConfig config = {})
      : params_(std::move(params)), lr_(lr), config_(config) {
    for (const auto& p : params_) states_.emplace(p.name, AdamState<T>(p.value->shape()));
  }

  /// Applies one step using grads scaled by grad_scale (1/accumulation).
  void step(T grad_scale = T(1)) {
    for (const auto& p : params_) {
      Tensor<T> g = *p.grad;
      if (grad_scale != T(1)) scale_inplace(g, grad_scale);
      adam_step(*p.value, g, states_.at(p.name), lr_, config_, p.name);
    }
  }

  void zero_grad() { zero_grads(params_); }

  const ParamList<T>& params() const { return params_; }
  std::int64_t steps() const { return states_.empty() ? 0 : states_.begin()->second.t; }
  double learning_rate() const { return lr_; }

 private:
  ParamList<T> params_;
  double lr_;
  AdamConfig config_;
  std::map<std::string, AdamState<T>> states_;
};

}  // namespace ageflow
