#include "ageflow/adam.hpp"

#include <cmath>

namespace ageflow {

template <typename T>
void adam_step(Tensor<T>& param, const Tensor<T>& grad, AdamState<T>& state, double lr,
               const AdamConfig& config, std::string_view name) {
  require_same_shape(param, grad, "adam_update");
  if (state.m.shape() != param.shape()) state = AdamState<T>(param.shape());
  if (!grad.all_finite()) {
    throw Fault("non-finite gradient for parameter '" + std::string(name) + "'");
  }
  state.t += 1;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.t));
  const T b1 = static_cast<T>(config.beta1), b2 = static_cast<T>(config.beta2);
  T* p = param.data();
  T* m = state.m.data();
  T* v = state.v.data();
  const T* g = grad.data();
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = b1 * m[i] + (T(1) - b1) * g[i];
    v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
    const double m_hat = static_cast<double>(m[i]) / c1;
    const double v_hat = static_cast<double>(v[i]) / c2;
    p[i] -= static_cast<T>(lr * m_hat / (std::sqrt(v_hat) + config.epsilon));
  }
}

template void adam_step<float>(Tensor<float>&, const Tensor<float>&, AdamState<float>&, double,
                               const AdamConfig&, std::string_view);
template void adam_step<double>(Tensor<double>&, const Tensor<double>&, AdamState<double>&, double,
                                const AdamConfig&, std::string_view);

}  // namespace ageflow
