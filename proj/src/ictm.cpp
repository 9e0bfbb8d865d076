#include "ageflow/ictm.hpp"

#include <cmath>
#include <numbers>

namespace ageflow {

void ICTMConfig::validate() const {
  if (flows < 1) throw ShapeError("ictm: flow count must be >= 1");
  if (latent_channels < 1 || cond_channels < 1 || height < 1 || width < 1 || hidden < 1 ||
      groups < 2 || prior_hidden < 1) {
    throw ShapeError("ictm: non-positive dimension in config");
  }
  if (total_channels() % 2 != 0) throw ShapeError("ictm: combined channel count must be even");
}

// ---------------------------------------------------------------- condition

template <typename T>
Tensor<T> ConditionGaussian<T>::packed() const {
  require_same_shape(mu, log_sigma, "condition");
  const int N = mu.dim(0), C = mu.dim(1);
  Tensor<T> u({N, 2 * C});
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      u[static_cast<std::size_t>(n) * 2 * C + c] = mu[static_cast<std::size_t>(n) * C + c];
      u[static_cast<std::size_t>(n) * 2 * C + C + c] = log_sigma[static_cast<std::size_t>(n) * C + c];
    }
  }
  return u;
}

template <typename T>
ConditionGaussian<T> ConditionGaussian<T>::unpack(const Tensor<T>& u) {
  require_rank(u, 2, "condition unpack");
  const int N = u.dim(0), C = u.dim(1) / 2;
  ConditionGaussian<T> g{Tensor<T>({N, C}), Tensor<T>({N, C})};
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      g.mu[static_cast<std::size_t>(n) * C + c] = u[static_cast<std::size_t>(n) * 2 * C + c];
      g.log_sigma[static_cast<std::size_t>(n) * C + c] = u[static_cast<std::size_t>(n) * 2 * C + C + c];
    }
  }
  return g;
}

template <typename T>
Tensor<T> one_hot(const std::vector<int>& groups, int n) {
  Tensor<T> out({static_cast<int>(groups.size()), n});
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (groups[i] < 0 || groups[i] >= n) throw Fault("one_hot: group " + std::to_string(groups[i]) + " out of range");
    out[i * n + groups[i]] = T(1);
  }
  return out;
}

// ---------------------------------------------------------- prior generator

namespace {

template <typename T>
void check_one_hot(const Tensor<T>& x, int groups) {
  require_rank(x, 2, "prior_generate");
  if (x.dim(1) != groups) throw ShapeError("prior_generate: expected " + std::to_string(groups) + " classes");
  for (int n = 0; n < x.dim(0); ++n) {
    int ones = 0;
    for (int k = 0; k < groups; ++k) {
      const T v = x[static_cast<std::size_t>(n) * groups + k];
      if (v == T(1)) {
        ++ones;
      } else if (v != T(0)) {
        ones = -1;
        break;
      }
    }
    if (ones != 1) throw Fault("prior_generate: row " + std::to_string(n) + " is not one-hot");
  }
}

template <typename T>
ConditionGaussian<T> split_condition(const Tensor<T>& y) {
  return ConditionGaussian<T>::unpack(y);
}

}  // namespace

template <typename T>
ConditionGaussian<T> PriorGenerator<T>::generate(const Tensor<T>& onehot) const {
  check_one_hot(onehot, fc1.in_features());
  return split_condition(fc2.forward(kernels::relu(fc1.forward(onehot))));
}

template <typename T>
ConditionGaussian<T> PriorGenerator<T>::generate_train(const Tensor<T>& onehot) {
  check_one_hot(onehot, fc1.in_features());
  h_ = fc1.forward_train(onehot);
  return split_condition(fc2.forward_train(kernels::relu(h_)));
}

template <typename T>
void PriorGenerator<T>::backward(const ConditionGaussian<T>& grad) {
  Tensor<T> g = fc2.backward(grad.packed());
  fc1.backward(kernels::relu_backward(h_, g));
}

template <typename T>
void PriorGenerator<T>::collect(ParamList<T>& out, const std::string& prefix) {
  fc1.collect(out, prefix + "/fc1");
  fc2.collect(out, prefix + "/fc2");
}

// -------------------------------------------------------- channel attention

namespace {

template <typename T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& g) {
  const int N = x.dim(0), C = x.dim(1);
  const std::size_t P = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor<T> y(x.shape());
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const T s = g[static_cast<std::size_t>(n) * C + c];
      const std::size_t off = (static_cast<std::size_t>(n) * C + c) * P;
      for (std::size_t i = 0; i < P; ++i) y[off + i] = x[off + i] * s;
    }
  }
  return y;
}

}  // namespace

template <typename T>
Tensor<T> ChannelAttention<T>::gate(const Tensor<T>& x) const {
  require_rank(x, 4, "channel_attention");
  return kernels::sigmoid(excite.forward(kernels::relu(squeeze.forward(kernels::global_avg_pool(x)))));
}

template <typename T>
Tensor<T> ChannelAttention<T>::forward(const Tensor<T>& x) const {
  return scale_channels(x, gate(x));
}

template <typename T>
Tensor<T> ChannelAttention<T>::forward_train(const Tensor<T>& x) {
  require_rank(x, 4, "channel_attention");
  x_ = x;
  h_ = squeeze.forward_train(kernels::global_avg_pool(x));
  g_ = kernels::sigmoid(excite.forward_train(kernels::relu(h_)));
  return scale_channels(x, g_);
}

template <typename T>
Tensor<T> ChannelAttention<T>::backward(const Tensor<T>& grad_y) {
  const int N = x_.dim(0), C = x_.dim(1), H = x_.dim(2), W = x_.dim(3);
  const std::size_t P = static_cast<std::size_t>(H) * W;
  Tensor<T> gx = scale_channels(grad_y, g_);
  Tensor<T> dg({N, C});
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const std::size_t off = (static_cast<std::size_t>(n) * C + c) * P;
      T acc = 0;
      for (std::size_t i = 0; i < P; ++i) acc += grad_y[off + i] * x_[off + i];
      dg[static_cast<std::size_t>(n) * C + c] = acc;
    }
  }
  Tensor<T> dh = kernels::relu_backward(h_, excite.backward(kernels::sigmoid_backward(g_, dg)));
  add_inplace(gx, kernels::global_avg_pool_backward(squeeze.backward(dh), H, W));
  return gx;
}

template <typename T>
void ChannelAttention<T>::collect(ParamList<T>& out, const std::string& prefix) {
  squeeze.collect(out, prefix + "/squeeze");
  excite.collect(out, prefix + "/excite");
}

// --------------------------------------------------------- attention subnet

template <typename T>
Tensor<T> AttentionSubnet<T>::forward(const Tensor<T>& x) const {
  Tensor<T> h = kernels::relu(conv2.forward(kernels::relu(conv1.forward(x))));
  return conv_out.forward(attention.forward(h));
}

template <typename T>
Tensor<T> AttentionSubnet<T>::forward_train(const Tensor<T>& x) {
  h1_ = conv1.forward_train(x);
  h2_ = conv2.forward_train(kernels::relu(h1_));
  return conv_out.forward_train(attention.forward_train(kernels::relu(h2_)));
}

template <typename T>
Tensor<T> AttentionSubnet<T>::backward(const Tensor<T>& grad_y) {
  Tensor<T> g = attention.backward(conv_out.backward(grad_y));
  g = kernels::relu_backward(h2_, g);
  g = kernels::relu_backward(h1_, conv2.backward(g));
  return conv1.backward(g);
}

template <typename T>
void AttentionSubnet<T>::collect(ParamList<T>& out, const std::string& prefix) {
  conv1.collect(out, prefix + "/conv1");
  conv2.collect(out, prefix + "/conv2");
  attention.collect(out, prefix + "/attention");
  conv_out.collect(out, prefix + "/conv_out");
}

// --------------------------------------------------------------------- ICTM

std::pair<std::vector<int>, std::vector<int>> interleaved_partition(int channels, int flow) {
  if (channels % 2 != 0) throw ShapeError("ictm: channel count " + std::to_string(channels) + " is odd");
  const int p = flow % 2;
  std::vector<int> cond, update;
  for (int c = 0; c < channels; ++c) (c % 2 == p ? update : cond).push_back(c);
  return {cond, update};
}

template <typename T>
ICTM<T>::ICTM(const ICTMConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  const int C = config_.total_channels();
  for (int i = 0; i < config_.flows; ++i) {
    auto [cond, update] = interleaved_partition(C, i);
    AttentionSubnet<T> net(static_cast<int>(cond.size()), static_cast<int>(update.size()), config_.hidden, rng);
    flows.emplace_back(std::move(cond), std::move(update), std::move(net));
  }
}

template <typename T>
Tensor<T> ICTM<T>::combine(const Tensor<T>& z, const ConditionGaussian<T>& cond) const {
  require_rank(z, 4, "ictm latent");
  const int N = z.dim(0), Cz = config_.latent_channels, Cc = config_.cond_channels;
  const int H = config_.height, W = config_.width;
  if (z.dim(1) != Cz || z.dim(2) != H || z.dim(3) != W) {
    throw Fault("ictm: latent " + shape_string(z.shape()) + " does not match config [N," +
                std::to_string(Cz) + "," + std::to_string(H) + "," + std::to_string(W) + "]");
  }
  if (cond.mu.shape() != Shape{N, Cc} || cond.log_sigma.shape() != Shape{N, Cc}) {
    throw Fault("ictm: condition shape does not match config");
  }
  const std::size_t P = static_cast<std::size_t>(H) * W;
  const int C = config_.total_channels();
  Tensor<T> u({N, C, H, W});
  for (int n = 0; n < N; ++n) {
    std::copy_n(z.data() + static_cast<std::size_t>(n) * Cz * P, Cz * P, u.data() + static_cast<std::size_t>(n) * C * P);
    for (int c = 0; c < Cc; ++c) {
      T* mu_dst = u.data() + (static_cast<std::size_t>(n) * C + Cz + c) * P;
      T* ls_dst = u.data() + (static_cast<std::size_t>(n) * C + Cz + Cc + c) * P;
      std::fill_n(mu_dst, P, cond.mu[static_cast<std::size_t>(n) * Cc + c]);
      std::fill_n(ls_dst, P, cond.log_sigma[static_cast<std::size_t>(n) * Cc + c]);
    }
  }
  return u;
}

template <typename T>
std::pair<Tensor<T>, ConditionGaussian<T>> ICTM<T>::separate(const Tensor<T>& u) const {
  const int N = u.dim(0), Cz = config_.latent_channels, Cc = config_.cond_channels;
  const int H = config_.height, W = config_.width, C = config_.total_channels();
  const std::size_t P = static_cast<std::size_t>(H) * W;
  Tensor<T> z({N, Cz, H, W});
  ConditionGaussian<T> cond{Tensor<T>({N, Cc}), Tensor<T>({N, Cc})};
  // v0 + mean(v - v0): exact when the channel is spatially constant.
  auto average = [&](const T* v) {
    T acc = 0;
    for (std::size_t i = 1; i < P; ++i) acc += v[i] - v[0];
    return v[0] + acc / static_cast<T>(P);
  };
  for (int n = 0; n < N; ++n) {
    std::copy_n(u.data() + static_cast<std::size_t>(n) * C * P, Cz * P, z.data() + static_cast<std::size_t>(n) * Cz * P);
    for (int c = 0; c < Cc; ++c) {
      cond.mu[static_cast<std::size_t>(n) * Cc + c] = average(u.data() + (static_cast<std::size_t>(n) * C + Cz + c) * P);
      cond.log_sigma[static_cast<std::size_t>(n) * Cc + c] =
          average(u.data() + (static_cast<std::size_t>(n) * C + Cz + Cc + c) * P);
    }
  }
  return {std::move(z), std::move(cond)};
}

template <typename T>
Tensor<T> ICTM<T>::forward_combined(const Tensor<T>& u) const {
  Tensor<T> h = u;
  for (const auto& f : flows) h = f.forward(h);
  return h;
}

template <typename T>
Tensor<T> ICTM<T>::inverse_combined(const Tensor<T>& u) const {
  Tensor<T> h = u;
  for (auto it = flows.rbegin(); it != flows.rend(); ++it) h = it->inverse(h);
  return h;
}

template <typename T>
std::pair<Tensor<T>, ConditionGaussian<T>> ICTM<T>::forward(const Tensor<T>& z,
                                                            const ConditionGaussian<T>& cond) const {
  return separate(forward_combined(combine(z, cond)));
}

template <typename T>
std::pair<Tensor<T>, ConditionGaussian<T>> ICTM<T>::inverse(const Tensor<T>& z,
                                                            const ConditionGaussian<T>& cond) const {
  return separate(inverse_combined(combine(z, cond)));
}

template <typename T>
std::pair<Tensor<T>, ConditionGaussian<T>> ICTM<T>::forward_train(const Tensor<T>& z,
                                                                  const ConditionGaussian<T>& cond) {
  Tensor<T> h = combine(z, cond);
  for (auto& f : flows) h = f.forward_train(h);
  if (!h.all_finite()) throw Fault("ictm: non-finite output");
  return separate(h);
}

template <typename T>
std::pair<Tensor<T>, ConditionGaussian<T>> ICTM<T>::backward(const Tensor<T>& grad_z,
                                                             const ConditionGaussian<T>& grad_cond) {
  const int N = grad_z.dim(0), Cz = config_.latent_channels, Cc = config_.cond_channels;
  const int H = config_.height, W = config_.width, C = config_.total_channels();
  const std::size_t P = static_cast<std::size_t>(H) * W;
  const T inv_p = T(1) / static_cast<T>(P);
  Tensor<T> g({N, C, H, W});
  for (int n = 0; n < N; ++n) {
    std::copy_n(grad_z.data() + static_cast<std::size_t>(n) * Cz * P, Cz * P, g.data() + static_cast<std::size_t>(n) * C * P);
    for (int c = 0; c < Cc; ++c) {
      std::fill_n(g.data() + (static_cast<std::size_t>(n) * C + Cz + c) * P, P,
                  grad_cond.mu[static_cast<std::size_t>(n) * Cc + c] * inv_p);
      std::fill_n(g.data() + (static_cast<std::size_t>(n) * C + Cz + Cc + c) * P, P,
                  grad_cond.log_sigma[static_cast<std::size_t>(n) * Cc + c] * inv_p);
    }
  }
  for (auto it = flows.rbegin(); it != flows.rend(); ++it) g = it->backward(g);
  // Broadcast backward: sum over space.
  Tensor<T> gz({N, Cz, H, W});
  ConditionGaussian<T> gc{Tensor<T>({N, Cc}), Tensor<T>({N, Cc})};
  for (int n = 0; n < N; ++n) {
    std::copy_n(g.data() + static_cast<std::size_t>(n) * C * P, Cz * P, gz.data() + static_cast<std::size_t>(n) * Cz * P);
    for (int c = 0; c < Cc; ++c) {
      const T* gm = g.data() + (static_cast<std::size_t>(n) * C + Cz + c) * P;
      const T* gl = g.data() + (static_cast<std::size_t>(n) * C + Cz + Cc + c) * P;
      T sm = 0, sl = 0;
      for (std::size_t i = 0; i < P; ++i) {
        sm += gm[i];
        sl += gl[i];
      }
      gc.mu[static_cast<std::size_t>(n) * Cc + c] = sm;
      gc.log_sigma[static_cast<std::size_t>(n) * Cc + c] = sl;
    }
  }
  return {std::move(gz), std::move(gc)};
}

template <typename T>
void ICTM<T>::collect(ParamList<T>& out, const std::string& prefix) {
  for (std::size_t i = 0; i < flows.size(); ++i) flows[i].collect(out, prefix + "/" + std::to_string(i));
}

// ------------------------------------------------------------- consistency

template <typename T>
double consistency_loss(const ConditionGaussian<T>& recovered, const ConditionGaussian<T>& truth) {
  const Tensor<T> a = recovered.packed(), b = truth.packed();
  require_same_shape(a, b, "consistency_loss");
  const int N = a.dim(0), D = a.dim(1);
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  double total = 0;
  for (int n = 0; n < N; ++n) {
    double acc = 0;
    for (int d = 0; d < D; ++d) {
      const double diff = static_cast<double>(a[static_cast<std::size_t>(n) * D + d]) - b[static_cast<std::size_t>(n) * D + d];
      acc += 0.5 * diff * diff + half_log_2pi;
    }
    total += acc;
  }
  return total / N;
}

template <typename T>
ConditionGaussian<T> consistency_loss_backward(const ConditionGaussian<T>& recovered,
                                               const ConditionGaussian<T>& truth) {
  require_same_shape(recovered.mu, truth.mu, "consistency_loss");
  require_same_shape(recovered.log_sigma, truth.log_sigma, "consistency_loss");
  const T inv_n = T(1) / static_cast<T>(recovered.batch());
  ConditionGaussian<T> g{Tensor<T>(recovered.mu.shape()), Tensor<T>(recovered.log_sigma.shape())};
  for (std::size_t i = 0; i < g.mu.size(); ++i) {
    g.mu[i] = (recovered.mu[i] - truth.mu[i]) * inv_n;
    g.log_sigma[i] = (recovered.log_sigma[i] - truth.log_sigma[i]) * inv_n;
  }
  return g;
}

#define AGEFLOW_INSTANTIATE_ICTM(T)                                                         \
  template struct ConditionGaussian<T>;                                                     \
  template Tensor<T> one_hot<T>(const std::vector<int>&, int);                              \
  template class PriorGenerator<T>;                                                         \
  template class ChannelAttention<T>;                                                       \
  template class AttentionSubnet<T>;                                                        \
  template class ICTM<T>;                                                                   \
  template double consistency_loss<T>(const ConditionGaussian<T>&, const ConditionGaussian<T>&); \
  template ConditionGaussian<T> consistency_loss_backward<T>(const ConditionGaussian<T>&,   \
                                                             const ConditionGaussian<T>&);

AGEFLOW_INSTANTIATE_ICTM(float)
AGEFLOW_INSTANTIATE_ICTM(double)

}  // namespace ageflow
