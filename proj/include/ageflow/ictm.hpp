#pragma once

// Conditional invertible translation on packed latents. The latent and the
// spatially broadcast condition (mu, log_sigma) are concatenated into one
// tensor and pushed through m additive couplings, so the whole map is
// volume preserving and exactly invertible.

#include <string>
#include <utility>
#include <vector>

#include "ageflow/flow_layers.hpp"

namespace ageflow {

struct ICTMConfig {
  int flows = 32;
  int latent_channels = 64;
  int cond_channels = 8;  // per Gaussian parameter; the tensor carries 2x this
  int height = 4;
  int width = 4;
  int hidden = 64;
  int groups = 4;
  int prior_hidden = 32;

  void validate() const;
  int total_channels() const { return latent_channels + 2 * cond_channels; }
};

/// Batched Gaussian condition; mu and log_sigma are [N, C_cond].
template <typename T>
struct ConditionGaussian {
  Tensor<T> mu;
  Tensor<T> log_sigma;

  int batch() const { return mu.dim(0); }
  /// (mu, log_sigma) concatenated per sample: [N, 2 C_cond].
  Tensor<T> packed() const;
  static ConditionGaussian unpack(const Tensor<T>& u);
};

/// [N, n] one-hot rows from group indices.
template <typename T>
Tensor<T> one_hot(const std::vector<int>& groups, int n);

/// Dense(n -> hidden) -> ReLU -> Dense(hidden -> 2 C_cond).
template <typename T>
class PriorGenerator {
 public:
  PriorGenerator() = default;
  PriorGenerator(int groups, int hidden, int cond_channels, Rng& rng, bool zero_final = false)
      : fc1(groups, hidden, rng), fc2(hidden, 2 * cond_channels, rng, zero_final) {}

  /// Throws Fault unless every row holds exactly one 1 and zeros elsewhere.
  ConditionGaussian<T> generate(const Tensor<T>& onehot) const;
  ConditionGaussian<T> generate_train(const Tensor<T>& onehot);
  /// Accumulates parameter gradients from dL/dmu and dL/dlog_sigma.
  void backward(const ConditionGaussian<T>& grad);
  void collect(ParamList<T>& out, const std::string& prefix = "prior");

  Dense<T> fc1, fc2;

 private:
  Tensor<T> h_;
};

/// Squeeze-and-excitation gate: x * sigmoid(W2 relu(W1 avgpool(x) + b1) + b2).
template <typename T>
class ChannelAttention {
 public:
  ChannelAttention() = default;
  ChannelAttention(int channels, Rng& rng)
      : squeeze(channels, std::max(1, channels / 4), rng), excite(std::max(1, channels / 4), channels, rng) {}

  Tensor<T> forward(const Tensor<T>& x) const;
  /// Per-sample, per-channel gate values [N,C].
  Tensor<T> gate(const Tensor<T>& x) const;
  Tensor<T> forward_train(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& grad_y);
  void collect(ParamList<T>& out, const std::string& prefix);

  Dense<T> squeeze, excite;

 private:
  Tensor<T> x_, h_, g_;
};

/// conv3x3 -> ReLU -> conv3x3 -> ReLU -> channel attention -> zero-init conv3x3.
template <typename T>
class AttentionSubnet {
 public:
  AttentionSubnet() = default;
  AttentionSubnet(int in_channels, int out_channels, int hidden, Rng& rng)
      : conv1(in_channels, hidden, 3, rng), conv2(hidden, hidden, 3, rng), attention(hidden, rng),
        conv_out(hidden, out_channels, 3, rng, /*zero_init=*/true) {}

  Tensor<T> forward(const Tensor<T>& x) const;
  Tensor<T> forward_train(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& grad_y);
  void collect(ParamList<T>& out, const std::string& prefix);

  Conv2d<T> conv1, conv2;
  ChannelAttention<T> attention;
  Conv2d<T> conv_out;

 private:
  Tensor<T> h1_, h2_;
};

template <typename T>
using ICTMCoupling = AdditiveCoupling<T, AttentionSubnet<T>>;

/// Flow i updates channels with parity (i mod 2) from the other parity.
std::pair<std::vector<int>, std::vector<int>> interleaved_partition(int channels, int flow);

template <typename T>
class ICTM {
 public:
  ICTM() = default;
  ICTM(const ICTMConfig& config, Rng& rng);

  const ICTMConfig& config() const { return config_; }

  /// (z_s, condition_t) -> (z_t, recovered condition_s).
  std::pair<Tensor<T>, ConditionGaussian<T>> forward(const Tensor<T>& z,
                                                     const ConditionGaussian<T>& cond) const;
  /// (z_t, condition_s) -> (z_s, recovered condition_t).
  std::pair<Tensor<T>, ConditionGaussian<T>> inverse(const Tensor<T>& z,
                                                     const ConditionGaussian<T>& cond) const;

  /// The bijection on the combined [N, C_z + 2 C_cond, H, W] tensor.
  Tensor<T> forward_combined(const Tensor<T>& u) const;
  Tensor<T> inverse_combined(const Tensor<T>& u) const;

  std::pair<Tensor<T>, ConditionGaussian<T>> forward_train(const Tensor<T>& z,
                                                           const ConditionGaussian<T>& cond);
  /// Accumulates parameter gradients; returns (dL/dz_s, dL/dcondition_t).
  std::pair<Tensor<T>, ConditionGaussian<T>> backward(const Tensor<T>& grad_z,
                                                      const ConditionGaussian<T>& grad_cond);

  void collect(ParamList<T>& out, const std::string& prefix = "ictm");

  /// Latent plus spatially broadcast condition channels.
  Tensor<T> combine(const Tensor<T>& z, const ConditionGaussian<T>& cond) const;
  /// Latent channels and the spatially averaged condition.
  std::pair<Tensor<T>, ConditionGaussian<T>> separate(const Tensor<T>& u) const;

  std::vector<ICTMCoupling<T>> flows;

 private:

  ICTMConfig config_;
};

/// Unit-variance Gaussian NLL of recovered around true condition, summed over
/// the 2 C_cond dimensions and averaged over the batch.
template <typename T>
double consistency_loss(const ConditionGaussian<T>& recovered, const ConditionGaussian<T>& truth);
/// Gradient with respect to the recovered condition.
template <typename T>
ConditionGaussian<T> consistency_loss_backward(const ConditionGaussian<T>& recovered,
                                               const ConditionGaussian<T>& truth);

}  // namespace ageflow
