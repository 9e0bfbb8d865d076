#pragma once

// Latent-space discriminator with a shared trunk, an LSGAN score head and an
// age-classification head, plus the adversarial and classification losses.

#include <string>
#include <vector>

#include "ageflow/layers.hpp"

namespace ageflow {

template <typename T>
struct SpectralResult {
  Tensor<T> weight;  // W / sigma
  Tensor<T> u;       // left singular estimate [rows]
  Tensor<T> v;       // right singular estimate [cols]
  T sigma;
};

/// Power iteration on W [rows, cols] starting from u; returns the normalized
/// weight with the refreshed vectors and the singular value estimate u^T W v.
template <typename T>
SpectralResult<T> spectral_normalize(const Tensor<T>& weight, const Tensor<T>& u, int iters);

/// Dense layer whose effective weight is W / sigma(W). The power-iteration
/// vectors persist across steps and are refreshed by power_iterate().
template <typename T>
class SNDense {
 public:
  SNDense() = default;
  SNDense(int in, int out, Rng& rng);

  /// One power iteration on the current weight; updates u, v and sigma.
  void power_iterate(int iters = 1);
  /// sigma = u^T W v from the stored vectors, without iterating.
  void refresh_sigma();
  Tensor<T> normalized_weight() const;

  Tensor<T> forward(const Tensor<T>& x) const;
  Tensor<T> forward_train(const Tensor<T>& x);
  /// Treats u and v as constants: dW = (G - <G, W_hat> u v^T) / sigma.
  Tensor<T> backward(const Tensor<T>& grad_y);
  void collect(ParamList<T>& out, const std::string& prefix);

  Tensor<T> weight, bias, grad_weight, grad_bias;
  Tensor<T> u, v;
  T sigma = T(1);

 private:
  Tensor<T> input_;
};

struct DiscriminatorConfig {
  int input = 1024;
  int hidden = 512;
  int groups = 4;
  double slope = 0.2;
};

template <typename T>
struct DiscriminatorOutput {
  Tensor<T> score;   // [N]
  Tensor<T> logits;  // [N, groups]
};

template <typename T>
class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(const DiscriminatorConfig& config, Rng& rng);

  const DiscriminatorConfig& config() const { return config_; }

  /// Refreshes the spectral estimates of both normalized layers.
  void power_iterate(int iters = 1);
  /// Recomputes sigma from restored u, v buffers.
  void refresh_sigma();

  /// z is any [N, ...] tensor with `input` elements per sample.
  DiscriminatorOutput<T> forward(const Tensor<T>& z) const;
  DiscriminatorOutput<T> forward_train(const Tensor<T>& z);
  /// Accumulates parameter gradients; returns dL/dz in z's shape.
  Tensor<T> backward(const Tensor<T>& grad_score, const Tensor<T>& grad_logits);

  void collect(ParamList<T>& out, const std::string& prefix = "disc");
  /// Persisted power-iteration state, for checkpoints.
  std::vector<std::pair<std::string, Tensor<T>*>> buffers(const std::string& prefix = "disc");

  SNDense<T> dense1, dense2;
  Dense<T> head_gan, head_age;

 private:
  Tensor<T> flatten(const Tensor<T>& z) const;

  DiscriminatorConfig config_;
  Shape input_shape_;
  Tensor<T> a1_, a2_;
};

struct LossWeights {
  double akd = 1.0;
  double al = 1.0;
  double acl = 1.0;
  double cl = 0.01;
  double acl_d = 0.1;

  void validate() const;
};

struct GeneratorLossParts {
  double akd = 0, al = 0, acl = 0, cl = 0;
};

/// 1/2 mean((s - 1)^2)
template <typename T>
double generator_adv_loss(const Tensor<T>& scores);
template <typename T>
Tensor<T> generator_adv_loss_backward(const Tensor<T>& scores);

/// Mean softmax cross-entropy (natural log) over rows of logits [N, n].
template <typename T>
double age_cls_loss(const Tensor<T>& logits, const std::vector<int>& targets);
template <typename T>
Tensor<T> age_cls_loss_backward(const Tensor<T>& logits, const std::vector<int>& targets);

double total_generator_loss(const GeneratorLossParts& parts, const LossWeights& weights);

/// 1/2 mean((D(real) - 1)^2) + 1/2 mean(D(fake)^2) + acl_d * CE(real).
template <typename T>
double discriminator_loss(const Tensor<T>& scores_real, const Tensor<T>& scores_fake,
                          const Tensor<T>& real_logits, const std::vector<int>& real_targets,
                          const LossWeights& weights);

}  // namespace ageflow
