#pragma once

// Multi-scale flow encoder/decoder. Each level squeezes, applies `steps`
// (ActNorm, invertible 1x1 conv, additive coupling) blocks, then factors out
// half of the channels as a latent; the last level keeps everything.

#include <cstdint>
#include <vector>

#include "ageflow/flow_layers.hpp"

namespace ageflow {

struct GlowConfig {
  int channels = 1;
  int height = 32;
  int width = 32;
  int levels = 3;
  int steps = 8;
  int hidden = 64;
  int bins = 256;

  void validate() const;
  int dims() const { return channels * height * width; }
  /// Shape [C,H,W] of the packed single-tensor latent.
  Shape packed_shape() const;
};

template <typename T>
struct LatentState {
  std::vector<Tensor<T>> splits;  // one per level except the last
  Tensor<T> final;

  std::size_t numel() const {
    std::size_t n = final.size();
    for (const auto& s : splits) n += s.size();
    return n;
  }
  int batch() const { return final.dim(0); }
};

template <typename T>
struct FlowStep {
  ActNorm<T> actnorm;
  InvConv1x1<T> invconv;
  GlowCoupling<T> coupling;
};

template <typename T>
class GlowModel {
 public:
  GlowModel() = default;
  GlowModel(const GlowConfig& config, Rng& rng);

  const GlowConfig& config() const { return config_; }

  /// Data-dependent ActNorm init, level by level, on one batch.
  void initialize(const Tensor<T>& x);
  bool initialized() const;

  /// logdet receives the per-sample log-determinant (excluding dequantization).
  LatentState<T> encode(const Tensor<T>& x, T* logdet = nullptr) const;
  Tensor<T> decode(const LatentState<T>& z) const;

  LatentState<T> encode_train(const Tensor<T>& x, T* logdet);
  /// Backpropagates dL/dz and dL/dlogdet (summed over the batch); returns dL/dx.
  Tensor<T> backward(const LatentState<T>& grad_z, T grad_logdet);

  void collect(ParamList<T>& out, const std::string& prefix = "glow");

  std::vector<std::vector<FlowStep<T>>> levels;

 private:
  template <bool Train, typename Self>
  static LatentState<T> run_encode(Self& self, const Tensor<T>& x, T* logdet);
  void check_input(const Tensor<T>& x) const;

  GlowConfig config_;
};

/// x = (pixels + noise)/bins - 0.5; pixels in [0, bins-1], noise in [0,1).
template <typename T>
Tensor<T> preprocess(const Tensor<T>& pixels, const Tensor<T>& noise, int bins = 256);
/// Uniform dequantization noise drawn from rng.
template <typename T>
Tensor<T> preprocess(const Tensor<T>& pixels, Rng& rng, int bins = 256);
/// Bin-centre dequantization (noise = 0.5); deterministic encodes.
template <typename T>
Tensor<T> preprocess_midpoint(const Tensor<T>& pixels, int bins = 256);
/// Per-sample dequantization log-determinant, -D log(bins).
double preprocess_logdet(int dims, int bins = 256);
/// Inverse of preprocess up to the noise: floor((x + 0.5) * bins), clamped.
template <typename T>
Tensor<T> postprocess(const Tensor<T>& x, int bins = 256);

/// Standard normal log-density summed per sample, for each latent tensor.
template <typename T>
std::vector<double> gaussian_log_density(const LatentState<T>& z);

/// Per-sample negative log-likelihood in nats of preprocessed x, including
/// the dequantization term. Throws Fault naming the level/step on NaN/Inf.
template <typename T>
std::vector<double> nll(const GlowModel<T>& model, const Tensor<T>& x);

inline double bits_per_dim(double nll_nats, int dims) { return nll_nats / (dims * 0.6931471805599453); }

/// Draws z ~ N(0, temperature^2 I), decodes, and re-quantizes to pixels.
template <typename T>
Tensor<T> sample(const GlowModel<T>& model, int count, double temperature, Rng& rng);

template <typename T>
Tensor<T> pack_latent(const LatentState<T>& z);
template <typename T>
LatentState<T> unpack_latent(const Tensor<T>& packed, const GlowConfig& config);

}  // namespace ageflow
