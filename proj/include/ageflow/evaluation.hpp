#pragma once

// End-to-end translation (encode, pack, latent edit, unpack, decode) and the
// toy-oracle evaluation report.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ageflow/training.hpp"

namespace ageflow {

enum class TranslateMode { Ictm, IctmInverse, GlowManip, GlowAttrManip };

/// Accepts "ictm", "ictm-inverse", "glow-manip", "glow-attr-manip"; throws Fault otherwise.
TranslateMode parse_mode(std::string_view name);
std::string mode_name(TranslateMode mode);

/// Frozen models loaded from one checkpoint. Modules absent from the
/// checkpoint stay empty and fault only when a mode needs them.
struct Pipeline {
  GlowModel<float> glow;
  std::optional<PrototypeTable<float>> prototypes;
  std::optional<Stage2Models> stage2;
  double s = 1.0;

  static Pipeline from_checkpoint(const Checkpoint& ckpt);
  void require(TranslateMode mode) const;
};

struct TranslateBatch {
  Tensor<float> x;  // decoded output, pre-quantization, [N,C,H,W] in preprocessed units
  /// ICTM modes: spatially averaged recovered condition and the raw
  /// per-position condition channels [N, 2 C_cond, H, W].
  std::optional<ConditionGaussian<float>> recovered;
  Tensor<float> condition_channels;
  std::vector<int> recovered_group;  // nearest prior output; -1 for GLOW modes
};

struct TranslateOptions {
  std::vector<int> targets;
  std::vector<int> sources;  // required by the GLOW modes
  std::vector<int> attrs;    // required by glow-attr-manip
  std::optional<double> s;   // defaults to the pipeline's scale
  /// ictm-inverse only: exact condition channels from a forward pass
  /// instead of the broadcast prior output.
  const Tensor<float>* condition_channels = nullptr;
};

/// x is a preprocessed batch [N,C,H,W].
TranslateBatch translate_batch(const Pipeline& pipeline, const Tensor<float>& x, TranslateMode mode,
                               const TranslateOptions& options);

struct TranslatedImage {
  toy::Image image;
  int recovered_group = -1;
};

/// Midpoint-dequantizes, translates, re-quantizes with clamping. A negative
/// source or attr is filled in from the toy oracles.
TranslatedImage translate_image(const Pipeline& pipeline, const toy::Image& image, int target, TranslateMode mode,
                                int source = -1, int attr = -1, std::optional<double> s = std::nullopt);

struct PairStats {
  int source = 0, target = 0;
  int count = 0;
  int age_hits = 0;
  int attr_hits = 0;
  int faults = 0;  // outputs with an empty foreground
  double centroid_sum = 0;
  double cosine_sum = 0;

  double age_accuracy() const;
  double attr_preservation() const;
  double centroid_displacement() const;
  double cosine() const;
  bool operator==(const PairStats&) const = default;
};

struct EvalReport {
  std::string mode;
  std::vector<PairStats> pairs;  // every (g, g') with g != g', source-major

  /// Means over pairs of the per-pair percentages and averages.
  double age_accuracy() const;
  double attr_preservation() const;
  double centroid_displacement() const;
  double cosine() const;
  int total() const;

  std::string csv() const;
  /// Aligned text: one source-by-target block per metric.
  std::string table() const;
  bool operator==(const EvalReport&) const = default;
};

/// Returns one output image per (sample, target) request.
using Translator =
    std::function<std::vector<toy::Image>(const std::vector<const toy::ToySample*>&, const std::vector<int>&)>;

/// Every test sample is sent to every other group. Throws Fault on an empty split.
EvalReport evaluate(const std::vector<toy::ToySample>& test, const Translator& translator, const std::string& label,
                    int batch = 64);
EvalReport evaluate(const Pipeline& pipeline, const std::vector<toy::ToySample>& test, TranslateMode mode,
                    int batch = 64);

}  // namespace ageflow
