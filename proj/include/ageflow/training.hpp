#pragma once

// Stage 1 (GLOW maximum likelihood), Stage 2 (alternating ICTM + prior
// generator / discriminator updates), and the mapping between models and
// named checkpoint tensors.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "ageflow/adversary.hpp"
#include "ageflow/checkpoint.hpp"
#include "ageflow/glow_model.hpp"
#include "ageflow/ictm.hpp"
#include "ageflow/latent_semantics.hpp"
#include "ageflow/toydata.hpp"

namespace ageflow {

struct TrainConfig {
  std::uint64_t seed = 7;
  double lr_glow = 1e-5;
  double lr_ictm = 1e-5;
  double lr_disc = 1e-4;
  int micro_batch = 16;
  int accumulation = 4;
  int glow_iters = 200;
  int ictm_iters = 2000;
  LossWeights weights;
  double s = 1.0;  // manipulation scale for distillation targets and glow-manip
  std::string dataset;     // manifest.csv
  std::string checkpoint;  // output checkpoint path

  GlowConfig glow;
  int ictm_flows = 32;
  int ictm_hidden = 64;
  int cond_channels = 8;
  int prior_hidden = 32;
  int disc_hidden = 512;
  double disc_slope = 0.2;

  void validate() const;
  ICTMConfig ictm_config() const;
  DiscriminatorConfig disc_config() const;
};

/// Keys mirror the struct; nested objects "weights", "glow" and "ictm". Unknown keys fault.
TrainConfig parse_train_config(const std::string& json_text);
TrainConfig load_train_config(const std::filesystem::path& path);
std::string train_config_json(const TrainConfig& config);

// ------------------------------------------------------------ checkpoints

void store_glow(Checkpoint& ckpt, GlowModel<float>& model);
/// Throws Fault when glow tensors are missing or mis-shaped.
GlowModel<float> restore_glow(const Checkpoint& ckpt);

void store_prototypes(Checkpoint& ckpt, const PrototypeTable<float>& table);
PrototypeTable<float> restore_prototypes(const Checkpoint& ckpt);

struct Stage2Models {
  ICTM<float> ictm;
  PriorGenerator<float> prior;
  Discriminator<float> disc;
};

Stage2Models make_stage2(const TrainConfig& config, Rng& rng);
void store_stage2(Checkpoint& ckpt, Stage2Models& models);
Stage2Models restore_stage2(const Checkpoint& ckpt);

void store_train_config(Checkpoint& ckpt, const TrainConfig& config);

// ---------------------------------------------------------------- stage 1

struct GlowLogRow {
  int iter = 0;
  double loss = 0;  // mean nll in nats
  double bpd = 0;
};

struct GlowTrainResult {
  GlowModel<float> model;
  std::vector<GlowLogRow> log;
  int completed = 0;
  std::string abort_reason;  // empty unless training diverged
};

/// Mean per-sample nll (nats) of preprocessed x; adds the gradient of that
/// mean to the model's parameter gradients.
double glow_accumulate(GlowModel<float>& model, const Tensor<float>& x);

GlowTrainResult train_glow(const TrainConfig& config, const std::vector<toy::ToySample>& train,
                           const std::function<void(const GlowLogRow&)>& on_row = {});

// ---------------------------------------------------------------- stage 2

/// Midpoint-dequantized encodes, packed to [N, C, H, W].
Tensor<float> encode_images(const GlowModel<float>& glow, const std::vector<const toy::Image*>& images,
                            int batch = 64);

PrototypeTable<float> compute_prototype_stage(const GlowModel<float>& glow,
                                              const std::vector<toy::ToySample>& train);
PrototypeTable<float> compute_prototype_stage(const Tensor<float>& encodes,
                                              const std::vector<toy::ToySample>& train);

struct Stage2Batch {
  Tensor<float> z_s;
  std::vector<int> g, a, t;
};

struct GeneratorPass {
  GeneratorLossParts parts;
  double total = 0;
  Tensor<float> fakes;  // translated latents, detached
};

/// Forward and backward of the translator objective on one micro-batch.
/// Gradients accumulate into ICTM and prior generator; discriminator
/// gradients produced along the way are left for the caller to discard.
GeneratorPass generator_pass(Stage2Models& models, const PrototypeTable<float>& table, const Stage2Batch& batch,
                             const LossWeights& weights, double s);

/// Forward and backward of the discriminator objective; accumulates into D.
double discriminator_pass(Discriminator<float>& disc, const Tensor<float>& real, const std::vector<int>& real_groups,
                          const Tensor<float>& fakes, const LossWeights& weights);

struct IctmLogRow {
  int iter = 0;
  double loss = 0;  // weighted translator objective
  double akd = 0, al = 0, acl = 0, cl = 0;
  double d_loss = 0;
};

struct IctmTrainResult {
  Stage2Models models;
  std::vector<IctmLogRow> log;
  int completed = 0;
  std::string abort_reason;
};

/// phase is "T" before each translator update and "D" before each discriminator update.
using PhaseObserver = std::function<void(std::string_view phase, int iter)>;

/// G is only read through cached encodes, so its parameters cannot change.
IctmTrainResult train_ictm(const TrainConfig& config, const GlowModel<float>& glow, const PrototypeTable<float>& table,
                           const std::vector<toy::ToySample>& train,
                           const std::function<void(const IctmLogRow&)>& on_row = {},
                           const PhaseObserver& observer = {});

void write_glow_log(const std::filesystem::path& path, const std::vector<GlowLogRow>& rows);
void write_ictm_log(const std::filesystem::path& path, const std::vector<IctmLogRow>& rows);

}  // namespace ageflow
