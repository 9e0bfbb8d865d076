#include "ageflow/training.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "ageflow/adam.hpp"
#include "json.hpp"

namespace ageflow {

using json = nlohmann::json;

// ------------------------------------------------------------------ config

void TrainConfig::validate() const {
  if (!(lr_glow > 0) || !(lr_ictm > 0) || !(lr_disc > 0)) throw Fault("config: learning rates must be positive");
  if (micro_batch < 1) throw Fault("config: micro_batch must be >= 1");
  if (accumulation < 1) throw Fault("config: accumulation must be >= 1");
  if (glow_iters < 0 || ictm_iters < 0) throw Fault("config: iteration counts must be >= 0");
  if (seed >= (std::uint64_t{1} << 53)) throw Fault("config: seed must be below 2^53");
  if (!std::isfinite(s)) throw Fault("config: s must be finite");
  try {
    weights.validate();
    glow.validate();
    ictm_config().validate();
  } catch (const ShapeError& e) {
    throw Fault(std::string("config: ") + e.what());
  }
  if (disc_hidden < 1 || disc_slope < 0) throw Fault("config: invalid discriminator settings");
}

ICTMConfig TrainConfig::ictm_config() const {
  const Shape packed = glow.packed_shape();
  ICTMConfig c;
  c.flows = ictm_flows;
  c.latent_channels = packed[0];
  c.height = packed[1];
  c.width = packed[2];
  c.cond_channels = cond_channels;
  c.hidden = ictm_hidden;
  c.groups = toy::kGroups;
  c.prior_hidden = prior_hidden;
  return c;
}

DiscriminatorConfig TrainConfig::disc_config() const {
  DiscriminatorConfig d;
  d.input = static_cast<int>(shape_numel(glow.packed_shape()));
  d.hidden = disc_hidden;
  d.groups = toy::kGroups;
  d.slope = disc_slope;
  return d;
}

namespace {

template <typename V>
void read_key(const json& obj, const char* key, V& out, std::vector<std::string>& seen) {
  seen.emplace_back(key);
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<V>();
  } catch (const json::exception& e) {
    throw Fault(std::string("config: bad value for '") + key + "': " + e.what());
  }
}

void reject_unknown(const json& obj, const std::vector<std::string>& seen, const std::string& where) {
  for (const auto& [k, v] : obj.items()) {
    if (std::find(seen.begin(), seen.end(), k) == seen.end()) throw Fault("config: unknown key '" + where + k + "'");
  }
}

}  // namespace

TrainConfig parse_train_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw Fault(std::string("config: invalid JSON: ") + e.what());
  }
  if (!root.is_object()) throw Fault("config: top level must be an object");
  TrainConfig c;
  std::vector<std::string> seen;
  read_key(root, "seed", c.seed, seen);
  read_key(root, "lr_glow", c.lr_glow, seen);
  read_key(root, "lr_ictm", c.lr_ictm, seen);
  read_key(root, "lr_disc", c.lr_disc, seen);
  read_key(root, "micro_batch", c.micro_batch, seen);
  read_key(root, "accumulation", c.accumulation, seen);
  read_key(root, "glow_iters", c.glow_iters, seen);
  read_key(root, "ictm_iters", c.ictm_iters, seen);
  read_key(root, "s", c.s, seen);
  read_key(root, "dataset", c.dataset, seen);
  read_key(root, "checkpoint", c.checkpoint, seen);
  seen.emplace_back("weights");
  seen.emplace_back("glow");
  seen.emplace_back("ictm");
  reject_unknown(root, seen, "");

  if (root.contains("weights")) {
    const json& w = root["weights"];
    std::vector<std::string> ws;
    read_key(w, "akd", c.weights.akd, ws);
    read_key(w, "al", c.weights.al, ws);
    read_key(w, "acl", c.weights.acl, ws);
    read_key(w, "cl", c.weights.cl, ws);
    read_key(w, "acl_d", c.weights.acl_d, ws);
    reject_unknown(w, ws, "weights.");
  }
  if (root.contains("glow")) {
    const json& g = root["glow"];
    std::vector<std::string> gs;
    read_key(g, "channels", c.glow.channels, gs);
    read_key(g, "height", c.glow.height, gs);
    read_key(g, "width", c.glow.width, gs);
    read_key(g, "levels", c.glow.levels, gs);
    read_key(g, "steps", c.glow.steps, gs);
    read_key(g, "hidden", c.glow.hidden, gs);
    read_key(g, "bins", c.glow.bins, gs);
    reject_unknown(g, gs, "glow.");
  }
  if (root.contains("ictm")) {
    const json& i = root["ictm"];
    std::vector<std::string> is;
    read_key(i, "flows", c.ictm_flows, is);
    read_key(i, "hidden", c.ictm_hidden, is);
    read_key(i, "cond_channels", c.cond_channels, is);
    read_key(i, "prior_hidden", c.prior_hidden, is);
    read_key(i, "disc_hidden", c.disc_hidden, is);
    read_key(i, "disc_slope", c.disc_slope, is);
    reject_unknown(i, is, "ictm.");
  }
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Fault("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_train_config(ss.str());
}

std::string train_config_json(const TrainConfig& c) {
  json j = {{"seed", c.seed},
            {"lr_glow", c.lr_glow},
            {"lr_ictm", c.lr_ictm},
            {"lr_disc", c.lr_disc},
            {"micro_batch", c.micro_batch},
            {"accumulation", c.accumulation},
            {"glow_iters", c.glow_iters},
            {"ictm_iters", c.ictm_iters},
            {"s", c.s},
            {"dataset", c.dataset},
            {"checkpoint", c.checkpoint},
            {"weights",
             {{"akd", c.weights.akd}, {"al", c.weights.al}, {"acl", c.weights.acl}, {"cl", c.weights.cl},
              {"acl_d", c.weights.acl_d}}},
            {"glow",
             {{"channels", c.glow.channels},
              {"height", c.glow.height},
              {"width", c.glow.width},
              {"levels", c.glow.levels},
              {"steps", c.glow.steps},
              {"hidden", c.glow.hidden},
              {"bins", c.glow.bins}}},
            {"ictm",
             {{"flows", c.ictm_flows},
              {"hidden", c.ictm_hidden},
              {"cond_channels", c.cond_channels},
              {"prior_hidden", c.prior_hidden},
              {"disc_hidden", c.disc_hidden},
              {"disc_slope", c.disc_slope}}}};
  return j.dump(2);
}

// ------------------------------------------------------------- checkpoints

namespace {

std::vector<double> glow_meta(const GlowConfig& g) {
  return {double(g.channels), double(g.height), double(g.width), double(g.levels),
          double(g.steps),    double(g.hidden), double(g.bins)};
}

int as_int(double v, const char* what) {
  if (v != std::floor(v) || std::abs(v) > 1e9) throw Fault(std::string("checkpoint: bad integer in ") + what);
  return static_cast<int>(v);
}

void store_params(Checkpoint& ckpt, const ParamList<float>& params) {
  for (const auto& p : params) ckpt.put(p.name, *p.value);
}

void restore_params(const Checkpoint& ckpt, const ParamList<float>& params) {
  for (const auto& p : params) *p.value = ckpt.get_f32(p.name, p.value->shape());
}

std::string step_prefix(std::size_t l, std::size_t s) {
  return "glow/" + std::to_string(l) + "/" + std::to_string(s);
}

}  // namespace

void store_glow(Checkpoint& ckpt, GlowModel<float>& model) {
  ckpt.put_vector("meta/glow_config", glow_meta(model.config()));
  ckpt.put_scalar("meta/glow_initialized", model.initialized() ? 1.0 : 0.0);
  ParamList<float> params;
  model.collect(params, "glow");
  store_params(ckpt, params);
  for (std::size_t l = 0; l < model.levels.size(); ++l)
    for (std::size_t s = 0; s < model.levels[l].size(); ++s) {
      const auto& ic = model.levels[l][s].invconv;
      ckpt.put_vector(step_prefix(l, s) + "/invconv/perm", std::vector<double>(ic.perm.begin(), ic.perm.end()));
      ckpt.put(step_prefix(l, s) + "/invconv/sign", ic.sign);
    }
}

GlowModel<float> restore_glow(const Checkpoint& ckpt) {
  const auto m = ckpt.get_vector("meta/glow_config");
  if (m.size() != 7) throw Fault("checkpoint: meta/glow_config has wrong length");
  GlowConfig cfg;
  cfg.channels = as_int(m[0], "glow_config");
  cfg.height = as_int(m[1], "glow_config");
  cfg.width = as_int(m[2], "glow_config");
  cfg.levels = as_int(m[3], "glow_config");
  cfg.steps = as_int(m[4], "glow_config");
  cfg.hidden = as_int(m[5], "glow_config");
  cfg.bins = as_int(m[6], "glow_config");
  try {
    cfg.validate();
  } catch (const ShapeError& e) {
    throw Fault(std::string("checkpoint: invalid glow config: ") + e.what());
  }
  Rng dummy(0);
  GlowModel<float> model(cfg, dummy);
  ParamList<float> params;
  model.collect(params, "glow");
  restore_params(ckpt, params);
  const bool initialized = ckpt.get_scalar("meta/glow_initialized") != 0.0;
  for (std::size_t l = 0; l < model.levels.size(); ++l)
    for (std::size_t s = 0; s < model.levels[l].size(); ++s) {
      auto& step = model.levels[l][s];
      const auto perm = ckpt.get_vector(step_prefix(l, s) + "/invconv/perm");
      if (perm.size() != step.invconv.perm.size()) throw Fault("checkpoint: permutation length mismatch");
      std::vector<bool> used(perm.size(), false);
      for (std::size_t i = 0; i < perm.size(); ++i) {
        const int p = as_int(perm[i], "invconv/perm");
        if (p < 0 || p >= static_cast<int>(perm.size()) || used[p]) {
          throw Fault("checkpoint: " + step_prefix(l, s) + "/invconv/perm is not a permutation");
        }
        used[p] = true;
        step.invconv.perm[i] = p;
      }
      step.invconv.sign = ckpt.get_f32(step_prefix(l, s) + "/invconv/sign", step.invconv.sign.shape());
      if (initialized) step.actnorm.mark_initialized();
    }
  return model;
}

void store_prototypes(Checkpoint& ckpt, const PrototypeTable<float>& table) {
  ckpt.erase_prefix("proto/");
  std::vector<double> counts;
  for (int g = 0; g < table.groups(); ++g)
    for (int a = 0; a < table.attributes(); ++a) {
      counts.push_back(table.count(g, a));
      if (table.has(g, a)) ckpt.put("proto/" + std::to_string(g) + "/" + std::to_string(a), table.at(g, a));
    }
  const Shape& s = table.latent_shape();
  ckpt.put_vector("proto/meta", {double(table.groups()), double(table.attributes()), double(s[0]), double(s[1]),
                                 double(s[2])});
  ckpt.put_vector("proto/counts", counts);
}

PrototypeTable<float> restore_prototypes(const Checkpoint& ckpt) {
  const auto meta = ckpt.get_vector("proto/meta");
  if (meta.size() != 5) throw Fault("checkpoint: proto/meta has wrong length");
  const int groups = as_int(meta[0], "proto/meta"), attrs = as_int(meta[1], "proto/meta");
  const Shape shape{as_int(meta[2], "proto/meta"), as_int(meta[3], "proto/meta"), as_int(meta[4], "proto/meta")};
  const auto counts = ckpt.get_vector("proto/counts");
  if (counts.size() != static_cast<std::size_t>(groups * attrs)) throw Fault("checkpoint: proto/counts length");
  PrototypeTable<float> table(groups, attrs, shape);
  for (int g = 0; g < groups; ++g)
    for (int a = 0; a < attrs; ++a) {
      const int n = as_int(counts[g * attrs + a], "proto/counts");
      if (n > 0) table.set(g, a, ckpt.get_f32("proto/" + std::to_string(g) + "/" + std::to_string(a), shape), n);
    }
  return table;
}

Stage2Models make_stage2(const TrainConfig& config, Rng& rng) {
  const ICTMConfig ic = config.ictm_config();
  Stage2Models m;
  m.ictm = ICTM<float>(ic, rng);
  m.prior = PriorGenerator<float>(ic.groups, ic.prior_hidden, ic.cond_channels, rng);
  m.disc = Discriminator<float>(config.disc_config(), rng);
  return m;
}

void store_stage2(Checkpoint& ckpt, Stage2Models& m) {
  const ICTMConfig& ic = m.ictm.config();
  ckpt.put_vector("meta/ictm_config", {double(ic.flows), double(ic.latent_channels), double(ic.cond_channels),
                                       double(ic.height), double(ic.width), double(ic.hidden), double(ic.groups),
                                       double(ic.prior_hidden)});
  const DiscriminatorConfig& dc = m.disc.config();
  ckpt.put_vector("meta/disc_config", {double(dc.input), double(dc.hidden), double(dc.groups), dc.slope});
  ParamList<float> params;
  m.ictm.collect(params, "ictm");
  m.prior.collect(params, "prior");
  m.disc.collect(params, "disc");
  store_params(ckpt, params);
  for (const auto& [name, t] : m.disc.buffers("disc")) ckpt.put(name, *t);
}

Stage2Models restore_stage2(const Checkpoint& ckpt) {
  const auto im = ckpt.get_vector("meta/ictm_config");
  const auto dm = ckpt.get_vector("meta/disc_config");
  if (im.size() != 8 || dm.size() != 4) throw Fault("checkpoint: malformed stage-2 metadata");
  ICTMConfig ic;
  ic.flows = as_int(im[0], "ictm_config");
  ic.latent_channels = as_int(im[1], "ictm_config");
  ic.cond_channels = as_int(im[2], "ictm_config");
  ic.height = as_int(im[3], "ictm_config");
  ic.width = as_int(im[4], "ictm_config");
  ic.hidden = as_int(im[5], "ictm_config");
  ic.groups = as_int(im[6], "ictm_config");
  ic.prior_hidden = as_int(im[7], "ictm_config");
  DiscriminatorConfig dc;
  dc.input = as_int(dm[0], "disc_config");
  dc.hidden = as_int(dm[1], "disc_config");
  dc.groups = as_int(dm[2], "disc_config");
  dc.slope = dm[3];
  Stage2Models m;
  Rng dummy(0);
  try {
    m.ictm = ICTM<float>(ic, dummy);
  } catch (const ShapeError& e) {
    throw Fault(std::string("checkpoint: invalid ictm config: ") + e.what());
  }
  m.prior = PriorGenerator<float>(ic.groups, ic.prior_hidden, ic.cond_channels, dummy);
  m.disc = Discriminator<float>(dc, dummy);
  ParamList<float> params;
  m.ictm.collect(params, "ictm");
  m.prior.collect(params, "prior");
  m.disc.collect(params, "disc");
  restore_params(ckpt, params);
  for (const auto& [name, t] : m.disc.buffers("disc")) *t = ckpt.get_f32(name, t->shape());
  m.disc.refresh_sigma();
  return m;
}

void store_train_config(Checkpoint& ckpt, const TrainConfig& c) {
  ckpt.put_vector("meta/train", {double(c.seed), c.lr_glow, c.lr_ictm, c.lr_disc, double(c.micro_batch),
                                 double(c.accumulation), double(c.glow_iters), double(c.ictm_iters), c.weights.akd,
                                 c.weights.al, c.weights.acl, c.weights.cl, c.weights.acl_d, c.s});
}

// ----------------------------------------------------------------- stage 1

namespace {

std::vector<const toy::Image*> pick(const std::vector<toy::ToySample>& data, const std::vector<int>& idx) {
  std::vector<const toy::Image*> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(&data[i].image);
  return out;
}

std::vector<int> draw_indices(Rng& rng, int count, int n) {
  std::vector<int> idx(count);
  for (auto& i : idx) i = rng.uniform_int(0, n - 1);
  return idx;
}

bool all_finite(const ParamList<float>& params) {
  for (const auto& p : params)
    for (float v : p.value->values())
      if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace

double glow_accumulate(GlowModel<float>& model, const Tensor<float>& x) {
  float logdet = 0;
  LatentState<float> z = model.encode_train(x, &logdet);
  const std::vector<double> logp = gaussian_log_density(z);
  const int N = x.dim(0);
  const double pre = preprocess_logdet(model.config().dims(), model.config().bins);
  double mean = 0;
  for (double lp : logp) mean += -(lp + logdet + pre);
  mean /= N;
  if (!std::isfinite(mean)) throw Fault("glow: non-finite nll");
  // d(mean nll)/dz = z / N; the per-sample logdet enters every sample with -1/N.
  LatentState<float> g = z;
  const float inv = 1.0f / N;
  for (auto& s : g.splits) scale_inplace(s, inv);
  scale_inplace(g.final, inv);
  model.backward(g, -1.0f);
  return mean;
}

GlowTrainResult train_glow(const TrainConfig& config, const std::vector<toy::ToySample>& train,
                           const std::function<void(const GlowLogRow&)>& on_row) {
  config.validate();
  if (train.empty()) throw Fault("train_glow: empty training set");
  const Rng root(config.seed);
  Rng init_rng = root.fork(1);
  Rng data_rng = root.fork(2);

  GlowTrainResult result;
  result.model = GlowModel<float>(config.glow, init_rng);
  GlowModel<float>& model = result.model;
  {
    const int n = std::min<int>(static_cast<int>(train.size()), config.micro_batch * config.accumulation);
    const auto idx = draw_indices(init_rng, n, static_cast<int>(train.size()));
    model.initialize(preprocess(toy::to_tensor<float>(pick(train, idx)), init_rng, config.glow.bins));
  }

  ParamList<float> params;
  model.collect(params, "glow");
  Adam<float> opt(params, config.lr_glow);
  const float scale = 1.0f / config.accumulation;
  GlowModel<float> last_good = model;

  for (int it = 0; it < config.glow_iters; ++it) {
    opt.zero_grad();
    double loss = 0;
    try {
      for (int k = 0; k < config.accumulation; ++k) {
        const auto idx = draw_indices(data_rng, config.micro_batch, static_cast<int>(train.size()));
        const Tensor<float> x = preprocess(toy::to_tensor<float>(pick(train, idx)), data_rng, config.glow.bins);
        loss += glow_accumulate(model, x) / config.accumulation;
      }
      opt.step(scale);
      if (!all_finite(params)) throw Fault("glow: parameters became non-finite");
    } catch (const Fault& e) {
      result.abort_reason = "iteration " + std::to_string(it) + ": " + e.what();
      model = last_good;
      return result;
    }
    last_good = model;
    GlowLogRow row{it, loss, bits_per_dim(loss, config.glow.dims())};
    result.log.push_back(row);
    result.completed = it + 1;
    if (on_row) on_row(row);
  }
  return result;
}

// ----------------------------------------------------------------- stage 2

Tensor<float> encode_images(const GlowModel<float>& glow, const std::vector<const toy::Image*>& images, int batch) {
  if (images.empty()) throw Fault("encode_images: no images");
  const Shape packed = glow.config().packed_shape();
  const int N = static_cast<int>(images.size());
  const std::size_t per = shape_numel(packed);
  Tensor<float> out({N, packed[0], packed[1], packed[2]});
  for (int start = 0; start < N; start += batch) {
    const int end = std::min(N, start + batch);
    std::vector<const toy::Image*> chunk(images.begin() + start, images.begin() + end);
    const Tensor<float> x = preprocess_midpoint(toy::to_tensor<float>(chunk), glow.config().bins);
    const Tensor<float> z = pack_latent(glow.encode(x));
    std::copy(z.values().begin(), z.values().end(), out.data() + start * per);
  }
  return out;
}

PrototypeTable<float> compute_prototype_stage(const Tensor<float>& encodes, const std::vector<toy::ToySample>& train) {
  std::vector<int> g, a;
  for (const auto& s : train) {
    g.push_back(s.g);
    a.push_back(s.a);
  }
  return compute_prototypes(encodes, g, a, toy::kGroups, toy::kAttrs);
}

PrototypeTable<float> compute_prototype_stage(const GlowModel<float>& glow, const std::vector<toy::ToySample>& train) {
  std::vector<const toy::Image*> images;
  for (const auto& s : train) images.push_back(&s.image);
  return compute_prototype_stage(encode_images(glow, images), train);
}

GeneratorPass generator_pass(Stage2Models& m, const PrototypeTable<float>& table, const Stage2Batch& b,
                             const LossWeights& w, double s) {
  const int groups = m.ictm.config().groups;
  const ConditionGaussian<float> cond_t = m.prior.generate_train(one_hot<float>(b.t, groups));
  // Source condition is a fixed target for the consistency term.
  const ConditionGaussian<float> cond_s = m.prior.generate(one_hot<float>(b.g, groups));
  auto [z_t, rec] = m.ictm.forward_train(b.z_s, cond_t);

  const Tensor<float> target = akd_target(b.z_s, table, b.g, b.t, b.a, s);
  GeneratorPass out;
  out.parts.akd = akd_loss(z_t, target);
  const DiscriminatorOutput<float> d = m.disc.forward_train(z_t);
  out.parts.al = generator_adv_loss(d.score);
  out.parts.acl = age_cls_loss(d.logits, b.t);
  out.parts.cl = consistency_loss(rec, cond_s);
  out.total = total_generator_loss(out.parts, w);
  if (!std::isfinite(out.total)) throw Fault("stage 2: non-finite translator loss");

  Tensor<float> g_score = generator_adv_loss_backward(d.score);
  scale_inplace(g_score, static_cast<float>(w.al));
  Tensor<float> g_logits = age_cls_loss_backward(d.logits, b.t);
  scale_inplace(g_logits, static_cast<float>(w.acl));
  Tensor<float> g_z = m.disc.backward(g_score, g_logits);
  Tensor<float> g_akd = akd_loss_backward(z_t, target);
  scale_inplace(g_akd, static_cast<float>(w.akd));
  add_inplace(g_z, g_akd);
  ConditionGaussian<float> g_rec = consistency_loss_backward(rec, cond_s);
  scale_inplace(g_rec.mu, static_cast<float>(w.cl));
  scale_inplace(g_rec.log_sigma, static_cast<float>(w.cl));
  auto grads = m.ictm.backward(g_z, g_rec);
  m.prior.backward(grads.second);
  out.fakes = std::move(z_t);
  return out;
}

double discriminator_pass(Discriminator<float>& disc, const Tensor<float>& real, const std::vector<int>& real_groups,
                          const Tensor<float>& fakes, const LossWeights& w) {
  const DiscriminatorOutput<float> r = disc.forward_train(real);
  Tensor<float> g_real(r.score.shape());
  const float inv_r = 1.0f / r.score.size();
  for (std::size_t i = 0; i < g_real.size(); ++i) g_real[i] = (r.score[i] - 1.0f) * inv_r;
  Tensor<float> g_logits = age_cls_loss_backward(r.logits, real_groups);
  scale_inplace(g_logits, static_cast<float>(w.acl_d));
  disc.backward(g_real, g_logits);

  const DiscriminatorOutput<float> f = disc.forward_train(fakes);
  Tensor<float> g_fake(f.score.shape());
  const float inv_f = 1.0f / f.score.size();
  for (std::size_t i = 0; i < g_fake.size(); ++i) g_fake[i] = f.score[i] * inv_f;
  disc.backward(g_fake, Tensor<float>(f.logits.shape()));

  const double loss = discriminator_loss(r.score, f.score, r.logits, real_groups, w);
  if (!std::isfinite(loss)) throw Fault("stage 2: non-finite discriminator loss");
  return loss;
}

IctmTrainResult train_ictm(const TrainConfig& config, const GlowModel<float>& glow, const PrototypeTable<float>& table,
                           const std::vector<toy::ToySample>& train, const std::function<void(const IctmLogRow&)>& on_row,
                           const PhaseObserver& observer) {
  config.validate();
  if (train.empty()) throw Fault("train_ictm: empty training set");
  table.require_complete();
  const Rng root(config.seed);
  Rng init_rng = root.fork(11);
  Rng data_rng = root.fork(12);

  IctmTrainResult result;
  result.models = make_stage2(config, init_rng);
  Stage2Models& m = result.models;
  if (table.latent_shape() != glow.config().packed_shape()) throw Fault("train_ictm: prototype shape mismatch");

  std::vector<const toy::Image*> images;
  std::vector<std::vector<int>> by_group(toy::kGroups);
  for (std::size_t i = 0; i < train.size(); ++i) {
    images.push_back(&train[i].image);
    by_group[train[i].g].push_back(static_cast<int>(i));
  }
  for (int g = 0; g < toy::kGroups; ++g)
    if (by_group[g].empty()) throw Fault("train_ictm: no training images in group " + std::to_string(g));
  const Tensor<float> cache = encode_images(glow, images);
  const Shape packed = glow.config().packed_shape();
  const std::size_t per = shape_numel(packed);
  auto gather = [&](const std::vector<int>& idx) {
    Tensor<float> z({static_cast<int>(idx.size()), packed[0], packed[1], packed[2]});
    for (std::size_t n = 0; n < idx.size(); ++n)
      std::copy_n(cache.data() + idx[n] * per, per, z.data() + n * per);
    return z;
  };

  ParamList<float> t_params, d_params;
  m.ictm.collect(t_params, "ictm");
  m.prior.collect(t_params, "prior");
  m.disc.collect(d_params, "disc");
  Adam<float> t_opt(t_params, config.lr_ictm);
  Adam<float> d_opt(d_params, config.lr_disc);
  const float scale = 1.0f / config.accumulation;
  const int n = static_cast<int>(train.size());
  Stage2Models last_good = m;

  for (int it = 0; it < config.ictm_iters; ++it) {
    IctmLogRow row;
    row.iter = it;
    try {
      std::vector<Tensor<float>> fakes;
      std::vector<std::vector<int>> targets;
      if (observer) observer("T", it);
      t_opt.zero_grad();
      for (int k = 0; k < config.accumulation; ++k) {
        Stage2Batch b;
        const auto idx = draw_indices(data_rng, config.micro_batch, n);
        b.z_s = gather(idx);
        for (int i : idx) {
          b.g.push_back(train[i].g);
          b.a.push_back(train[i].a);
          const int shift = data_rng.uniform_int(1, toy::kGroups - 1);
          b.t.push_back((train[i].g + shift) % toy::kGroups);
        }
        GeneratorPass pass = generator_pass(m, table, b, config.weights, config.s);
        row.loss += pass.total / config.accumulation;
        row.akd += pass.parts.akd / config.accumulation;
        row.al += pass.parts.al / config.accumulation;
        row.acl += pass.parts.acl / config.accumulation;
        row.cl += pass.parts.cl / config.accumulation;
        fakes.push_back(std::move(pass.fakes));
        targets.push_back(std::move(b.t));
      }
      t_opt.step(scale);

      if (observer) observer("D", it);
      m.disc.power_iterate();
      d_opt.zero_grad();
      for (int k = 0; k < config.accumulation; ++k) {
        std::vector<int> real_idx;
        for (int t : targets[k]) {
          const auto& pool = by_group[t];
          real_idx.push_back(pool[data_rng.uniform_int(0, static_cast<int>(pool.size()) - 1)]);
        }
        row.d_loss += discriminator_pass(m.disc, gather(real_idx), targets[k], fakes[k], config.weights) /
                      config.accumulation;
      }
      d_opt.step(scale);
    } catch (const Fault& e) {
      result.abort_reason = "iteration " + std::to_string(it) + ": " + e.what();
      m = last_good;
      return result;
    }
    last_good = m;
    result.log.push_back(row);
    result.completed = it + 1;
    if (on_row) on_row(row);
  }
  return result;
}

// --------------------------------------------------------------------- logs

namespace {

std::ofstream open_log(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Fault("cannot write log " + path.string());
  out << std::setprecision(9);
  return out;
}

}  // namespace

void write_glow_log(const std::filesystem::path& path, const std::vector<GlowLogRow>& rows) {
  auto out = open_log(path);
  out << "iter,loss,bpd\n";
  for (const auto& r : rows) out << r.iter << ',' << r.loss << ',' << r.bpd << '\n';
}

void write_ictm_log(const std::filesystem::path& path, const std::vector<IctmLogRow>& rows) {
  auto out = open_log(path);
  out << "iter,loss,akd,al,acl,cl,d_loss\n";
  for (const auto& r : rows)
    out << r.iter << ',' << r.loss << ',' << r.akd << ',' << r.al << ',' << r.acl << ',' << r.cl << ',' << r.d_loss
        << '\n';
}

}  // namespace ageflow
