#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "ageflow/training.hpp"

using namespace ageflow;
using F = Tensor<float>;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.glow.levels = 2;
  c.glow.steps = 1;
  c.glow.hidden = 8;
  c.micro_batch = 4;
  c.accumulation = 2;
  c.glow_iters = 3;
  c.ictm_iters = 3;
  c.ictm_flows = 2;
  c.ictm_hidden = 8;
  c.cond_channels = 2;
  c.prior_hidden = 8;
  c.disc_hidden = 16;
  c.lr_glow = 1e-3;
  c.lr_ictm = 1e-3;
  return c;
}

std::vector<toy::ToySample> toy_set(int per_cell, std::uint64_t seed) {
  std::vector<toy::ToySample> out;
  Rng rng(seed);
  for (int i = 0; i < per_cell; ++i)
    for (int g = 0; g < toy::kGroups; ++g)
      for (int a = 0; a < toy::kAttrs; ++a) {
        const int dx = rng.uniform_int(-toy::kMaxShift, toy::kMaxShift);
        const int dy = rng.uniform_int(-toy::kMaxShift, toy::kMaxShift);
        out.push_back(toy::synth_image(g, a, dx, dy, rng));
      }
  return out;
}

std::vector<const toy::Image*> images_of(const std::vector<toy::ToySample>& s, std::size_t begin, std::size_t end) {
  std::vector<const toy::Image*> out;
  for (std::size_t i = begin; i < end; ++i) out.push_back(&s[i].image);
  return out;
}

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path scratch_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("ageflow_test_training_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

void perturb(const ParamList<float>& params, Rng& rng, double sd) {
  for (const auto& p : params)
    for (auto& v : p.value->values()) v += static_cast<float>(rng.normal() * sd);
}

struct Trained {
  TrainConfig config;
  std::vector<toy::ToySample> data;
  GlowModel<float> glow;
  PrototypeTable<float> table;
};

const Trained& trained() {
  static const Trained t = [] {
    Trained r;
    r.config = tiny_config();
    r.data = toy_set(2, 5);
    r.glow = train_glow(r.config, r.data).model;
    r.table = compute_prototype_stage(r.glow, r.data);
    return r;
  }();
  return t;
}

}  // namespace

TEST_CASE("config parsing reads nested keys and keeps defaults") {
  const TrainConfig c = parse_train_config(R"({"seed": 3, "lr_ictm": 0.5, "weights": {"cl": 0.2},
      "glow": {"levels": 2}, "ictm": {"flows": 4, "disc_slope": 0.1}})");
  CHECK(c.seed == 3);
  CHECK(c.lr_ictm == 0.5);
  CHECK(c.lr_glow == 1e-5);
  CHECK(c.weights.cl == 0.2);
  CHECK(c.weights.akd == 1.0);
  CHECK(c.glow.levels == 2);
  CHECK(c.glow.steps == 8);
  CHECK(c.ictm_flows == 4);
  CHECK(c.disc_slope == 0.1);
  CHECK(c.micro_batch == 16);
  CHECK(c.accumulation == 4);
}

TEST_CASE("config json round trip") {
  TrainConfig c = tiny_config();
  c.dataset = "d/manifest.csv";
  c.s = 0.75;
  const TrainConfig back = parse_train_config(train_config_json(c));
  CHECK(train_config_json(back) == train_config_json(c));
}

TEST_CASE("config faults") {
  CHECK_THROWS_AS(parse_train_config(R"({"sed": 3})"), Fault);
  CHECK_THROWS_AS(parse_train_config(R"({"weights": {"bogus": 1}})"), Fault);
  CHECK_THROWS_AS(parse_train_config(R"({"glow": {"levels": 7}})"), Fault);
  CHECK_THROWS_AS(parse_train_config(R"({"micro_batch": "many"})"), Fault);
  CHECK_THROWS_AS(parse_train_config(R"({"lr_glow": -1})"), Fault);
  CHECK_THROWS_AS(parse_train_config("[1, 2]"), Fault);
  CHECK_THROWS_AS(parse_train_config("{"), Fault);
  CHECK_THROWS_AS(load_train_config("/nonexistent/config.json"), Fault);
}

TEST_CASE("checkpoint save, load, save is byte identical") {
  const Trained& t = trained();
  Rng rng(21);
  Stage2Models m = make_stage2(t.config, rng);
  ParamList<float> p;
  m.ictm.collect(p, "ictm");
  perturb(p, rng, 0.05);
  m.disc.power_iterate();

  Checkpoint ck;
  GlowModel<float> glow = t.glow;
  store_glow(ck, glow);
  store_prototypes(ck, t.table);
  store_stage2(ck, m);
  store_train_config(ck, t.config);

  const fs::path dir = scratch_dir("bytes");
  save_checkpoint(dir / "a.ckpt", ck);
  const Checkpoint loaded = load_checkpoint(dir / "a.ckpt");
  CHECK(loaded == ck);
  save_checkpoint(dir / "b.ckpt", loaded);
  CHECK(file_bytes(dir / "a.ckpt") == file_bytes(dir / "b.ckpt"));

  // Rebuilding every module from the loaded file and storing again also reproduces the bytes.
  Checkpoint rebuilt;
  GlowModel<float> g2 = restore_glow(loaded);
  Stage2Models m2 = restore_stage2(loaded);
  store_glow(rebuilt, g2);
  store_prototypes(rebuilt, restore_prototypes(loaded));
  store_stage2(rebuilt, m2);
  store_train_config(rebuilt, t.config);
  save_checkpoint(dir / "c.ckpt", rebuilt);
  CHECK(file_bytes(dir / "a.ckpt") == file_bytes(dir / "c.ckpt"));
}

TEST_CASE("corrupted checkpoints fault") {
  Checkpoint ck;
  ck.put_scalar("x", 1.0);
  ck.put("w", F({2, 3}, 0.5f));
  auto bytes = serialize_checkpoint(ck);
  CHECK(deserialize_checkpoint(bytes) == ck);

  auto bad_magic = bytes;
  bad_magic[0] ^= 0xFF;
  CHECK_THROWS_AS(deserialize_checkpoint(bad_magic), Fault);

  auto truncated = bytes;
  truncated.resize(truncated.size() - 3);
  CHECK_THROWS_AS(deserialize_checkpoint(truncated), Fault);

  auto trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS(deserialize_checkpoint(trailing), Fault);

  CHECK_THROWS_AS(load_checkpoint("/nonexistent/x.ckpt"), Fault);
  CHECK_THROWS_AS(ck.get_f32("w", {3, 2}), Fault);
  CHECK_THROWS_AS(ck.get_f32("missing"), Fault);
}

TEST_CASE("restoring modules from an incomplete checkpoint faults") {
  Checkpoint empty;
  CHECK_THROWS_AS(restore_glow(empty), Fault);
  CHECK_THROWS_AS(restore_prototypes(empty), Fault);
  CHECK_THROWS_AS(restore_stage2(empty), Fault);

  Checkpoint ck;
  GlowModel<float> glow = trained().glow;
  store_glow(ck, glow);
  ck.erase_prefix("glow/0/0/invconv/perm");
  CHECK_THROWS_AS(restore_glow(ck), Fault);
}

TEST_CASE("restored models compute the same functions") {
  const Trained& t = trained();
  Checkpoint ck;
  GlowModel<float> glow = t.glow;
  store_glow(ck, glow);
  Rng rng(4);
  Stage2Models m = make_stage2(t.config, rng);
  ParamList<float> p;
  m.ictm.collect(p, "ictm");
  m.prior.collect(p, "prior");
  perturb(p, rng, 0.05);
  m.disc.power_iterate();
  store_stage2(ck, m);
  store_prototypes(ck, t.table);

  const F x = preprocess_midpoint(toy::to_tensor<float>(images_of(t.data, 0, 4)), 256);
  const GlowModel<float> g2 = restore_glow(ck);
  CHECK(pack_latent(g2.encode(x)) == pack_latent(t.glow.encode(x)));

  const F z = pack_latent(t.glow.encode(x));
  const Stage2Models m2 = restore_stage2(ck);
  const auto cond = m.prior.generate(one_hot<float>({0, 1, 2, 3}, 4));
  const auto cond2 = m2.prior.generate(one_hot<float>({0, 1, 2, 3}, 4));
  CHECK(cond.mu == cond2.mu);
  CHECK(m.ictm.forward(z, cond).first == m2.ictm.forward(z, cond2).first);
  CHECK(m.disc.forward(z).score == m2.disc.forward(z).score);

  const PrototypeTable<float> table = restore_prototypes(ck);
  for (int g = 0; g < 4; ++g)
    for (int a = 0; a < 2; ++a) {
      CHECK(table.count(g, a) == t.table.count(g, a));
      CHECK(table.at(g, a) == t.table.at(g, a));
    }
}

TEST_CASE("stage 1 is deterministic in the seed") {
  TrainConfig c = tiny_config();
  const auto data = toy_set(1, 9);
  const auto a = train_glow(c, data);
  const auto b = train_glow(c, data);
  REQUIRE(a.completed == 3);
  REQUIRE(a.log.size() == 3);
  CHECK(a.abort_reason.empty());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].loss == b.log[i].loss);
    CHECK(a.log[i].bpd == b.log[i].bpd);
    CHECK(a.log[i].bpd == doctest::Approx(a.log[i].loss / (32.0 * 32.0 * std::log(2.0))).epsilon(1e-12));
  }
  Checkpoint ca, cb;
  GlowModel<float> ga = a.model, gb = b.model;
  store_glow(ca, ga);
  store_glow(cb, gb);
  CHECK(ca == cb);

  c.seed = 8;
  const auto d = train_glow(c, data);
  CHECK(d.log[0].loss != a.log[0].loss);
}

TEST_CASE("stage 1 with zero iterations returns the initialized model") {
  TrainConfig c = tiny_config();
  c.glow_iters = 0;
  const auto data = toy_set(1, 9);
  const auto r = train_glow(c, data);
  CHECK(r.completed == 0);
  CHECK(r.log.empty());
  CHECK(r.model.initialized());
  // Training one step from the same init moves the parameters.
  c.glow_iters = 1;
  const auto r1 = train_glow(c, data);
  Checkpoint c0, c1;
  GlowModel<float> g0 = r.model, g1 = r1.model;
  store_glow(c0, g0);
  store_glow(c1, g1);
  CHECK_FALSE(c0 == c1);
}

TEST_CASE("gradient accumulation over 4 micro-batches of 16 matches one batch of 64") {
  const auto data = toy_set(8, 13);
  REQUIRE(data.size() == 64);
  GlowConfig gc;
  gc.levels = 2;
  gc.steps = 2;
  gc.hidden = 8;
  Rng rng(2);
  GlowModel<float> base(gc, rng);
  const F all = preprocess_midpoint(toy::to_tensor<float>(images_of(data, 0, 64)), 256);
  base.initialize(all);

  GlowModel<float> one = base, four = base;
  ParamList<float> p1, p4;
  one.collect(p1);
  four.collect(p4);
  zero_grads(p1);
  zero_grads(p4);
  const double l1 = glow_accumulate(one, all);
  double l4 = 0;
  for (int k = 0; k < 4; ++k) {
    const F x = preprocess_midpoint(toy::to_tensor<float>(images_of(data, 16 * k, 16 * (k + 1))), 256);
    l4 += glow_accumulate(four, x) / 4;
  }
  CHECK(l4 == doctest::Approx(l1).epsilon(1e-5));
  double worst = 0, scale = 0;
  for (std::size_t i = 0; i < p1.size(); ++i) {
    const F& g1 = *p1[i].grad;
    const F& g4 = *p4[i].grad;
    for (std::size_t j = 0; j < g1.size(); ++j) {
      worst = std::max(worst, std::abs(double(g1[j]) - double(g4[j]) / 4));
      scale = std::max(scale, std::abs(double(g1[j])));
    }
  }
  CHECK(scale > 0);
  CHECK(worst <= 1e-5 * scale);
}

TEST_CASE("first translator loss with only distillation equals the closed form") {
  const Trained& t = trained();
  Rng rng(17);
  Stage2Models m = make_stage2(t.config, rng);
  Stage2Batch b;
  std::vector<int> idx = {0, 3, 5, 6};
  std::vector<const toy::Image*> imgs;
  for (int i : idx) {
    imgs.push_back(&t.data[i].image);
    b.g.push_back(t.data[i].g);
    b.a.push_back(t.data[i].a);
  }
  b.t = {(b.g[0] + 1) % 4, (b.g[1] + 2) % 4, (b.g[2] + 3) % 4, (b.g[3] + 1) % 4};
  b.z_s = encode_images(t.glow, imgs);
  LossWeights w;
  w.akd = 2.5;
  w.al = w.acl = w.cl = 0;
  const double s = 0.7;
  const GeneratorPass pass = generator_pass(m, t.table, b, w, s);

  double sum = 0;
  const std::size_t per = b.z_s.size() / 4;
  for (int n = 0; n < 4; ++n) {
    const F& pt = t.table.at(b.t[n], b.a[n]);
    const F& ps = t.table.at(b.g[n], b.a[n]);
    for (std::size_t j = 0; j < per; ++j) {
      const double target = double(b.z_s[n * per + j]) + s * (double(pt[j]) - double(ps[j]));
      sum += std::abs(double(b.z_s[n * per + j]) - target);
    }
  }
  CHECK(pass.total == doctest::Approx(w.akd * sum / b.z_s.size()).epsilon(1e-6));
  CHECK(pass.fakes == b.z_s);
}

TEST_CASE("stage 2 alternates translator and discriminator steps") {
  const Trained& t = trained();
  std::vector<std::string> phases;
  const auto r = train_ictm(t.config, t.glow, t.table, t.data, {}, [&](std::string_view ph, int it) {
    phases.push_back(std::string(ph) + std::to_string(it));
  });
  CHECK(r.completed == 3);
  CHECK(phases == std::vector<std::string>{"T0", "D0", "T1", "D1", "T2", "D2"});
}

TEST_CASE("stage 2 leaves the flow untouched and is deterministic") {
  const Trained& t = trained();
  Checkpoint before, after;
  GlowModel<float> g = t.glow;
  store_glow(before, g);
  const auto a = train_ictm(t.config, t.glow, t.table, t.data);
  const auto b = train_ictm(t.config, t.glow, t.table, t.data);
  GlowModel<float> g2 = t.glow;
  store_glow(after, g2);
  CHECK(before == after);

  REQUIRE(a.log.size() == 3);
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].loss == b.log[i].loss);
    CHECK(a.log[i].d_loss == b.log[i].d_loss);
    CHECK(std::isfinite(a.log[i].loss));
  }
  Checkpoint ca, cb;
  Stage2Models ma = a.models, mb = b.models;
  store_stage2(ca, ma);
  store_stage2(cb, mb);
  CHECK(ca == cb);
}

TEST_CASE("stage 2 with zero iterations keeps the identity translator") {
  TrainConfig c = trained().config;
  c.ictm_iters = 0;
  const Trained& t = trained();
  const auto r = train_ictm(c, t.glow, t.table, t.data);
  CHECK(r.completed == 0);
  const F z = encode_images(t.glow, images_of(t.data, 0, 3));
  const auto cond = r.models.prior.generate(one_hot<float>({1, 2, 3}, 4));
  CHECK(r.models.ictm.forward(z, cond).first == z);
}

TEST_CASE("stage 2 faults on incomplete prototypes") {
  const Trained& t = trained();
  PrototypeTable<float> partial(4, 2, t.glow.config().packed_shape());
  partial.set(0, 0, t.table.at(0, 0), 1);
  CHECK_THROWS_AS(train_ictm(t.config, t.glow, partial, t.data), Fault);
}

TEST_CASE("loss logs have fixed headers") {
  const fs::path dir = scratch_dir("logs");
  write_glow_log(dir / "g.csv", {{0, 1.5, 0.25}, {1, 1.25, 0.125}});
  write_ictm_log(dir / "i.csv", {{0, 1, 2, 3, 4, 5, 6}});
  std::ifstream g(dir / "g.csv"), i(dir / "i.csv");
  std::string line;
  std::getline(g, line);
  CHECK(line == "iter,loss,bpd");
  std::getline(g, line);
  CHECK(line == "0,1.5,0.25");
  std::getline(i, line);
  CHECK(line == "iter,loss,akd,al,acl,cl,d_loss");
  std::getline(i, line);
  CHECK(line == "0,1,2,3,4,5,6");
}
