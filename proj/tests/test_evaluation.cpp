#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "ageflow/evaluation.hpp"

using namespace ageflow;
using F = Tensor<float>;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.glow.levels = 2;
  c.glow.steps = 2;
  c.glow.hidden = 8;
  c.micro_batch = 4;
  c.accumulation = 2;
  c.glow_iters = 2;
  c.ictm_flows = 3;
  c.ictm_hidden = 8;
  c.cond_channels = 2;
  c.prior_hidden = 8;
  c.disc_hidden = 16;
  c.lr_glow = 1e-3;
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

double max_abs_diff(const F& a, const F& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

struct Fixture {
  std::vector<toy::ToySample> data;
  Pipeline pipeline;
  Checkpoint ckpt;
};

// Briefly trained flow, real prototypes, untrained translator.
const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture r;
    const TrainConfig c = tiny_config();
    r.data = toy_set(2, 3);
    GlowModel<float> glow = train_glow(c, r.data).model;
    Rng rng(5);
    Stage2Models m = make_stage2(c, rng);
    store_glow(r.ckpt, glow);
    store_prototypes(r.ckpt, compute_prototype_stage(glow, r.data));
    store_stage2(r.ckpt, m);
    store_train_config(r.ckpt, c);
    r.pipeline = Pipeline::from_checkpoint(r.ckpt);
    return r;
  }();
  return f;
}

F batch_of(const std::vector<toy::ToySample>& data, int n) {
  std::vector<const toy::Image*> imgs;
  for (int i = 0; i < n; ++i) imgs.push_back(&data[i].image);
  return preprocess_midpoint(toy::to_tensor<float>(imgs), 256);
}

F reconstruction(const Pipeline& p, const F& x) { return p.glow.decode(p.glow.encode(x)); }

Pipeline perturbed_pipeline(double sd) {
  Pipeline p = fixture().pipeline;
  Rng rng(11);
  ParamList<float> params;
  p.stage2->ictm.collect(params, "ictm");
  p.stage2->prior.collect(params, "prior");
  for (const auto& q : params)
    for (auto& v : q.value->values()) v += static_cast<float>(rng.normal() * sd);
  return p;
}

}  // namespace

TEST_CASE("mode names") {
  for (auto m : {TranslateMode::Ictm, TranslateMode::IctmInverse, TranslateMode::GlowManip, TranslateMode::GlowAttrManip})
    CHECK(parse_mode(mode_name(m)) == m);
  CHECK_THROWS_AS(parse_mode("glow"), Fault);
}

TEST_CASE("untrained translator reproduces the flow reconstruction") {
  const Fixture& f = fixture();
  const F x = batch_of(f.data, 8);
  TranslateOptions o;
  for (const auto& s : std::vector<toy::ToySample>(f.data.begin(), f.data.begin() + 8)) o.targets.push_back(s.g);
  const TranslateBatch b = translate_batch(f.pipeline, x, TranslateMode::Ictm, o);
  CHECK(max_abs_diff(b.x, reconstruction(f.pipeline, x)) <= 1e-2);
  REQUIRE(b.recovered.has_value());
  CHECK(b.recovered_group.size() == 8);

  // Any target works the same way while every subnet is zero.
  o.targets = {3, 0, 1, 2, 3, 0, 1, 2};
  const TranslateBatch c = translate_batch(f.pipeline, x, TranslateMode::Ictm, o);
  CHECK(max_abs_diff(c.x, reconstruction(f.pipeline, x)) <= 1e-2);
}

TEST_CASE("glow-manip with zero scale is exact") {
  const Fixture& f = fixture();
  const F x = batch_of(f.data, 8);
  TranslateOptions o;
  o.targets = {1, 2, 3, 0, 1, 2, 3, 0};
  for (int i = 0; i < 8; ++i) {
    o.sources.push_back(f.data[i].g);
    o.attrs.push_back(f.data[i].a);
  }
  o.s = 0.0;
  for (auto mode : {TranslateMode::GlowManip, TranslateMode::GlowAttrManip}) {
    const TranslateBatch b = translate_batch(f.pipeline, x, mode, o);
    CHECK(b.x == reconstruction(f.pipeline, x));
    CHECK(b.recovered_group == o.sources);
  }
  for (int i = 0; i < 8; ++i) {
    const TranslatedImage t = translate_image(f.pipeline, f.data[i].image, o.targets[i], TranslateMode::GlowManip,
                                              f.data[i].g, f.data[i].a, 0.0);
    CHECK(t.image == f.data[i].image);
  }
}

TEST_CASE("glow-manip moves the latent by the prototype difference") {
  const Fixture& f = fixture();
  const Pipeline& p = f.pipeline;
  const F x = batch_of(f.data, 1);
  TranslateOptions o;
  o.targets = {2};
  o.sources = {f.data[0].g};
  o.attrs = {f.data[0].a};
  o.s = 0.5;
  const TranslateBatch b = translate_batch(p, x, TranslateMode::GlowAttrManip, o);
  const F z = pack_latent(p.glow.encode(x));
  const F& pt = p.prototypes->at(2, o.attrs[0]);
  const F& ps = p.prototypes->at(o.sources[0], o.attrs[0]);
  F expected = z;
  for (std::size_t i = 0; i < z.size(); ++i) expected[i] = z[i] + 0.5f * (pt[i] - ps[i]);
  const F z_out = pack_latent(p.glow.encode(b.x));
  CHECK(max_abs_diff(z_out, expected) <= 1e-3);
}

TEST_CASE("translate then invert with the exact condition channels recovers the input") {
  const Pipeline p = perturbed_pipeline(0.05);
  const Fixture& f = fixture();
  const F x = batch_of(f.data, 8);
  TranslateOptions fwd;
  fwd.targets = {1, 2, 3, 0, 3, 0, 1, 2};
  const TranslateBatch t = translate_batch(p, x, TranslateMode::Ictm, fwd);
  CHECK(max_abs_diff(t.x, reconstruction(p, x)) > 1e-3);

  TranslateOptions inv;
  for (int i = 0; i < 8; ++i) inv.targets.push_back(f.data[i].g);
  inv.condition_channels = &t.condition_channels;
  const TranslateBatch back = translate_batch(p, t.x, TranslateMode::IctmInverse, inv);
  CHECK(max_abs_diff(back.x, x) <= 5e-2);
}

TEST_CASE("mismatched condition channels fault") {
  const Fixture& f = fixture();
  const F x = batch_of(f.data, 2);
  TranslateOptions o;
  o.targets = {0, 1};
  const F wrong({2, 3, 8, 8});
  o.condition_channels = &wrong;
  CHECK_THROWS_AS(translate_batch(f.pipeline, x, TranslateMode::IctmInverse, o), Fault);
}

TEST_CASE("missing modules fault per mode") {
  const Fixture& f = fixture();
  Checkpoint glow_only;
  for (const auto& [name, t] : f.ckpt.tensors())
    if (name.rfind("glow/", 0) == 0 || name.rfind("meta/glow", 0) == 0) glow_only.tensors()[name] = t;
  const Pipeline p = Pipeline::from_checkpoint(glow_only);
  CHECK_FALSE(p.prototypes.has_value());
  CHECK_FALSE(p.stage2.has_value());
  CHECK_THROWS_AS(p.require(TranslateMode::Ictm), Fault);
  CHECK_THROWS_AS(p.require(TranslateMode::IctmInverse), Fault);
  CHECK_THROWS_AS(p.require(TranslateMode::GlowManip), Fault);
  CHECK_THROWS_AS(evaluate(p, f.data, TranslateMode::GlowAttrManip), Fault);
  CHECK_THROWS_AS(Pipeline::from_checkpoint(Checkpoint{}), Fault);

  TranslateOptions o;
  o.targets = {0};
  CHECK_THROWS_AS(translate_batch(f.pipeline, batch_of(f.data, 1), TranslateMode::GlowManip, o), Fault);
  o.targets = {4};
  CHECK_THROWS_AS(translate_batch(f.pipeline, batch_of(f.data, 1), TranslateMode::Ictm, o), Fault);
}

TEST_CASE("identity translator scores zero age accuracy") {
  const auto test = toy_set(5, 19);
  Translator identity = [](const std::vector<const toy::ToySample*>& s, const std::vector<int>&) {
    std::vector<toy::Image> out;
    for (const auto* p : s) out.push_back(p->image);
    return out;
  };
  const EvalReport r = evaluate(test, identity, "identity", 7);
  REQUIRE(r.pairs.size() == 12);
  for (const auto& p : r.pairs) {
    CHECK(p.source != p.target);
    CHECK(p.count == 10);
    CHECK(p.age_accuracy() == 0.0);
    CHECK(p.centroid_displacement() == 0.0);
    CHECK(p.cosine() == doctest::Approx(1.0).epsilon(1e-12));
    int consistent = 0;
    for (const auto& s : test)
      if (s.g == p.source) consistent += toy::oracle_attr(s.image) == s.a;
    CHECK(p.attr_preservation() == doctest::Approx(100.0 * consistent / p.count));
  }
  CHECK(r.total() == 120);
}

TEST_CASE("cheating translator that re-synthesizes from labels scores 100/100") {
  const auto test = toy_set(5, 23);
  Translator cheat = [](const std::vector<const toy::ToySample*>& s, const std::vector<int>& targets) {
    std::vector<toy::Image> out;
    Rng rng(0);
    for (std::size_t i = 0; i < s.size(); ++i)
      out.push_back(toy::synth_image(targets[i], s[i]->a, s[i]->dx, s[i]->dy, rng, {false, 0.0}).image);
    return out;
  };
  const EvalReport r = evaluate(test, cheat, "cheat");
  CHECK(r.age_accuracy() == 100.0);
  CHECK(r.attr_preservation() == 100.0);
  CHECK(r.centroid_displacement() <= 1.0);
}

TEST_CASE("report layout follows source by target groups") {
  const Fixture& f = fixture();
  const EvalReport r = evaluate(f.pipeline, f.data, TranslateMode::GlowManip);
  REQUIRE(r.pairs.size() == 12);
  int k = 0;
  for (int s = 0; s < 4; ++s)
    for (int t = 0; t < 4; ++t)
      if (s != t) {
        CHECK(r.pairs[k].source == s);
        CHECK(r.pairs[k].target == t);
        CHECK(r.pairs[k].count == 4);
        ++k;
      }
  const std::string csv = r.csv();
  CHECK(csv.rfind("mode,source,target,count,age_accuracy,attr_preservation,centroid_px,cosine,faults\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 14);
  const std::string table = r.table();
  for (const char* h : {"age accuracy (%)", "attribute preservation (%)", "centroid displacement (px)", "g0", "g3"})
    CHECK(table.find(h) != std::string::npos);
  CHECK(r.age_accuracy() >= 0.0);
  CHECK(r.age_accuracy() <= 100.0);
}

TEST_CASE("evaluation is deterministic") {
  const Pipeline p = perturbed_pipeline(0.02);
  const Fixture& f = fixture();
  const EvalReport a = evaluate(p, f.data, TranslateMode::Ictm, 5);
  const EvalReport b = evaluate(p, f.data, TranslateMode::Ictm, 64);
  CHECK(a == b);
  CHECK(a.csv() == b.csv());
}

TEST_CASE("evaluation faults") {
  Translator short_out = [](const std::vector<const toy::ToySample*>&, const std::vector<int>&) {
    return std::vector<toy::Image>{};
  };
  CHECK_THROWS_AS(evaluate({}, short_out, "x"), Fault);
  CHECK_THROWS_AS(evaluate(toy_set(1, 1), short_out, "x"), Fault);
}
