#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ageflow/finite_diff.hpp"
#include "ageflow/glow_model.hpp"
#include "oracles.hpp"

using namespace ageflow;
using D = Tensor<double>;
using F = Tensor<float>;

namespace {

GlowConfig tiny_config() {
  GlowConfig c;
  c.height = 4;
  c.width = 4;
  c.levels = 2;
  c.steps = 2;
  c.hidden = 4;
  return c;
}

// Gives every coupling a non-trivial output layer so the model is not
// stuck at its identity initialization.
template <typename T>
void perturb(GlowModel<T>& m, Rng& rng, double sd) {
  for (auto& level : m.levels)
    for (auto& step : level) {
      auto& conv = step.coupling.net.conv_out;
      conv.weight = normal_tensor<T>(conv.weight.shape(), rng, sd);
      conv.bias = normal_tensor<T>(conv.bias.shape(), rng, sd);
    }
}

template <typename T>
Tensor<T> random_images(int n, const GlowConfig& c, Rng& rng) {
  Tensor<T> x({n, c.channels, c.height, c.width});
  for (auto& v : x.values()) v = static_cast<T>(rng.uniform() - 0.5);
  return x;
}

}  // namespace

TEST_CASE("config validation and packed shape") {
  GlowConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.packed_shape() == Shape{64, 4, 4});
  CHECK(c.dims() == 1024);
  GlowConfig bad = c;
  bad.height = 36;
  CHECK_THROWS_AS(bad.validate(), ShapeError);
}

TEST_CASE("preprocess and postprocess") {
  F img({1, 1, 2, 2}, 0.0f);
  F x = preprocess(img, F({1, 1, 2, 2}), 256);
  for (float v : x.values()) CHECK(v == -0.5f);
  CHECK(preprocess_logdet(1024) == doctest::Approx(-1024 * std::log(256.0)).epsilon(1e-15));

  Rng rng(1);
  F pix({2, 1, 4, 4});
  for (auto& v : pix.values()) v = static_cast<float>(rng.uniform_int(0, 255));
  F noise({2, 1, 4, 4});
  for (auto& v : noise.values()) v = static_cast<float>(rng.uniform() * 0.999);
  CHECK(postprocess(preprocess(pix, noise)) == pix);
  CHECK(postprocess(preprocess_midpoint(pix)) == pix);

  F out_of_range({1, 1, 1, 1}, 256.0f);
  CHECK_THROWS_AS(preprocess_midpoint(out_of_range), Fault);
  F neg({1, 1, 1, 1}, -1.0f);
  CHECK_THROWS_AS(preprocess_midpoint(neg), Fault);
}

TEST_CASE("identity-initialized model permutes the normalized input") {
  GlowConfig c = tiny_config();
  Rng rng(2);
  GlowModel<double> m(c, rng);
  for (auto& level : m.levels)
    for (auto& step : level) {
      D eye({step.invconv.channels(), step.invconv.channels()});
      for (int i = 0; i < eye.dim(0); ++i) eye[i * eye.dim(0) + i] = 1;
      step.invconv = InvConv1x1<double>::from_matrix(eye);
      step.actnorm.log_scale.fill(0.3);
      step.actnorm.bias.fill(0.0);
      step.actnorm.mark_initialized();
    }
  D x = random_images<double>(1, c, rng);
  double ld = 0;
  auto z = m.encode(x, &ld);
  // Level 0: 2 steps on 4x2x2 (scale e^0.6 overall); level 1: 2 more steps on the kept half.
  const double s0 = std::exp(0.6), s1 = std::exp(1.2);
  CHECK(ld == doctest::Approx(2 * 0.3 * 4 * 4 + 2 * 0.3 * 8 * 1).epsilon(1e-12));
  std::vector<double> got, want;
  const D packed = pack_latent(z);
  for (double v : packed.values()) got.push_back(std::abs(v));
  D sq = squeeze(x);
  for (int ch = 0; ch < 4; ++ch)
    for (int p = 0; p < 4; ++p) want.push_back(std::abs(sq.at(0, ch, p / 2, p % 2)) * (ch < 2 ? s1 : s0));
  std::sort(got.begin(), got.end());
  std::sort(want.begin(), want.end());
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
}

TEST_CASE("desk config round trip") {
  GlowConfig c;
  Rng rng(3);
  GlowModel<float> m(c, rng);
  F batch = random_images<float>(16, c, rng);
  m.initialize(batch);
  CHECK(m.initialized());
  perturb(m, rng, 0.02);
  F x = random_images<float>(4, c, rng);
  auto z = m.encode(x);
  CHECK(z.numel() == x.size());
  CHECK(z.splits.size() == 2);
  CHECK(max_abs_diff(m.decode(z), x) <= 1e-3f);
}

TEST_CASE("round trips in 64-bit") {
  GlowConfig c = tiny_config();
  c.height = c.width = 8;
  Rng rng(4);
  GlowModel<double> m(c, rng);
  m.initialize(random_images<double>(8, c, rng));
  perturb(m, rng, 0.1);
  double worst = 0, worst_pack = 0;
  for (int i = 0; i < 100; ++i) {
    D x = random_images<double>(1, c, rng);
    auto z = m.encode(x);
    worst = std::max(worst, max_abs_diff(m.decode(z), x));
    auto z2 = unpack_latent(pack_latent(z), c);
    for (std::size_t s = 0; s < z.splits.size(); ++s) worst_pack = std::max(worst_pack, max_abs_diff(z2.splits[s], z.splits[s]));
    worst_pack = std::max(worst_pack, max_abs_diff(z2.final, z.final));
  }
  CHECK(worst <= 1e-9);
  CHECK(worst_pack == 0.0);
}

TEST_CASE("pack latent is a permutation") {
  GlowConfig c;
  Rng rng(5);
  LatentState<float> z;
  z.splits.push_back(normal_tensor<float>({2, 2, 16, 16}, rng, 1.0));
  z.splits.push_back(normal_tensor<float>({2, 4, 8, 8}, rng, 1.0));
  z.final = normal_tensor<float>({2, 16, 4, 4}, rng, 1.0);
  F p = pack_latent(z);
  CHECK(p.shape() == Shape{2, 64, 4, 4});
  CHECK(p.size() / 2 == 1024);
  auto back = unpack_latent(p, c);
  CHECK(back.splits[0] == z.splits[0]);
  CHECK(back.splits[1] == z.splits[1]);
  CHECK(back.final == z.final);
  std::vector<float> a, b(p.values().begin(), p.values().end());
  for (const auto& s : z.splits) a.insert(a.end(), s.values().begin(), s.values().end());
  a.insert(a.end(), z.final.values().begin(), z.final.values().end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  CHECK(a == b);
  CHECK_THROWS_AS(unpack_latent(F({1, 32, 4, 4}), c), ShapeError);
}

TEST_CASE("total logdet matches full Jacobian") {
  GlowConfig c = tiny_config();
  Rng rng(6);
  GlowModel<double> m(c, rng);
  m.initialize(random_images<double>(8, c, rng));
  perturb(m, rng, 0.2);
  for (auto& level : m.levels)
    for (auto& step : level) {
      step.actnorm.log_scale = normal_tensor<double>(step.actnorm.log_scale.shape(), rng, 0.3);
    }
  D x = random_images<double>(1, c, rng);
  double ld = 0;
  m.encode(x, &ld);
  auto J = oracle::jacobian(
      [&](const oracle::Vec& v) { return oracle::to_vec(pack_latent(m.encode(oracle::from_vec(x.shape(), v)))); },
      oracle::to_vec(x));
  const double ref = oracle::logabsdet(J);
  CHECK(std::abs(ld - ref) <= 1e-4 * std::abs(ref));
}

TEST_CASE("nll formulas") {
  GlowConfig c = tiny_config();
  LatentState<double> z;
  z.splits.push_back(D({1, 2, 2, 2}));
  z.final = D({1, 8, 1, 1});
  const double ref = 0.5 * 16 * std::log(2 * std::numbers::pi);
  CHECK(-gaussian_log_density(z)[0] == doctest::Approx(ref).epsilon(1e-15));

  Rng rng(7);
  z.splits[0] = normal_tensor<double>({3, 2, 2, 2}, rng, 1.0);
  z.final = normal_tensor<double>({3, 8, 1, 1}, rng, 1.0);
  auto got = gaussian_log_density(z);
  for (int n = 0; n < 3; ++n) {
    oracle::Vec v;
    for (int i = 0; i < 8; ++i) v.push_back(z.splits[0][n * 8 + i]);
    for (int i = 0; i < 8; ++i) v.push_back(z.final[n * 8 + i]);
    CHECK(std::abs(got[n] - oracle::std_normal_logpdf(v)) <= 1e-6);
  }
  // Shrinking z toward 0 raises the density.
  LatentState<double> half = z;
  scale_inplace(half.splits[0], 0.5);
  scale_inplace(half.final, 0.5);
  auto got_half = gaussian_log_density(half);
  for (int n = 0; n < 3; ++n) CHECK(got_half[n] > got[n]);

  GlowModel<double> m(c, rng);
  D x = random_images<double>(2, c, rng);
  m.initialize(x);
  double ld = 0;
  auto zz = m.encode(x, &ld);
  auto dens = gaussian_log_density(zz);
  auto n = nll(m, x);
  for (int i = 0; i < 2; ++i) {
    CHECK(n[i] == doctest::Approx(-(dens[i] + ld - 16 * std::log(256.0))).epsilon(1e-12));
  }
  CHECK(bits_per_dim(16 * std::log(2.0), 16) == doctest::Approx(1.0));
}

TEST_CASE("sampling") {
  GlowConfig c = tiny_config();
  c.height = c.width = 8;
  Rng rng(8);
  GlowModel<float> m(c, rng);
  m.initialize(random_images<float>(8, c, rng));
  perturb(m, rng, 0.05);

  Rng r1(11), r2(11);
  F a = sample(m, 3, 0.7, r1);
  F b = sample(m, 3, 0.7, r2);
  CHECK(a == b);
  for (float v : a.values()) CHECK((v >= 0 && v <= 255 && v == std::floor(v)));

  Rng r3(12);
  F zero_t = sample(m, 1, 0.0, r3);
  const Shape ps = c.packed_shape();
  LatentState<float> z0 = unpack_latent(F({1, ps[0], ps[1], ps[2]}), c);
  CHECK(zero_t == postprocess(m.decode(z0)));

  // Latent draws at temperature T have moments (0, T^2).
  Rng r4(13);
  const double T = 0.7;
  double s1 = 0, s2 = 0, s4 = 0;
  const int N = 10000;
  for (int i = 0; i < N; ++i) {
    const double v = T * r4.normal();
    s1 += v;
    s2 += v * v;
    s4 += v * v * v * v;
  }
  CHECK(std::abs(s1 / N) <= 4 * T / std::sqrt(N));
  CHECK(std::abs(s2 / N - T * T) <= 4 * T * T * std::sqrt(2.0 / N));
  CHECK(std::abs(s4 / N / (T * T * T * T) - 3.0) <= 0.25);
}

TEST_CASE("glow gradients against finite differences") {
  GlowConfig c = tiny_config();
  Rng rng(9);
  GlowModel<double> m(c, rng);
  D x = random_images<double>(2, c, rng);
  m.initialize(x);
  perturb(m, rng, 0.2);
  // Mean nll without the constant dequantization term.
  auto loss = [&](const GlowModel<double>& model, const D& in) {
    double ld = 0;
    auto z = model.encode(in, &ld);
    auto dens = gaussian_log_density(z);
    return -(dens[0] + dens[1]) / 2 - ld;
  };
  double ld = 0;
  auto z = m.encode_train(x, &ld);
  LatentState<double> gz = z;
  scale_inplace(gz.final, 0.5);
  for (auto& s : gz.splits) scale_inplace(s, 0.5);
  ParamList<double> params;
  m.collect(params);
  zero_grads(params);
  D gx = m.backward(gz, -1.0);
  CHECK(relative_error(gx, finite_diff_grad<double>([&](const D& v) { return loss(m, v); }, x, 1e-5)) <= 1e-4);
  for (std::size_t i = 0; i < params.size(); ++i) {
    D fd = finite_diff_grad<double>(
        [&](const D& v) {
          GlowModel<double> m2 = m;
          ParamList<double> p2;
          m2.collect(p2);
          *p2[i].value = v;
          return loss(m2, x);
        },
        *params[i].value, 1e-5);
    if (params[i].name.find("invconv/lower") != std::string::npos ||
        params[i].name.find("invconv/upper") != std::string::npos) {
      const int C = params[i].value->dim(0);
      const bool lower = params[i].name.find("lower") != std::string::npos;
      for (int r = 0; r < C; ++r)
        for (int k = 0; k < C; ++k)
          if (lower ? k >= r : k <= r) fd[r * C + k] = 0;
    }
    INFO(params[i].name);
    CHECK(relative_error(*params[i].grad, fd) <= 1e-4);
  }
}

TEST_CASE("encode rejects wrong shape") {
  GlowConfig c = tiny_config();
  Rng rng(10);
  GlowModel<float> m(c, rng);
  CHECK_THROWS_AS(m.encode(F({1, 1, 8, 8})), ShapeError);
}
