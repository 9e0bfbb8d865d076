#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "ageflow/adversary.hpp"
#include "ageflow/finite_diff.hpp"
#include "oracles.hpp"

using namespace ageflow;
using D = Tensor<double>;

namespace {

// Largest eigenvalue of a symmetric matrix by cyclic Jacobi rotations.
double jacobi_max_eigenvalue(oracle::Mat a) {
  const std::size_t n = a.size();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
      }
  }
  double best = a[0][0];
  for (std::size_t i = 1; i < n; ++i) best = std::max(best, a[i][i]);
  return best;
}

double top_singular_value(const D& w) {
  const int r = w.dim(0), c = w.dim(1);
  oracle::Mat wtw(c, oracle::Vec(c, 0.0));
  for (int i = 0; i < c; ++i)
    for (int j = 0; j < c; ++j)
      for (int k = 0; k < r; ++k) wtw[i][j] += w[k * c + i] * w[k * c + j];
  return std::sqrt(jacobi_max_eigenvalue(wtw));
}

double softmax_ce(const std::vector<double>& logits, int target) {
  double z = 0;
  for (double l : logits) z += std::exp(l);
  return -std::log(std::exp(logits[target]) / z);
}

DiscriminatorConfig small_disc() {
  DiscriminatorConfig c;
  c.input = 12;
  c.hidden = 7;
  c.groups = 4;
  return c;
}

}  // namespace

TEST_CASE("spectral normalization of a diagonal matrix") {
  D w({2, 2}, std::vector<double>{3, 0, 0, 1});
  D u({2}, std::vector<double>{0.6, 0.8});
  auto r = spectral_normalize(w, u, 20);
  CHECK(std::abs(r.sigma - 3.0) <= 1e-3);
  CHECK(std::abs(top_singular_value(r.weight) - 1.0) <= 1e-3);
}

TEST_CASE("spectral normalization leaves a unit-norm matrix unchanged") {
  const double c = std::cos(0.3), s = std::sin(0.3);
  D w({2, 2}, std::vector<double>{c, -s, s, c});
  auto r = spectral_normalize(w, D({2}, std::vector<double>{1, 0}), 1);
  CHECK(max_abs_diff(r.weight, w) <= 1e-3);
}

TEST_CASE("spectral normalization matches an eigendecomposition oracle") {
  Rng rng(11);
  D w = normal_tensor<double>({8, 8}, rng, 1.0);
  D u = normal_tensor<double>({8}, rng, 1.0);
  const double sigma = top_singular_value(w);
  auto r = spectral_normalize(w, u, 5);
  CHECK(std::abs(r.sigma - sigma) <= 1e-3 * sigma);
  // The estimate never exceeds the true top singular value.
  CHECK(r.sigma <= sigma + 1e-12);
  CHECK_THROWS_AS(spectral_normalize(w, D({7}), 1), ShapeError);
}

TEST_CASE("persisted power iteration converges across steps") {
  Rng rng(12);
  SNDense<double> layer(16, 24, rng);
  for (int i = 0; i < 50; ++i) layer.power_iterate();
  CHECK(std::abs(top_singular_value(layer.normalized_weight()) - 1.0) <= 1e-2);
}

TEST_CASE("discriminator on zero input with zero biases") {
  Rng rng(13);
  Discriminator<double> d(small_disc(), rng);
  auto out = d.forward(D({3, 3, 2, 2}));
  CHECK(out.score.shape() == Shape{3});
  CHECK(out.logits.shape() == Shape{3, 4});
  for (double v : out.score.values()) CHECK(v == 0.0);
  for (double v : out.logits.values()) CHECK(v == 0.0);
  CHECK_THROWS_AS(d.forward(D({3, 5})), ShapeError);
}

TEST_CASE("discriminator on desk-scale latents") {
  Rng rng(14);
  Discriminator<float> d(DiscriminatorConfig{}, rng);
  auto out = d.forward(normal_tensor<float>({2, 64, 4, 4}, rng, 1.0));
  for (float v : out.score.values()) CHECK(std::isfinite(v));
  for (float v : out.logits.values()) CHECK(std::isfinite(v));
}

TEST_CASE("discriminator gradients") {
  Rng rng(15);
  Discriminator<double> d(small_disc(), rng);
  for (int i = 0; i < 3; ++i) d.power_iterate();
  d.dense1.bias = normal_tensor<double>(d.dense1.bias.shape(), rng, 0.3);
  d.dense2.bias = normal_tensor<double>(d.dense2.bias.shape(), rng, 0.3);
  D z = normal_tensor<double>({3, 3, 2, 2}, rng, 1.0);
  D rs = normal_tensor<double>({3}, rng, 1.0);
  D rl = normal_tensor<double>({3, 4}, rng, 1.0);
  // u and v stay fixed while differentiating, matching the backward pass.
  auto loss = [&](const Discriminator<double>& m, const D& x) {
    auto o = m.forward(x);
    return oracle::dot(o.score, rs) + oracle::dot(o.logits, rl);
  };
  auto refreshed = [](const D& w, const SNDense<double>& l) {
    double s = 0;
    const int r = w.dim(0), c = w.dim(1);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) s += l.u[i] * w[i * c + j] * l.v[j];
    return s;
  };
  ParamList<double> params;
  d.collect(params);
  zero_grads(params);
  d.forward_train(z);
  D gz = d.backward(rs, rl);
  CHECK(relative_error(gz, finite_diff_grad<double>([&](const D& x) { return loss(d, x); }, z, 1e-5)) <= 1e-4);
  for (std::size_t i = 0; i < params.size(); ++i) {
    D fd = finite_diff_grad<double>(
        [&](const D& v) {
          Discriminator<double> d2 = d;
          ParamList<double> l2;
          d2.collect(l2);
          *l2[i].value = v;
          d2.dense1.sigma = refreshed(d2.dense1.weight, d2.dense1);
          d2.dense2.sigma = refreshed(d2.dense2.weight, d2.dense2);
          return loss(d2, z);
        },
        *params[i].value, 1e-5);
    INFO(params[i].name);
    CHECK(relative_error(*params[i].grad, fd) <= 1e-4);
  }
  auto bufs = d.buffers();
  REQUIRE(bufs.size() == 4);
  CHECK(bufs[0].first == "disc/dense1/u");
  CHECK(bufs[0].second->size() == 7);
  CHECK(bufs[1].second->size() == 12);
}

TEST_CASE("generator adversarial loss") {
  CHECK(generator_adv_loss(D({4}, 1.0)) == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(std::abs(generator_adv_loss(D({4}, 0.0)) - 0.5) <= 1e-6);
  CHECK(std::abs(generator_adv_loss(D({1}, 0.5)) - 0.125) <= 1e-6);
  Rng rng(16);
  D s = normal_tensor<double>({5}, rng, 1.0);
  CHECK(relative_error(generator_adv_loss_backward(s),
                       finite_diff_grad<double>([](const D& x) { return generator_adv_loss(x); }, s, 1e-6)) <= 1e-6);
}

TEST_CASE("age classification loss") {
  CHECK(std::abs(age_cls_loss(D({1, 4}), {2}) - std::log(4.0)) <= 1e-6);
  CHECK(std::abs(age_cls_loss(D({1, 4}), {2}) - 1.38629) <= 1e-5);
  D dominant({1, 4}, std::vector<double>{0, 0, 80, 0});
  CHECK(age_cls_loss(dominant, {2}) <= 1e-30);

  Rng rng(17);
  D logits = normal_tensor<double>({6, 4}, rng, 2.0);
  std::vector<int> t{0, 3, 1, 2, 2, 0};
  double direct = 0;
  for (int i = 0; i < 6; ++i)
    direct += softmax_ce({logits[i * 4], logits[i * 4 + 1], logits[i * 4 + 2], logits[i * 4 + 3]}, t[i]);
  CHECK(std::abs(age_cls_loss(logits, t) - direct / 6) <= 1e-7);
  CHECK(relative_error(age_cls_loss_backward(logits, t),
                       finite_diff_grad<double>([&](const D& x) { return age_cls_loss(x, t); }, logits, 1e-6)) <=
        1e-5);
  CHECK_THROWS_AS(age_cls_loss(logits, {0, 1}), ShapeError);
  CHECK_THROWS_AS(age_cls_loss(D({1, 4}), {4}), Fault);
}

TEST_CASE("total generator loss") {
  LossWeights w;
  CHECK(total_generator_loss({0, 0, 0, 0}, w) == 0.0);
  CHECK(std::abs(total_generator_loss({1, 1, 1, 1}, w) - 3.01) <= 1e-6);
  GeneratorLossParts p{0.3, 1.7, 0.2, 14.9};
  GeneratorLossParts p2{0.6, 3.4, 0.4, 29.8};
  CHECK(std::abs(total_generator_loss(p2, w) - 2 * total_generator_loss(p, w)) <= 1e-12);
  w.cl = -1;
  CHECK_THROWS_AS(w.validate(), ShapeError);
}

TEST_CASE("discriminator loss") {
  LossWeights w;
  D perfect({2, 4}, std::vector<double>{200, 0, 0, 0, 0, 0, 200, 0});
  CHECK(std::abs(discriminator_loss(D({2}, 1.0), D({3}, 0.0), perfect, {0, 2}, w)) <= 1e-6);

  D logits({2, 4}, std::vector<double>{0.3, -1, 2, 0.5, 1, 1, -0.2, 0});
  const double ce = age_cls_loss(logits, {1, 3});
  CHECK(std::abs(discriminator_loss(D({2}, 0.5), D({2}, 0.5), logits, {1, 3}, w) - (0.25 + w.acl_d * ce)) <= 1e-6);

  Rng rng(18);
  D sr = normal_tensor<double>({5}, rng, 1.0), sf = normal_tensor<double>({4}, rng, 1.0);
  D lr = normal_tensor<double>({5, 4}, rng, 1.0);
  std::vector<int> t{0, 1, 2, 3, 1};
  double real = 0, fake = 0, cls = 0;
  for (int i = 0; i < 5; ++i) real += 0.5 * (sr[i] - 1) * (sr[i] - 1) / 5;
  for (int i = 0; i < 4; ++i) fake += 0.5 * sf[i] * sf[i] / 4;
  for (int i = 0; i < 5; ++i) cls += softmax_ce({lr[i * 4], lr[i * 4 + 1], lr[i * 4 + 2], lr[i * 4 + 3]}, t[i]) / 5;
  CHECK(std::abs(discriminator_loss(sr, sf, lr, t, w) - (real + fake + w.acl_d * cls)) <= 1e-9);
}
