#include "ageflow/adversary.hpp"

#include <cmath>

namespace ageflow {

namespace {

template <typename T>
T normalize(Tensor<T>& x) {
  double n = 0;
  for (T v : x.values()) n += static_cast<double>(v) * v;
  n = std::sqrt(n);
  const double inv = 1.0 / std::max(n, 1e-12);
  for (auto& v : x.values()) v = static_cast<T>(v * inv);
  return static_cast<T>(n);
}

// y = W x for W [rows, cols].
template <typename T>
Tensor<T> matvec(const Tensor<T>& w, const Tensor<T>& x) {
  const int rows = w.dim(0), cols = w.dim(1);
  Tensor<T> y({rows});
  for (int i = 0; i < rows; ++i) {
    T acc = 0;
    const T* row = w.data() + static_cast<std::size_t>(i) * cols;
    for (int j = 0; j < cols; ++j) acc += row[j] * x[j];
    y[i] = acc;
  }
  return y;
}

// y = W^T x.
template <typename T>
Tensor<T> matvec_t(const Tensor<T>& w, const Tensor<T>& x) {
  const int rows = w.dim(0), cols = w.dim(1);
  Tensor<T> y({cols});
  for (int i = 0; i < rows; ++i) {
    const T* row = w.data() + static_cast<std::size_t>(i) * cols;
    const T xi = x[i];
    for (int j = 0; j < cols; ++j) y[j] += row[j] * xi;
  }
  return y;
}

template <typename T>
T bilinear(const Tensor<T>& w, const Tensor<T>& u, const Tensor<T>& v) {
  const Tensor<T> wv = matvec(w, v);
  T acc = 0;
  for (std::size_t i = 0; i < u.size(); ++i) acc += u[i] * wv[i];
  return acc;
}

}  // namespace

template <typename T>
SpectralResult<T> spectral_normalize(const Tensor<T>& weight, const Tensor<T>& u, int iters) {
  require_rank(weight, 2, "spectral_normalize");
  if (u.size() != static_cast<std::size_t>(weight.dim(0))) throw ShapeError("spectral_normalize: u length mismatch");
  if (iters < 1) throw ShapeError("spectral_normalize: need at least one iteration");
  SpectralResult<T> r{Tensor<T>(), u, Tensor<T>({weight.dim(1)}), T(0)};
  normalize(r.u);
  for (int k = 0; k < iters; ++k) {
    r.v = matvec_t(weight, r.u);
    normalize(r.v);
    r.u = matvec(weight, r.v);
    normalize(r.u);
  }
  r.sigma = bilinear(weight, r.u, r.v);
  r.weight = weight;
  scale_inplace(r.weight, T(1) / r.sigma);
  return r;
}

template <typename T>
SNDense<T>::SNDense(int in, int out, Rng& rng)
    : weight(normal_tensor<T>({out, in}, rng, std::sqrt(1.0 / in))),
      bias({out}),
      grad_weight({out, in}),
      grad_bias({out}),
      u(normal_tensor<T>({out}, rng, 1.0)),
      v({in}) {
  normalize(u);
  power_iterate(1);
}

template <typename T>
void SNDense<T>::power_iterate(int iters) {
  SpectralResult<T> r = spectral_normalize(weight, u, iters);
  u = std::move(r.u);
  v = std::move(r.v);
  sigma = r.sigma;
}

template <typename T>
void SNDense<T>::refresh_sigma() {
  sigma = bilinear(weight, u, v);
}

template <typename T>
Tensor<T> SNDense<T>::normalized_weight() const {
  Tensor<T> w = weight;
  scale_inplace(w, T(1) / sigma);
  return w;
}

template <typename T>
Tensor<T> SNDense<T>::forward(const Tensor<T>& x) const {
  return kernels::dense(x, normalized_weight(), bias);
}

template <typename T>
Tensor<T> SNDense<T>::forward_train(const Tensor<T>& x) {
  input_ = x;
  return forward(x);
}

template <typename T>
Tensor<T> SNDense<T>::backward(const Tensor<T>& grad_y) {
  const Tensor<T> w_hat = normalized_weight();
  Tensor<T> gx, gw(weight.shape());
  kernels::dense_backward(input_, w_hat, grad_y, &gx, &gw, &grad_bias);
  double inner = 0;
  for (std::size_t i = 0; i < gw.size(); ++i) inner += static_cast<double>(gw[i]) * w_hat[i];
  const int rows = weight.dim(0), cols = weight.dim(1);
  const T inv_sigma = T(1) / sigma;
  for (int i = 0; i < rows; ++i) {
    const T ui = static_cast<T>(inner) * u[i];
    T* g = grad_weight.data() + static_cast<std::size_t>(i) * cols;
    const T* gi = gw.data() + static_cast<std::size_t>(i) * cols;
    for (int j = 0; j < cols; ++j) g[j] += (gi[j] - ui * v[j]) * inv_sigma;
  }
  return gx;
}

template <typename T>
void SNDense<T>::collect(ParamList<T>& out, const std::string& prefix) {
  out.push_back({prefix + "/w", &weight, &grad_weight});
  out.push_back({prefix + "/b", &bias, &grad_bias});
}

// ------------------------------------------------------------ discriminator

template <typename T>
Discriminator<T>::Discriminator(const DiscriminatorConfig& config, Rng& rng)
    : dense1(config.input, config.hidden, rng),
      dense2(config.hidden, config.hidden, rng),
      head_gan(config.hidden, 1, rng),
      head_age(config.hidden, config.groups, rng),
      config_(config) {}

template <typename T>
void Discriminator<T>::power_iterate(int iters) {
  dense1.power_iterate(iters);
  dense2.power_iterate(iters);
}

template <typename T>
void Discriminator<T>::refresh_sigma() {
  dense1.refresh_sigma();
  dense2.refresh_sigma();
}

template <typename T>
Tensor<T> Discriminator<T>::flatten(const Tensor<T>& z) const {
  const int N = z.dim(0);
  if (z.size() != static_cast<std::size_t>(N) * config_.input) {
    throw ShapeError("discriminate: expected " + std::to_string(config_.input) +
                     " features per sample, got " + shape_string(z.shape()));
  }
  return z.reshaped({N, config_.input});
}

template <typename T>
DiscriminatorOutput<T> Discriminator<T>::forward(const Tensor<T>& z) const {
  const T slope = static_cast<T>(config_.slope);
  Tensor<T> h = kernels::leaky_relu(dense1.forward(flatten(z)), slope);
  h = kernels::leaky_relu(dense2.forward(h), slope);
  Tensor<T> score = head_gan.forward(h);
  return {score.reshaped({z.dim(0)}), head_age.forward(h)};
}

template <typename T>
DiscriminatorOutput<T> Discriminator<T>::forward_train(const Tensor<T>& z) {
  const T slope = static_cast<T>(config_.slope);
  input_shape_ = z.shape();
  a1_ = dense1.forward_train(flatten(z));
  a2_ = dense2.forward_train(kernels::leaky_relu(a1_, slope));
  Tensor<T> h = kernels::leaky_relu(a2_, slope);
  Tensor<T> score = head_gan.forward_train(h);
  return {score.reshaped({z.dim(0)}), head_age.forward_train(h)};
}

template <typename T>
Tensor<T> Discriminator<T>::backward(const Tensor<T>& grad_score, const Tensor<T>& grad_logits) {
  const T slope = static_cast<T>(config_.slope);
  const int N = input_shape_[0];
  Tensor<T> gh = head_gan.backward(grad_score.reshaped({N, 1}));
  add_inplace(gh, head_age.backward(grad_logits));
  Tensor<T> g = dense2.backward(kernels::leaky_relu_backward(a2_, gh, slope));
  g = dense1.backward(kernels::leaky_relu_backward(a1_, g, slope));
  return g.reshaped(input_shape_);
}

template <typename T>
void Discriminator<T>::collect(ParamList<T>& out, const std::string& prefix) {
  dense1.collect(out, prefix + "/dense1");
  dense2.collect(out, prefix + "/dense2");
  head_gan.collect(out, prefix + "/head_gan");
  head_age.collect(out, prefix + "/head_age");
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> Discriminator<T>::buffers(const std::string& prefix) {
  return {{prefix + "/dense1/u", &dense1.u},
          {prefix + "/dense1/v", &dense1.v},
          {prefix + "/dense2/u", &dense2.u},
          {prefix + "/dense2/v", &dense2.v}};
}

// ------------------------------------------------------------------ losses

void LossWeights::validate() const {
  if (akd < 0 || al < 0 || acl < 0 || cl < 0 || acl_d < 0) throw ShapeError("loss weights must be non-negative");
}

template <typename T>
double generator_adv_loss(const Tensor<T>& scores) {
  if (scores.size() == 0) throw ShapeError("generator_adv_loss: empty batch");
  double acc = 0;
  for (T s : scores.values()) acc += (static_cast<double>(s) - 1.0) * (static_cast<double>(s) - 1.0);
  return 0.5 * acc / static_cast<double>(scores.size());
}

template <typename T>
Tensor<T> generator_adv_loss_backward(const Tensor<T>& scores) {
  Tensor<T> g(scores.shape());
  const T inv = T(1) / static_cast<T>(scores.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = (scores[i] - T(1)) * inv;
  return g;
}

namespace {

template <typename T>
void check_targets(const Tensor<T>& logits, const std::vector<int>& targets) {
  require_rank(logits, 2, "age_cls_loss");
  if (static_cast<int>(targets.size()) != logits.dim(0)) throw ShapeError("age_cls_loss: target count mismatch");
  for (int t : targets)
    if (t < 0 || t >= logits.dim(1)) throw Fault("age_cls_loss: target " + std::to_string(t) + " out of range");
}

template <typename T>
std::vector<double> log_softmax_row(const T* row, int n) {
  double mx = row[0];
  for (int k = 1; k < n; ++k) mx = std::max(mx, static_cast<double>(row[k]));
  double z = 0;
  for (int k = 0; k < n; ++k) z += std::exp(row[k] - mx);
  const double lz = mx + std::log(z);
  std::vector<double> out(n);
  for (int k = 0; k < n; ++k) out[k] = row[k] - lz;
  return out;
}

}  // namespace

template <typename T>
double age_cls_loss(const Tensor<T>& logits, const std::vector<int>& targets) {
  check_targets(logits, targets);
  const int N = logits.dim(0), n = logits.dim(1);
  double acc = 0;
  for (int i = 0; i < N; ++i) acc -= log_softmax_row(logits.data() + static_cast<std::size_t>(i) * n, n)[targets[i]];
  return acc / N;
}

template <typename T>
Tensor<T> age_cls_loss_backward(const Tensor<T>& logits, const std::vector<int>& targets) {
  check_targets(logits, targets);
  const int N = logits.dim(0), n = logits.dim(1);
  Tensor<T> g(logits.shape());
  for (int i = 0; i < N; ++i) {
    const auto ls = log_softmax_row(logits.data() + static_cast<std::size_t>(i) * n, n);
    for (int k = 0; k < n; ++k) {
      g[static_cast<std::size_t>(i) * n + k] =
          static_cast<T>((std::exp(ls[k]) - (k == targets[i] ? 1.0 : 0.0)) / N);
    }
  }
  return g;
}

double total_generator_loss(const GeneratorLossParts& p, const LossWeights& w) {
  return w.akd * p.akd + w.al * p.al + w.acl * p.acl + w.cl * p.cl;
}

template <typename T>
double discriminator_loss(const Tensor<T>& scores_real, const Tensor<T>& scores_fake,
                          const Tensor<T>& real_logits, const std::vector<int>& real_targets,
                          const LossWeights& weights) {
  if (scores_real.size() == 0 || scores_fake.size() == 0) throw ShapeError("discriminator_loss: empty batch");
  double real = 0, fake = 0;
  for (T s : scores_real.values()) real += (static_cast<double>(s) - 1.0) * (static_cast<double>(s) - 1.0);
  for (T s : scores_fake.values()) fake += static_cast<double>(s) * s;
  return 0.5 * real / scores_real.size() + 0.5 * fake / scores_fake.size() +
         weights.acl_d * age_cls_loss(real_logits, real_targets);
}

#define AGEFLOW_INSTANTIATE_ADVERSARY(T)                                                         \
  template SpectralResult<T> spectral_normalize<T>(const Tensor<T>&, const Tensor<T>&, int);     \
  template class SNDense<T>;                                                                     \
  template class Discriminator<T>;                                                               \
  template double generator_adv_loss<T>(const Tensor<T>&);                                       \
  template Tensor<T> generator_adv_loss_backward<T>(const Tensor<T>&);                           \
  template double age_cls_loss<T>(const Tensor<T>&, const std::vector<int>&);                    \
  template Tensor<T> age_cls_loss_backward<T>(const Tensor<T>&, const std::vector<int>&);        \
  template double discriminator_loss<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                        const std::vector<int>&, const LossWeights&);

AGEFLOW_INSTANTIATE_ADVERSARY(float)
AGEFLOW_INSTANTIATE_ADVERSARY(double)

}  // namespace ageflow
