#include "ageflow/glow_model.hpp"

#include <cmath>
#include <numbers>

namespace ageflow {

void GlowConfig::validate() const {
  if (channels <= 0 || height <= 0 || width <= 0) throw ShapeError("glow: non-positive input shape");
  if (levels < 1 || steps < 1 || hidden < 1) throw ShapeError("glow: levels, steps and hidden must be >= 1");
  const int f = 1 << levels;
  if (height % f != 0 || width % f != 0) {
    throw ShapeError("glow: input " + std::to_string(height) + "x" + std::to_string(width) +
                     " not divisible by 2^" + std::to_string(levels));
  }
  if (bins < 2) throw ShapeError("glow: bins must be >= 2");
}

Shape GlowConfig::packed_shape() const {
  const int f = 1 << levels;
  return {dims() / ((height / f) * (width / f)), height / f, width / f};
}

namespace {

struct LevelShapes {
  std::vector<Shape> splits;  // [C,H,W] per split
  Shape final;
};

LevelShapes level_shapes(const GlowConfig& cfg) {
  LevelShapes s;
  int c = cfg.channels, h = cfg.height, w = cfg.width;
  for (int l = 0; l < cfg.levels; ++l) {
    c *= 4;
    h /= 2;
    w /= 2;
    if (l + 1 < cfg.levels) {
      s.splits.push_back({c / 2, h, w});
      c /= 2;
    }
  }
  s.final = {c, h, w};
  return s;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1);
  const std::size_t P = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
  if (b.dim(0) != N || static_cast<std::size_t>(b.dim(2)) * b.dim(3) != P) {
    throw ShapeError("concat_channels: incompatible shapes");
  }
  Tensor<T> out({N, Ca + Cb, a.dim(2), a.dim(3)});
  for (int n = 0; n < N; ++n) {
    std::copy_n(a.data() + n * Ca * P, Ca * P, out.data() + n * (Ca + Cb) * P);
    std::copy_n(b.data() + n * Cb * P, Cb * P, out.data() + n * (Ca + Cb) * P + Ca * P);
  }
  return out;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int begin, int end) {
  const int N = x.dim(0), C = x.dim(1);
  const std::size_t P = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor<T> out({N, end - begin, x.dim(2), x.dim(3)});
  for (int n = 0; n < N; ++n) {
    std::copy_n(x.data() + (n * C + begin) * P, (end - begin) * P, out.data() + n * (end - begin) * P);
  }
  return out;
}

template <typename T>
void require_finite(const Tensor<T>& t, int level, int step, const char* layer) {
  if (!t.all_finite()) {
    throw Fault(std::string("non-finite activation after ") + layer + " at level " +
                std::to_string(level) + ", step " + std::to_string(step));
  }
}

}  // namespace

template <typename T>
GlowModel<T>::GlowModel(const GlowConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  int c = config_.channels;
  for (int l = 0; l < config_.levels; ++l) {
    c *= 4;
    std::vector<FlowStep<T>> steps;
    for (int s = 0; s < config_.steps; ++s) {
      steps.push_back(FlowStep<T>{ActNorm<T>(c), InvConv1x1<T>(c, rng),
                                  make_glow_coupling<T>(c, config_.hidden, s % 2 == 1, rng)});
    }
    levels.push_back(std::move(steps));
    if (l + 1 < config_.levels) c /= 2;
  }
}

template <typename T>
bool GlowModel<T>::initialized() const {
  for (const auto& level : levels)
    for (const auto& step : level)
      if (!step.actnorm.initialized()) return false;
  return true;
}

template <typename T>
void GlowModel<T>::check_input(const Tensor<T>& x) const {
  require_rank(x, 4, "glow encode");
  if (x.dim(1) != config_.channels || x.dim(2) != config_.height || x.dim(3) != config_.width) {
    throw ShapeError("glow encode: input " + shape_string(x.shape()) + " does not match config");
  }
}

template <typename T>
void GlowModel<T>::initialize(const Tensor<T>& x) {
  check_input(x);
  Tensor<T> h = x;
  for (int l = 0; l < config_.levels; ++l) {
    h = squeeze(h);
    for (auto& step : levels[l]) {
      if (!step.actnorm.initialized()) step.actnorm.initialize(h);
      h = step.actnorm.forward(h, nullptr);
      h = step.invconv.forward(h, nullptr);
      h = step.coupling.forward(h, nullptr);
    }
    if (l + 1 < config_.levels) h = slice_channels(h, 0, h.dim(1) / 2);
  }
}

template <typename T>
template <bool Train, typename Self>
LatentState<T> GlowModel<T>::run_encode(Self& self, const Tensor<T>& x, T* logdet) {
  self.check_input(x);
  const GlowConfig& config_ = self.config_;
  auto& levels = self.levels;
  LatentState<T> z;
  T total = 0;
  Tensor<T> h = x;
  for (int l = 0; l < config_.levels; ++l) {
    h = squeeze(h);
    for (int s = 0; s < static_cast<int>(levels[l].size()); ++s) {
      auto& step = levels[l][s];
      T ld = 0;
      if constexpr (Train) {
        h = step.actnorm.forward_train(h, &ld);
        total += ld;
        h = step.invconv.forward_train(h, &ld);
        total += ld;
        h = step.coupling.forward_train(h, nullptr);
      } else {
        h = step.actnorm.forward(h, &ld);
        total += ld;
        h = step.invconv.forward(h, &ld);
        total += ld;
        h = step.coupling.forward(h, nullptr);
      }
      require_finite(h, l, s, "flow step");
    }
    if (l + 1 < config_.levels) {
      const int half = h.dim(1) / 2;
      z.splits.push_back(slice_channels(h, half, h.dim(1)));
      h = slice_channels(h, 0, half);
    }
  }
  z.final = std::move(h);
  if (logdet) *logdet = total;
  return z;
}

template <typename T>
LatentState<T> GlowModel<T>::encode(const Tensor<T>& x, T* logdet) const {
  return run_encode<false>(*this, x, logdet);
}

template <typename T>
LatentState<T> GlowModel<T>::encode_train(const Tensor<T>& x, T* logdet) {
  return run_encode<true>(*this, x, logdet);
}

template <typename T>
Tensor<T> GlowModel<T>::decode(const LatentState<T>& z) const {
  if (static_cast<int>(z.splits.size()) != config_.levels - 1) {
    throw ShapeError("glow decode: expected " + std::to_string(config_.levels - 1) + " split latents");
  }
  Tensor<T> h = z.final;
  for (int l = config_.levels - 1; l >= 0; --l) {
    if (l + 1 < config_.levels) h = concat_channels(h, z.splits[l]);
    for (int s = static_cast<int>(levels[l].size()) - 1; s >= 0; --s) {
      const auto& step = levels[l][s];
      h = step.coupling.inverse(h);
      h = step.invconv.inverse(h);
      h = step.actnorm.inverse(h);
    }
    h = unsqueeze(h);
  }
  return h;
}

template <typename T>
Tensor<T> GlowModel<T>::backward(const LatentState<T>& grad_z, T grad_logdet) {
  Tensor<T> g = grad_z.final;
  for (int l = config_.levels - 1; l >= 0; --l) {
    if (l + 1 < config_.levels) g = concat_channels(g, grad_z.splits[l]);
    for (int s = static_cast<int>(levels[l].size()) - 1; s >= 0; --s) {
      auto& step = levels[l][s];
      g = step.coupling.backward(g);
      g = step.invconv.backward(g, grad_logdet);
      g = step.actnorm.backward(g, grad_logdet);
    }
    g = unsqueeze(g);
  }
  return g;
}

template <typename T>
void GlowModel<T>::collect(ParamList<T>& out, const std::string& prefix) {
  for (std::size_t l = 0; l < levels.size(); ++l) {
    for (std::size_t s = 0; s < levels[l].size(); ++s) {
      const std::string p = prefix + "/" + std::to_string(l) + "/" + std::to_string(s);
      levels[l][s].actnorm.collect(out, p + "/actnorm");
      levels[l][s].invconv.collect(out, p + "/invconv");
      levels[l][s].coupling.collect(out, p + "/coupling");
    }
  }
}

// ----------------------------------------------------------- likelihood

template <typename T>
Tensor<T> preprocess(const Tensor<T>& pixels, const Tensor<T>& noise, int bins) {
  require_same_shape(pixels, noise, "preprocess");
  Tensor<T> x(pixels.shape());
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const T p = pixels[i];
    if (!(p >= 0 && p <= bins - 1)) {
      throw Fault("preprocess: pixel value " + std::to_string(p) + " outside [0," +
                  std::to_string(bins - 1) + "]");
    }
    x[i] = (p + noise[i]) / static_cast<T>(bins) - T(0.5);
  }
  return x;
}

template <typename T>
Tensor<T> preprocess(const Tensor<T>& pixels, Rng& rng, int bins) {
  Tensor<T> noise(pixels.shape());
  for (auto& u : noise.values()) u = static_cast<T>(rng.uniform());
  return preprocess(pixels, noise, bins);
}

template <typename T>
Tensor<T> preprocess_midpoint(const Tensor<T>& pixels, int bins) {
  return preprocess(pixels, Tensor<T>(pixels.shape(), T(0.5)), bins);
}

double preprocess_logdet(int dims, int bins) { return -static_cast<double>(dims) * std::log(bins); }

template <typename T>
Tensor<T> postprocess(const Tensor<T>& x, int bins) {
  Tensor<T> p(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = std::floor((static_cast<double>(x[i]) + 0.5) * bins);
    p[i] = static_cast<T>(std::clamp(v, 0.0, static_cast<double>(bins - 1)));
  }
  return p;
}

template <typename T>
std::vector<double> gaussian_log_density(const LatentState<T>& z) {
  const int N = z.batch();
  std::vector<double> out(N, 0.0);
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  auto add = [&](const Tensor<T>& t) {
    const std::size_t per = t.size() / N;
    for (int n = 0; n < N; ++n) {
      double acc = 0;
      for (std::size_t i = 0; i < per; ++i) {
        const double v = t[n * per + i];
        acc += -0.5 * v * v - half_log_2pi;
      }
      out[n] += acc;
    }
  };
  for (const auto& s : z.splits) add(s);
  add(z.final);
  return out;
}

template <typename T>
std::vector<double> nll(const GlowModel<T>& model, const Tensor<T>& x) {
  T logdet = 0;
  const LatentState<T> z = model.encode(x, &logdet);
  std::vector<double> out = gaussian_log_density(z);
  const double pre = preprocess_logdet(model.config().dims(), model.config().bins);
  for (double& v : out) {
    v = -(v + static_cast<double>(logdet) + pre);
    if (!std::isfinite(v)) throw Fault("nll: non-finite likelihood");
  }
  return out;
}

template <typename T>
Tensor<T> sample(const GlowModel<T>& model, int count, double temperature, Rng& rng) {
  const GlowConfig& cfg = model.config();
  const LevelShapes shapes = level_shapes(cfg);
  auto draw = [&](const Shape& chw) {
    Tensor<T> t({count, chw[0], chw[1], chw[2]});
    for (auto& v : t.values()) v = static_cast<T>(temperature * rng.normal());
    return t;
  };
  LatentState<T> z;
  for (const auto& s : shapes.splits) z.splits.push_back(draw(s));
  z.final = draw(shapes.final);
  return postprocess(model.decode(z), cfg.bins);
}

// ---------------------------------------------------------------- packing

template <typename T>
Tensor<T> pack_latent(const LatentState<T>& z) {
  Tensor<T> packed = z.final;
  const int final_h = z.final.dim(2);
  // Splits first, in level order, then the deepest tensor.
  for (int l = static_cast<int>(z.splits.size()) - 1; l >= 0; --l) {
    Tensor<T> s = z.splits[l];
    while (s.dim(2) > final_h) s = squeeze(s);
    packed = concat_channels(s, packed);
  }
  return packed;
}

template <typename T>
LatentState<T> unpack_latent(const Tensor<T>& packed, const GlowConfig& config) {
  const LevelShapes shapes = level_shapes(config);
  const Shape expect = config.packed_shape();
  require_rank(packed, 4, "unpack_latent");
  if (packed.dim(1) != expect[0] || packed.dim(2) != expect[1] || packed.dim(3) != expect[2]) {
    throw ShapeError("unpack_latent: packed shape " + shape_string(packed.shape()) + " does not match config");
  }
  LatentState<T> z;
  int offset = 0;
  for (const auto& s : shapes.splits) {
    int squeezes = 0;
    for (int h = s[1]; h > expect[1]; h /= 2) ++squeezes;
    const int ch = s[0] << (2 * squeezes);
    Tensor<T> part = slice_channels(packed, offset, offset + ch);
    for (int i = 0; i < squeezes; ++i) part = unsqueeze(part);
    z.splits.push_back(std::move(part));
    offset += ch;
  }
  z.final = slice_channels(packed, offset, packed.dim(1));
  return z;
}

#define AGEFLOW_INSTANTIATE_GLOW(T)                                                          \
  template class GlowModel<T>;                                                               \
  template Tensor<T> preprocess<T>(const Tensor<T>&, const Tensor<T>&, int);                 \
  template Tensor<T> preprocess<T>(const Tensor<T>&, Rng&, int);                             \
  template Tensor<T> preprocess_midpoint<T>(const Tensor<T>&, int);                          \
  template Tensor<T> postprocess<T>(const Tensor<T>&, int);                                  \
  template std::vector<double> gaussian_log_density<T>(const LatentState<T>&);               \
  template std::vector<double> nll<T>(const GlowModel<T>&, const Tensor<T>&);                \
  template Tensor<T> sample<T>(const GlowModel<T>&, int, double, Rng&);                      \
  template Tensor<T> pack_latent<T>(const LatentState<T>&);                                  \
  template LatentState<T> unpack_latent<T>(const Tensor<T>&, const GlowConfig&);

AGEFLOW_INSTANTIATE_GLOW(float)
AGEFLOW_INSTANTIATE_GLOW(double)

}  // namespace ageflow
