#include "ageflow/flow_layers.hpp"

#include <cmath>
#include <numeric>

namespace ageflow {

// ---------------------------------------------------------------- ActNorm

template <typename T>
void ActNorm<T>::check_input(const Tensor<T>& x, const char* what) const {
  require_rank(x, 4, what);
  if (x.dim(1) != channels()) {
    throw ShapeError(std::string(what) + ": expected " + std::to_string(channels()) +
                     " channels, got " + shape_string(x.shape()));
  }
}

template <typename T>
void ActNorm<T>::initialize(const Tensor<T>& batch) {
  check_input(batch, "actnorm_init");
  const int N = batch.dim(0), C = batch.dim(1);
  const std::size_t P = static_cast<std::size_t>(batch.dim(2)) * batch.dim(3);
  const std::size_t count = static_cast<std::size_t>(N) * P;
  if (count < 2) throw ShapeError("actnorm_init: need at least two values per channel");
  for (int c = 0; c < C; ++c) {
    double mean = 0;
    for (int n = 0; n < N; ++n) {
      const T* p = batch.data() + (static_cast<std::size_t>(n) * C + c) * P;
      for (std::size_t i = 0; i < P; ++i) mean += p[i];
    }
    mean /= static_cast<double>(count);
    double var = 0;
    for (int n = 0; n < N; ++n) {
      const T* p = batch.data() + (static_cast<std::size_t>(n) * C + c) * P;
      for (std::size_t i = 0; i < P; ++i) var += (p[i] - mean) * (p[i] - mean);
    }
    var /= static_cast<double>(count);
    if (!(var > 1e-12)) {
      throw Fault("actnorm_init: channel " + std::to_string(c) + " has zero variance");
    }
    const double stddev = std::sqrt(var);
    log_scale[c] = static_cast<T>(-std::log(stddev));
    bias[c] = static_cast<T>(-mean / stddev);
  }
  initialized_ = true;
}

template <typename T>
T ActNorm<T>::logdet(int height, int width) const {
  T s = 0;
  for (T v : log_scale.values()) s += v;
  return static_cast<T>(height) * static_cast<T>(width) * s;
}

template <typename T>
Tensor<T> ActNorm<T>::forward(const Tensor<T>& x, T* logdet_out) const {
  check_input(x, "actnorm_forward");
  if (!initialized_) throw Fault("actnorm_forward: parameters not initialized");
  const int N = x.dim(0), C = x.dim(1);
  const std::size_t P = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor<T> y(x.shape());
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const T s = std::exp(log_scale[c]), b = bias[c];
      const std::size_t off = (static_cast<std::size_t>(n) * C + c) * P;
      for (std::size_t i = 0; i < P; ++i) y[off + i] = s * x[off + i] + b;
    }
  }
  if (logdet_out) *logdet_out = logdet(x.dim(2), x.dim(3));
  return y;
}

template <typename T>
Tensor<T> ActNorm<T>::inverse(const Tensor<T>& y) const {
  check_input(y, "actnorm_inverse");
  if (!initialized_) throw Fault("actnorm_inverse: parameters not initialized");
  const int N = y.dim(0), C = y.dim(1);
  const std::size_t P = static_cast<std::size_t>(y.dim(2)) * y.dim(3);
  Tensor<T> x(y.shape());
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const T inv_s = std::exp(-log_scale[c]), b = bias[c];
      const std::size_t off = (static_cast<std::size_t>(n) * C + c) * P;
      for (std::size_t i = 0; i < P; ++i) x[off + i] = (y[off + i] - b) * inv_s;
    }
  }
  return x;
}

template <typename T>
Tensor<T> ActNorm<T>::forward_train(const Tensor<T>& x, T* logdet_out) {
  input_ = x;
  return forward(x, logdet_out);
}

template <typename T>
Tensor<T> ActNorm<T>::backward(const Tensor<T>& grad_y, T grad_logdet) {
  require_same_shape(grad_y, input_, "actnorm_backward");
  const int N = grad_y.dim(0), C = grad_y.dim(1);
  const std::size_t P = static_cast<std::size_t>(grad_y.dim(2)) * grad_y.dim(3);
  Tensor<T> gx(grad_y.shape());
  for (int c = 0; c < C; ++c) {
    const T s = std::exp(log_scale[c]);
    T g_scale = 0, g_bias = 0;
    for (int n = 0; n < N; ++n) {
      const std::size_t off = (static_cast<std::size_t>(n) * C + c) * P;
      for (std::size_t i = 0; i < P; ++i) {
        const T g = grad_y[off + i];
        g_bias += g;
        g_scale += g * input_[off + i];
        gx[off + i] = g * s;
      }
    }
    grad_log_scale[c] += g_scale * s + grad_logdet * static_cast<T>(P);
    grad_bias[c] += g_bias;
  }
  return gx;
}

template <typename T>
void ActNorm<T>::collect(ParamList<T>& out, const std::string& prefix) {
  out.push_back({prefix + "/log_scale", &log_scale, &grad_log_scale});
  out.push_back({prefix + "/bias", &bias, &grad_bias});
}

// ------------------------------------------------------------- InvConv1x1

namespace {

struct LuFactors {
  std::vector<int> perm;  // row j of the matrix is row perm[j] of L*U
  std::vector<double> lu;  // packed: strict lower = L, upper incl. diag = U
};

LuFactors lu_decompose(const Tensor<double>& w) {
  const int C = w.dim(0);
  std::vector<double> a(w.values().begin(), w.values().end());
  std::vector<int> piv(C);
  std::iota(piv.begin(), piv.end(), 0);
  for (int k = 0; k < C; ++k) {
    int best = k;
    for (int i = k + 1; i < C; ++i) {
      if (std::abs(a[i * C + k]) > std::abs(a[best * C + k])) best = i;
    }
    if (std::abs(a[best * C + k]) < 1e-12) throw Fault("invconv: matrix is singular");
    if (best != k) {
      for (int j = 0; j < C; ++j) std::swap(a[k * C + j], a[best * C + j]);
      std::swap(piv[k], piv[best]);
    }
    for (int i = k + 1; i < C; ++i) {
      a[i * C + k] /= a[k * C + k];
      for (int j = k + 1; j < C; ++j) a[i * C + j] -= a[i * C + k] * a[k * C + j];
    }
  }
  // Row i of L*U equals row piv[i] of w, so row j of w is row inv[j] of L*U.
  LuFactors f;
  f.perm.assign(C, 0);
  for (int i = 0; i < C; ++i) f.perm[piv[i]] = i;
  f.lu = std::move(a);
  return f;
}

}  // namespace

template <typename T>
InvConv1x1<T>::InvConv1x1(int channels, Rng& rng) {
  // Random rotation: Gram-Schmidt on a Gaussian matrix.
  Tensor<double> q({channels, channels});
  for (auto& v : q.values()) v = rng.normal();
  for (int i = 0; i < channels; ++i) {
    double* row = q.data() + static_cast<std::size_t>(i) * channels;
    for (int j = 0; j < i; ++j) {
      const double* prev = q.data() + static_cast<std::size_t>(j) * channels;
      double dot = 0;
      for (int k = 0; k < channels; ++k) dot += row[k] * prev[k];
      for (int k = 0; k < channels; ++k) row[k] -= dot * prev[k];
    }
    double norm = 0;
    for (int k = 0; k < channels; ++k) norm += row[k] * row[k];
    norm = std::sqrt(norm);
    for (int k = 0; k < channels; ++k) row[k] /= norm;
  }
  init_from(q);
}

template <typename T>
InvConv1x1<T> InvConv1x1<T>::from_matrix(const Tensor<double>& w) {
  InvConv1x1 layer;
  layer.init_from(w);
  return layer;
}

template <typename T>
void InvConv1x1<T>::init_from(const Tensor<double>& w) {
  require_rank(w, 2, "invconv matrix");
  const int C = w.dim(0);
  if (w.dim(1) != C) throw ShapeError("invconv: matrix must be square");
  const LuFactors f = lu_decompose(w);
  perm = f.perm;
  sign = Tensor<T>({C});
  lower = Tensor<T>({C, C});
  upper = Tensor<T>({C, C});
  log_diag = Tensor<T>({C});
  for (int i = 0; i < C; ++i) {
    for (int j = 0; j < C; ++j) {
      const double v = f.lu[i * C + j];
      if (j < i) lower[static_cast<std::size_t>(i) * C + j] = static_cast<T>(v);
      if (j > i) upper[static_cast<std::size_t>(i) * C + j] = static_cast<T>(v);
    }
    const double d = f.lu[i * C + i];
    sign[i] = d < 0 ? T(-1) : T(1);
    log_diag[i] = static_cast<T>(std::log(std::abs(d)));
  }
  grad_lower = Tensor<T>(lower.shape());
  grad_upper = Tensor<T>(upper.shape());
  grad_log_diag = Tensor<T>(log_diag.shape());
}

template <typename T>
Tensor<T> InvConv1x1<T>::weight() const {
  const int C = channels();
  // M = L * U' with unit diagonal on L.
  Tensor<T> m({C, C});
  for (int i = 0; i < C; ++i) {
    for (int j = 0; j < C; ++j) {
      T acc = 0;
      for (int k = 0; k <= std::min(i, j); ++k) {
        const T l = k == i ? T(1) : lower[static_cast<std::size_t>(i) * C + k];
        const T u = k == j ? sign[k] * std::exp(log_diag[k]) : upper[static_cast<std::size_t>(k) * C + j];
        acc += l * u;
      }
      m[static_cast<std::size_t>(i) * C + j] = acc;
    }
  }
  Tensor<T> w({C, C});
  for (int j = 0; j < C; ++j) {
    std::copy_n(m.data() + static_cast<std::size_t>(perm[j]) * C, C, w.data() + static_cast<std::size_t>(j) * C);
  }
  return w;
}

template <typename T>
T InvConv1x1<T>::logdet(int height, int width) const {
  T s = 0;
  for (T v : log_diag.values()) s += v;
  return static_cast<T>(height) * static_cast<T>(width) * s;
}

template <typename T>
Tensor<T> InvConv1x1<T>::forward(const Tensor<T>& x, T* logdet_out) const {
  require_rank(x, 4, "invconv_forward");
  const int N = x.dim(0), C = x.dim(1);
  if (C != channels()) throw ShapeError("invconv_forward: channel mismatch");
  const int P = x.dim(2) * x.dim(3);
  const Tensor<T> w = weight();
  Tensor<T> y(x.shape());
  for (int n = 0; n < N; ++n) {
    const std::size_t off = static_cast<std::size_t>(n) * C * P;
    kernels::gemm(false, false, C, P, C, w.data(), x.data() + off, y.data() + off, false);
  }
  if (logdet_out) *logdet_out = logdet(x.dim(2), x.dim(3));
  return y;
}

template <typename T>
Tensor<T> InvConv1x1<T>::inverse(const Tensor<T>& y) const {
  require_rank(y, 4, "invconv_inverse");
  const int N = y.dim(0), C = y.dim(1);
  if (C != channels()) throw ShapeError("invconv_inverse: channel mismatch");
  const std::size_t P = static_cast<std::size_t>(y.dim(2)) * y.dim(3);
  std::vector<T> diag(C);
  for (int i = 0; i < C; ++i) diag[i] = sign[i] * std::exp(log_diag[i]);
  Tensor<T> x(y.shape());
  std::vector<T> v(C);
  for (int n = 0; n < N; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * C * P;
    for (std::size_t p = 0; p < P; ++p) {
      // P^T y
      for (int j = 0; j < C; ++j) v[perm[j]] = y[base + j * P + p];
      // L v' = v
      for (int i = 0; i < C; ++i) {
        T acc = v[i];
        for (int k = 0; k < i; ++k) acc -= lower[static_cast<std::size_t>(i) * C + k] * v[k];
        v[i] = acc;
      }
      // U' x = v'
      for (int i = C - 1; i >= 0; --i) {
        T acc = v[i];
        for (int k = i + 1; k < C; ++k) acc -= upper[static_cast<std::size_t>(i) * C + k] * v[k];
        v[i] = acc / diag[i];
      }
      for (int i = 0; i < C; ++i) x[base + i * P + p] = v[i];
    }
  }
  return x;
}

template <typename T>
Tensor<T> InvConv1x1<T>::forward_train(const Tensor<T>& x, T* logdet_out) {
  input_ = x;
  return forward(x, logdet_out);
}

template <typename T>
Tensor<T> InvConv1x1<T>::backward(const Tensor<T>& grad_y, T grad_logdet) {
  require_same_shape(grad_y, input_, "invconv_backward");
  const int N = grad_y.dim(0), C = grad_y.dim(1);
  const int P = grad_y.dim(2) * grad_y.dim(3);
  const Tensor<T> w = weight();
  Tensor<T> gx(grad_y.shape());
  Tensor<T> gw({C, C});
  for (int n = 0; n < N; ++n) {
    const std::size_t off = static_cast<std::size_t>(n) * C * P;
    kernels::gemm(true, false, C, P, C, w.data(), grad_y.data() + off, gx.data() + off, false);
    kernels::gemm(false, true, C, C, P, grad_y.data() + off, input_.data() + off, gw.data(), true);
  }
  // dM = P^T dW: row perm[j] of dM is row j of dW.
  Tensor<T> gm({C, C});
  for (int j = 0; j < C; ++j) {
    std::copy_n(gw.data() + static_cast<std::size_t>(j) * C, C, gm.data() + static_cast<std::size_t>(perm[j]) * C);
  }
  auto l_at = [&](int i, int k) { return i == k ? T(1) : (k < i ? lower[static_cast<std::size_t>(i) * C + k] : T(0)); };
  auto u_at = [&](int k, int j) {
    if (k == j) return sign[k] * std::exp(log_diag[k]);
    return k < j ? upper[static_cast<std::size_t>(k) * C + j] : T(0);
  };
  // M = L U': dL = dM U'^T (strict lower), dU' = L^T dM (upper incl. diag).
  for (int i = 0; i < C; ++i) {
    for (int k = 0; k < C; ++k) {
      if (k < i) {
        T acc = 0;
        for (int j = k; j < C; ++j) acc += gm[static_cast<std::size_t>(i) * C + j] * u_at(k, j);
        grad_lower[static_cast<std::size_t>(i) * C + k] += acc;
      } else {
        T acc = 0;
        for (int r = i; r < C; ++r) acc += l_at(r, i) * gm[static_cast<std::size_t>(r) * C + k];
        if (k == i) {
          grad_log_diag[i] += acc * sign[i] * std::exp(log_diag[i]) +
                              grad_logdet * static_cast<T>(P);
        } else {
          grad_upper[static_cast<std::size_t>(i) * C + k] += acc;
        }
      }
    }
  }
  return gx;
}

template <typename T>
void InvConv1x1<T>::collect(ParamList<T>& out, const std::string& prefix) {
  out.push_back({prefix + "/lower", &lower, &grad_lower});
  out.push_back({prefix + "/upper", &upper, &grad_upper});
  out.push_back({prefix + "/log_diag", &log_diag, &grad_log_diag});
}

// --------------------------------------------------------------- coupling

template <typename T>
Tensor<T> gather_channels(const Tensor<T>& x, const std::vector<int>& channels) {
  require_rank(x, 4, "gather_channels");
  const int N = x.dim(0), C = x.dim(1);
  const int K = static_cast<int>(channels.size());
  const std::size_t P = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor<T> out({N, K, x.dim(2), x.dim(3)});
  for (int n = 0; n < N; ++n) {
    for (int k = 0; k < K; ++k) {
      std::copy_n(x.data() + (static_cast<std::size_t>(n) * C + channels[k]) * P, P,
                  out.data() + (static_cast<std::size_t>(n) * K + k) * P);
    }
  }
  return out;
}

template <typename T>
void scatter_channels(Tensor<T>& dst, const Tensor<T>& src, const std::vector<int>& channels) {
  const int N = dst.dim(0), C = dst.dim(1);
  const int K = static_cast<int>(channels.size());
  const std::size_t P = static_cast<std::size_t>(dst.dim(2)) * dst.dim(3);
  if (src.dim(0) != N || src.dim(1) != K) throw ShapeError("scatter_channels: shape mismatch");
  for (int n = 0; n < N; ++n) {
    for (int k = 0; k < K; ++k) {
      std::copy_n(src.data() + (static_cast<std::size_t>(n) * K + k) * P, P,
                  dst.data() + (static_cast<std::size_t>(n) * C + channels[k]) * P);
    }
  }
}

std::pair<std::vector<int>, std::vector<int>> halves_partition(int channels, bool swap) {
  if (channels % 2 != 0) {
    throw ShapeError("coupling: channel count " + std::to_string(channels) + " is odd");
  }
  std::vector<int> first(channels / 2), second(channels / 2);
  std::iota(first.begin(), first.end(), 0);
  std::iota(second.begin(), second.end(), channels / 2);
  if (swap) return {second, first};
  return {first, second};
}

template <typename T>
GlowCoupling<T> make_glow_coupling(int channels, int hidden, bool swap, Rng& rng) {
  auto [cond, update] = halves_partition(channels, swap);
  return GlowCoupling<T>(cond, update, ConvSubnet<T>(channels / 2, channels / 2, hidden, rng));
}

// ---------------------------------------------------------------- squeeze

template <typename T>
Tensor<T> squeeze(const Tensor<T>& x) {
  require_rank(x, 4, "squeeze");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 != 0 || W % 2 != 0) {
    throw ShapeError("squeeze: spatial dims must be even, got " + shape_string(x.shape()));
  }
  Tensor<T> y({N, 4 * C, H / 2, W / 2});
  for (int n = 0; n < N; ++n)
    for (int i = 0; i < C; ++i)
      for (int c = 0; c < 4; ++c)
        for (int h = 0; h < H / 2; ++h)
          for (int w = 0; w < W / 2; ++w) y.at(n, 4 * i + c, h, w) = x.at(n, i, 2 * h + c / 2, 2 * w + c % 2);
  return y;
}

template <typename T>
Tensor<T> unsqueeze(const Tensor<T>& y) {
  require_rank(y, 4, "unsqueeze");
  const int N = y.dim(0), C4 = y.dim(1), H2 = y.dim(2), W2 = y.dim(3);
  if (C4 % 4 != 0) throw ShapeError("unsqueeze: channel count must be divisible by 4");
  const int C = C4 / 4;
  Tensor<T> x({N, C, 2 * H2, 2 * W2});
  for (int n = 0; n < N; ++n)
    for (int i = 0; i < C; ++i)
      for (int c = 0; c < 4; ++c)
        for (int h = 0; h < H2; ++h)
          for (int w = 0; w < W2; ++w) x.at(n, i, 2 * h + c / 2, 2 * w + c % 2) = y.at(n, 4 * i + c, h, w);
  return x;
}

#define AGEFLOW_INSTANTIATE_FLOW(T)                                                         \
  template class ActNorm<T>;                                                                \
  template class InvConv1x1<T>;                                                             \
  template Tensor<T> gather_channels<T>(const Tensor<T>&, const std::vector<int>&);         \
  template void scatter_channels<T>(Tensor<T>&, const Tensor<T>&, const std::vector<int>&); \
  template GlowCoupling<T> make_glow_coupling<T>(int, int, bool, Rng&);                     \
  template Tensor<T> squeeze<T>(const Tensor<T>&);                                          \
  template Tensor<T> unsqueeze<T>(const Tensor<T>&);

AGEFLOW_INSTANTIATE_FLOW(float)
AGEFLOW_INSTANTIATE_FLOW(double)

}  // namespace ageflow
