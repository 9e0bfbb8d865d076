#include "ageflow/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

namespace ageflow {

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace ageflow

namespace ageflow::kernels {
namespace {

constexpr int kRowBlock = 6;
constexpr int kDepthBlock = 256;

// Register tile: kRowBlock rows by two 64-byte vectors of columns.
template <typename T>
struct Vec64;
template <>
struct Vec64<float> {
  typedef float type __attribute__((vector_size(64)));
};
template <>
struct Vec64<double> {
  typedef double type __attribute__((vector_size(64)));
};

template <typename T>
constexpr int kLanes = 64 / static_cast<int>(sizeof(T));
template <typename T>
constexpr int kPanel = 2 * kLanes<T>;

template <typename T>
typename Vec64<T>::type load(const T* p) {
  typename Vec64<T>::type v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

template <typename T>
void store(T* p, const typename Vec64<T>::type& v) {
  std::memcpy(p, &v, sizeof v);
}

// Rows [i0, i0+R) of one full-width column panel. bp is the packed panel
// (K rows of kPanel values). A element (i, k) is A[i * a_row + k * a_col],
// which covers both the plain and transposed layouts. Each C element
// accumulates its K products in increasing k order.
template <typename T, int R>
void panel_block(int i0, int K, int N, const T* A, std::size_t a_row, std::size_t a_col, const T* bp, std::size_t bp_stride, T* c_panel) {
  constexpr int L = kLanes<T>;
  using V = typename Vec64<T>::type;
  V acc0[R], acc1[R];
  for (int r = 0; r < R; ++r) {
    const T* c = c_panel + static_cast<std::size_t>(i0 + r) * N;
    acc0[r] = load(c);
    acc1[r] = load(c + L);
  }
  for (int k = 0; k < K; ++k, bp += bp_stride) {
    const V b0 = load(bp), b1 = load(bp + L);
    for (int r = 0; r < R; ++r) {
      const T a = A[static_cast<std::size_t>(i0 + r) * a_row + k * a_col];
      acc0[r] += a * b0;
      acc1[r] += a * b1;
    }
  }
  for (int r = 0; r < R; ++r) {
    T* c = c_panel + static_cast<std::size_t>(i0 + r) * N;
    store(c, acc0[r]);
    store(c + L, acc1[r]);
  }
}

// Narrow trailing columns [j0, j0+cols) for rows [i0, i0+rows). B element
// (k, j) is B[k * b_k + j * b_j].
template <typename T>
void tail_block(int i0, int rows, int j0, int cols, int K, int N, const T* A, std::size_t a_row,
                std::size_t a_col, const T* B, std::size_t b_k, std::size_t b_j, T* C) {
  for (int r = 0; r < rows; ++r) {
    T* c = C + static_cast<std::size_t>(i0 + r) * N + j0;
    for (int k = 0; k < K; ++k) {
      const T a = A[static_cast<std::size_t>(i0 + r) * a_row + k * a_col];
      const T* b = B + k * b_k + j0 * b_j;
      for (int q = 0; q < cols; ++q) c[q] += a * b[q * b_j];
    }
  }
}

template <typename T>
void im2col(const Tensor<T>& input, int kh, int kw, int pad, int out_h, int out_w,
            std::vector<T>& col) {
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t P = static_cast<std::size_t>(out_h) * out_w;
  const std::size_t cols = static_cast<std::size_t>(N) * P;
  col.assign(static_cast<std::size_t>(C) * kh * kw * cols, T(0));
  const T* x = input.data();
#pragma omp parallel for schedule(static)
  for (int row = 0; row < C * kh * kw; ++row) {
    const int c = row / (kh * kw);
    const int ky = (row / kw) % kh;
    const int kx = row % kw;
    T* dst = col.data() + static_cast<std::size_t>(row) * cols;
    for (int n = 0; n < N; ++n) {
      const T* plane = x + (static_cast<std::size_t>(n) * C + c) * H * W;
      T* d = dst + n * P;
      for (int oy = 0; oy < out_h; ++oy) {
        const int iy = oy + ky - pad;
        if (iy < 0 || iy >= H) continue;
        for (int ox = 0; ox < out_w; ++ox) {
          const int ix = ox + kx - pad;
          if (ix >= 0 && ix < W) d[oy * out_w + ox] = plane[iy * W + ix];
        }
      }
    }
  }
}

// Parallel over input channels: each input element is written by exactly one
// thread, rows summed in fixed (ky, kx) order.
template <typename T>
void col2im(const std::vector<T>& col, int N, int C, int H, int W, int kh, int kw, int pad,
            int out_h, int out_w, Tensor<T>& out) {
  const std::size_t P = static_cast<std::size_t>(out_h) * out_w;
  const std::size_t cols = static_cast<std::size_t>(N) * P;
  out = Tensor<T>({N, C, H, W});
  T* x = out.data();
#pragma omp parallel for schedule(static)
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const T* src = col.data() + (static_cast<std::size_t>(c) * kh * kw + ky * kw + kx) * cols;
        for (int n = 0; n < N; ++n) {
          T* plane = x + (static_cast<std::size_t>(n) * C + c) * H * W;
          const T* s = src + n * P;
          for (int oy = 0; oy < out_h; ++oy) {
            const int iy = oy + ky - pad;
            if (iy < 0 || iy >= H) continue;
            for (int ox = 0; ox < out_w; ++ox) {
              const int ix = ox + kx - pad;
              if (ix >= 0 && ix < W) plane[iy * W + ix] += s[oy * out_w + ox];
            }
          }
        }
      }
    }
  }
}

struct ConvGeometry {
  int N, Ci, H, W, Co, kh, kw, out_h, out_w;
};

template <typename T>
ConvGeometry conv_geometry(const Tensor<T>& input, const Tensor<T>& weight, int padding) {
  require_rank(input, 4, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  if (input.dim(1) != weight.dim(1)) {
    throw ShapeError("conv2d: input has " + std::to_string(input.dim(1)) +
                     " channels, kernel expects " + std::to_string(weight.dim(1)));
  }
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3),
                 weight.dim(0), weight.dim(2), weight.dim(3), 0, 0};
  g.out_h = g.H + 2 * padding - g.kh + 1;
  g.out_w = g.W + 2 * padding - g.kw + 1;
  if (g.out_h <= 0 || g.out_w <= 0) throw ShapeError("conv2d: kernel larger than padded input");
  return g;
}

}  // namespace

template <typename T>
void gemm(bool trans_a, bool trans_b, int M, int N, int K, const T* A, const T* B, T* C,
          bool accumulate) {
  if (M <= 0 || N <= 0) return;
  if (!accumulate) std::fill(C, C + static_cast<std::size_t>(M) * N, T(0));
  if (K <= 0) return;
  const std::size_t a_row = trans_a ? 1 : static_cast<std::size_t>(K);
  const std::size_t a_col = trans_a ? static_cast<std::size_t>(M) : 1;
  constexpr int NR = kPanel<T>;
  // Packing only pays off when several row blocks reuse the panel.
  const bool direct = !trans_b && M < 2 * kRowBlock;
  const int panels = N / NR;
  // Column panels are disjoint, so threads never share an output element.
#pragma omp parallel
  {
    std::vector<T> packed(static_cast<std::size_t>(std::min(K, kDepthBlock)) * NR);
#pragma omp for schedule(static)
    for (int p = 0; p < panels; ++p) {
      const int j0 = p * NR;
      T* c_panel = C + j0;
      // K chunks keep the packed panel cache resident; C carries the partial
      // sums between chunks, so the summation order is unchanged.
      for (int k0 = 0; k0 < K; k0 += kDepthBlock) {
        const int kc = std::min(kDepthBlock, K - k0);
        const T* bp = packed.data();
        std::size_t bp_stride = NR;
        if (direct) {
          bp = B + static_cast<std::size_t>(k0) * N + j0;
          bp_stride = static_cast<std::size_t>(N);
        } else if (trans_b) {
          for (int q = 0; q < NR; ++q) {
            const T* src = B + static_cast<std::size_t>(j0 + q) * K + k0;
            for (int k = 0; k < kc; ++k) packed[k * NR + q] = src[k];
          }
        } else {
          for (int k = 0; k < kc; ++k)
            std::copy_n(B + static_cast<std::size_t>(k0 + k) * N + j0, NR, packed.data() + k * NR);
        }
        const T* a0 = A + static_cast<std::size_t>(k0) * a_col;
        int i0 = 0;
        for (; i0 + kRowBlock <= M; i0 += kRowBlock)
          panel_block<T, kRowBlock>(i0, kc, N, a0, a_row, a_col, bp, bp_stride, c_panel);
        switch (M - i0) {
          case 5: panel_block<T, 5>(i0, kc, N, a0, a_row, a_col, bp, bp_stride, c_panel); break;
          case 4: panel_block<T, 4>(i0, kc, N, a0, a_row, a_col, bp, bp_stride, c_panel); break;
          case 3: panel_block<T, 3>(i0, kc, N, a0, a_row, a_col, bp, bp_stride, c_panel); break;
          case 2: panel_block<T, 2>(i0, kc, N, a0, a_row, a_col, bp, bp_stride, c_panel); break;
          case 1: panel_block<T, 1>(i0, kc, N, a0, a_row, a_col, bp, bp_stride, c_panel); break;
          default: break;
        }
      }
    }
  }
  const int tail = N - panels * NR;
  if (tail > 0) {
    const std::size_t b_k = trans_b ? 1 : static_cast<std::size_t>(N);
    const std::size_t b_j = trans_b ? static_cast<std::size_t>(K) : 1;
#pragma omp parallel for schedule(static)
    for (int i0 = 0; i0 < M; i0 += kRowBlock)
      tail_block(i0, std::min(kRowBlock, M - i0), panels * NR, tail, K, N, A, a_row, a_col, B, b_k, b_j, C);
  }
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int padding) {
  const ConvGeometry g = conv_geometry(input, weight, padding);
  if (bias.size() != static_cast<std::size_t>(g.Co)) throw ShapeError("conv2d: bias length mismatch");
  const int K = g.Ci * g.kh * g.kw;
  const int P = g.out_h * g.out_w;
  const int cols = g.N * P;

  std::vector<T> col;
  im2col(input, g.kh, g.kw, padding, g.out_h, g.out_w, col);
  std::vector<T> out_mat(static_cast<std::size_t>(g.Co) * cols);
  gemm(false, false, g.Co, cols, K, weight.data(), col.data(), out_mat.data(), false);

  Tensor<T> out({g.N, g.Co, g.out_h, g.out_w});
  T* y = out.data();
  const T* b = bias.data();
#pragma omp parallel for schedule(static)
  for (int co = 0; co < g.Co; ++co) {
    for (int n = 0; n < g.N; ++n) {
      const T* src = out_mat.data() + static_cast<std::size_t>(co) * cols + static_cast<std::size_t>(n) * P;
      T* dst = y + (static_cast<std::size_t>(n) * g.Co + co) * P;
      for (int p = 0; p < P; ++p) dst[p] = src[p] + b[co];
    }
  }
  return out;
}

template <typename T>
void conv2d_backward(const Tensor<T>& input, const Tensor<T>& weight, int padding,
                     const Tensor<T>& grad_output, Tensor<T>* grad_input, Tensor<T>* grad_weight,
                     Tensor<T>* grad_bias) {
  const ConvGeometry g = conv_geometry(input, weight, padding);
  if (grad_output.shape() != Shape{g.N, g.Co, g.out_h, g.out_w}) {
    throw ShapeError("conv2d_backward: grad_output shape " + shape_string(grad_output.shape()));
  }
  const int K = g.Ci * g.kh * g.kw;
  const int P = g.out_h * g.out_w;
  const int cols = g.N * P;

  // [N,Co,P] -> [Co, N*P]
  std::vector<T> gy(static_cast<std::size_t>(g.Co) * cols);
  const T* go = grad_output.data();
#pragma omp parallel for schedule(static)
  for (int co = 0; co < g.Co; ++co) {
    for (int n = 0; n < g.N; ++n) {
      std::copy_n(go + (static_cast<std::size_t>(n) * g.Co + co) * P, P,
                  gy.data() + static_cast<std::size_t>(co) * cols + static_cast<std::size_t>(n) * P);
    }
  }

  if (grad_bias) {
    T* gb = grad_bias->data();
#pragma omp parallel for schedule(static)
    for (int co = 0; co < g.Co; ++co) {
      T acc = 0;
      const T* row = gy.data() + static_cast<std::size_t>(co) * cols;
      for (int j = 0; j < cols; ++j) acc += row[j];
      gb[co] += acc;
    }
  }

  if (grad_weight || grad_input) {
    std::vector<T> col;
    if (grad_weight) {
      im2col(input, g.kh, g.kw, padding, g.out_h, g.out_w, col);
      // gW[Co,K] += gy[Co,cols] * col[K,cols]^T
      gemm(false, true, g.Co, K, cols, gy.data(), col.data(), grad_weight->data(), true);
    }
    if (grad_input) {
      // gcol[K,cols] = W[Co,K]^T * gy[Co,cols]
      col.assign(static_cast<std::size_t>(K) * cols, T(0));
      gemm(true, false, K, cols, g.Co, weight.data(), gy.data(), col.data(), false);
      col2im(col, g.N, g.Ci, g.H, g.W, g.kh, g.kw, padding, g.out_h, g.out_w, *grad_input);
    }
  }
}

template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(x, 2, "dense input");
  require_rank(weight, 2, "dense weight");
  const int N = x.dim(0), in = x.dim(1), out = weight.dim(0);
  if (weight.dim(1) != in) {
    throw ShapeError("dense: input width " + std::to_string(in) + " vs weight " +
                     shape_string(weight.shape()));
  }
  if (bias.size() != static_cast<std::size_t>(out)) throw ShapeError("dense: bias length mismatch");
  Tensor<T> y({N, out});
  gemm(false, true, N, out, in, x.data(), weight.data(), y.data(), false);
  for (int n = 0; n < N; ++n) {
    T* row = y.data() + static_cast<std::size_t>(n) * out;
    for (int o = 0; o < out; ++o) row[o] += bias[o];
  }
  return y;
}

template <typename T>
void dense_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& grad_y,
                    Tensor<T>* grad_x, Tensor<T>* grad_weight, Tensor<T>* grad_bias) {
  const int N = x.dim(0), in = x.dim(1), out = weight.dim(0);
  if (grad_y.shape() != Shape{N, out}) throw ShapeError("dense_backward: grad_y shape mismatch");
  if (grad_x) {
    *grad_x = Tensor<T>({N, in});
    gemm(false, false, N, in, out, grad_y.data(), weight.data(), grad_x->data(), false);
  }
  if (grad_weight) {
    gemm(true, false, out, in, N, grad_y.data(), x.data(), grad_weight->data(), true);
  }
  if (grad_bias) {
    for (int n = 0; n < N; ++n) {
      for (int o = 0; o < out; ++o) (*grad_bias)[o] += grad_y[static_cast<std::size_t>(n) * out + o];
    }
  }
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const std::size_t n = x.size();
#pragma omp parallel for simd schedule(static)
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return y;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& grad_y) {
  require_same_shape(x, grad_y, "relu_backward");
  Tensor<T> g(x.shape());
  const std::size_t n = x.size();
#pragma omp parallel for simd schedule(static)
  for (std::size_t i = 0; i < n; ++i) g[i] = x[i] > T(0) ? grad_y[i] : T(0);
  return g;
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : slope * x[i];
  return y;
}

template <typename T>
Tensor<T> leaky_relu_backward(const Tensor<T>& x, const Tensor<T>& grad_y, T slope) {
  require_same_shape(x, grad_y, "leaky_relu_backward");
  Tensor<T> g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i] > T(0) ? grad_y[i] : slope * grad_y[i];
  return g;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T v = x[i];
    // Split by sign so exp never overflows.
    if (v >= 0) {
      y[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      y[i] = e / (T(1) + e);
    }
  }
  return y;
}

template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& y, const Tensor<T>& grad_y) {
  require_same_shape(y, grad_y, "sigmoid_backward");
  Tensor<T> g(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) g[i] = grad_y[i] * y[i] * (T(1) - y[i]);
  return g;
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T v = x[i];
    y[i] = std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v)));
  }
  return y;
}

template <typename T>
Tensor<T> softplus_backward(const Tensor<T>& x, const Tensor<T>& grad_y) {
  require_same_shape(x, grad_y, "softplus_backward");
  Tensor<T> g = sigmoid(x);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] *= grad_y[i];
  return g;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_rank(x, 4, "global_avg_pool");
  const int N = x.dim(0), C = x.dim(1);
  const std::size_t P = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor<T> y({N, C});
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const T* p = x.data() + (static_cast<std::size_t>(n) * C + c) * P;
      T acc = 0;
      for (std::size_t i = 0; i < P; ++i) acc += p[i];
      y[static_cast<std::size_t>(n) * C + c] = acc / static_cast<T>(P);
    }
  }
  return y;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& grad_y, int height, int width) {
  require_rank(grad_y, 2, "global_avg_pool_backward");
  const int N = grad_y.dim(0), C = grad_y.dim(1);
  const std::size_t P = static_cast<std::size_t>(height) * width;
  Tensor<T> g({N, C, height, width});
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const T v = grad_y[static_cast<std::size_t>(n) * C + c] / static_cast<T>(P);
      std::fill_n(g.data() + (static_cast<std::size_t>(n) * C + c) * P, P, v);
    }
  }
  return g;
}

#define AGEFLOW_INSTANTIATE_KERNELS(T)                                                              \
  template void gemm<T>(bool, bool, int, int, int, const T*, const T*, T*, bool);                   \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int);          \
  template void conv2d_backward<T>(const Tensor<T>&, const Tensor<T>&, int, const Tensor<T>&,       \
                                   Tensor<T>*, Tensor<T>*, Tensor<T>*);                             \
  template Tensor<T> dense<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                \
  template void dense_backward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>*, \
                                  Tensor<T>*, Tensor<T>*);                                          \
  template Tensor<T> relu<T>(const Tensor<T>&);                                                     \
  template Tensor<T> relu_backward<T>(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> leaky_relu<T>(const Tensor<T>&, T);                                            \
  template Tensor<T> leaky_relu_backward<T>(const Tensor<T>&, const Tensor<T>&, T);                 \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                                  \
  template Tensor<T> sigmoid_backward<T>(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> softplus<T>(const Tensor<T>&);                                                 \
  template Tensor<T> softplus_backward<T>(const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> global_avg_pool<T>(const Tensor<T>&);                                          \
  template Tensor<T> global_avg_pool_backward<T>(const Tensor<T>&, int, int);

AGEFLOW_INSTANTIATE_KERNELS(float)
AGEFLOW_INSTANTIATE_KERNELS(double)

}  // namespace ageflow::kernels
