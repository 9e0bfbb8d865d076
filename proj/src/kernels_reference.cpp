#include "ageflow/kernels.hpp"

namespace ageflow::reference {

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int padding) {
  require_rank(input, 4, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  const int N = input.dim(0), Ci = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int Co = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != Ci) throw ShapeError("reference conv2d: channel mismatch");
  const int Ho = H + 2 * padding - kh + 1, Wo = W + 2 * padding - kw + 1;
  Tensor<T> out({N, Co, Ho, Wo});
  for (int n = 0; n < N; ++n)
    for (int co = 0; co < Co; ++co)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          T acc = bias[co];
          for (int ci = 0; ci < Ci; ++ci)
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                const int iy = oy + ky - padding, ix = ox + kx - padding;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += weight.at(co, ci, ky, kx) * input.at(n, ci, iy, ix);
              }
          out.at(n, co, oy, ox) = acc;
        }
  return out;
}

template <typename T>
void conv2d_backward(const Tensor<T>& input, const Tensor<T>& weight, int padding,
                     const Tensor<T>& grad_output, Tensor<T>* grad_input, Tensor<T>* grad_weight,
                     Tensor<T>* grad_bias) {
  const int N = input.dim(0), Ci = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int Co = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  const int Ho = grad_output.dim(2), Wo = grad_output.dim(3);
  if (grad_input) *grad_input = Tensor<T>(input.shape());
  for (int n = 0; n < N; ++n)
    for (int co = 0; co < Co; ++co)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          const T g = grad_output.at(n, co, oy, ox);
          if (grad_bias) (*grad_bias)[co] += g;
          for (int ci = 0; ci < Ci; ++ci)
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                const int iy = oy + ky - padding, ix = ox + kx - padding;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                if (grad_weight) grad_weight->at(co, ci, ky, kx) += g * input.at(n, ci, iy, ix);
                if (grad_input) grad_input->at(n, ci, iy, ix) += g * weight.at(co, ci, ky, kx);
              }
        }
}

template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  const int N = x.dim(0), in = x.dim(1), out = weight.dim(0);
  Tensor<T> y({N, out});
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < out; ++o) {
      T acc = bias[o];
      for (int i = 0; i < in; ++i) acc += weight[static_cast<std::size_t>(o) * in + i] * x[static_cast<std::size_t>(n) * in + i];
      y[static_cast<std::size_t>(n) * out + o] = acc;
    }
  return y;
}

template <typename T>
void gemm(bool trans_a, bool trans_b, int M, int N, int K, const T* A, const T* B, T* C,
          bool accumulate) {
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < N; ++j) {
      T acc = 0;
      for (int k = 0; k < K; ++k) {
        const T a = trans_a ? A[static_cast<std::size_t>(k) * M + i] : A[static_cast<std::size_t>(i) * K + k];
        const T b = trans_b ? B[static_cast<std::size_t>(j) * K + k] : B[static_cast<std::size_t>(k) * N + j];
        acc += a * b;
      }
      T& c = C[static_cast<std::size_t>(i) * N + j];
      c = accumulate ? c + acc : acc;
    }
}

template Tensor<float> conv2d<float>(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&, int);
template Tensor<double> conv2d<double>(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&, int);
template void conv2d_backward<float>(const Tensor<float>&, const Tensor<float>&, int, const Tensor<float>&,
                                     Tensor<float>*, Tensor<float>*, Tensor<float>*);
template void conv2d_backward<double>(const Tensor<double>&, const Tensor<double>&, int, const Tensor<double>&,
                                      Tensor<double>*, Tensor<double>*, Tensor<double>*);
template Tensor<float> dense<float>(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&);
template Tensor<double> dense<double>(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&);
template void gemm<float>(bool, bool, int, int, int, const float*, const float*, float*, bool);
template void gemm<double>(bool, bool, int, int, int, const double*, const double*, double*, bool);

}  // namespace ageflow::reference
