#pragma once

// Dense numeric kernels with explicit backward passes.
//
// Every kernel here is pure. Parallel loops split work over output rows,
// column panels or independent elements only, so each output value is produced by a single
// thread with a fixed summation order and results do not depend on the
// OpenMP thread count.

#include "ageflow/tensor.hpp"

namespace ageflow::kernels {

/// C[M,N] = op(A) * op(B) (+ C when accumulate). op(A) is A[M,K] or, when
/// trans_a, the transpose of A[K,M]; likewise op(B) is B[K,N] or B[N,K]^T.
template <typename T>
void gemm(bool trans_a, bool trans_b, int M, int N, int K, const T* A, const T* B, T* C,
          bool accumulate);

/// Cross-correlation. input [N,Ci,H,W], weight [Co,Ci,kH,kW], bias [Co].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int padding);

/// Gradients of conv2d. Null outputs are skipped; grad_weight and grad_bias
/// are accumulated into, grad_input is overwritten.
template <typename T>
void conv2d_backward(const Tensor<T>& input, const Tensor<T>& weight, int padding,
                     const Tensor<T>& grad_output, Tensor<T>* grad_input, Tensor<T>* grad_weight,
                     Tensor<T>* grad_bias);

/// y[N,out] = x[N,in] * W[out,in]^T + b[out]
template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
void dense_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& grad_y,
                    Tensor<T>* grad_x, Tensor<T>* grad_weight, Tensor<T>* grad_bias);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& grad_y);

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope);
template <typename T>
Tensor<T> leaky_relu_backward(const Tensor<T>& x, const Tensor<T>& grad_y, T slope);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
/// Takes the forward output y = sigmoid(x).
template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& y, const Tensor<T>& grad_y);

template <typename T>
Tensor<T> softplus(const Tensor<T>& x);
template <typename T>
Tensor<T> softplus_backward(const Tensor<T>& x, const Tensor<T>& grad_y);

/// [N,C,H,W] -> [N,C]
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);
/// [N,C] -> [N,C,H,W]
template <typename T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& grad_y, int height, int width);

}  // namespace ageflow::kernels

namespace ageflow::reference {

// Serial nested-loop versions of the hot kernels. Kept for tests and the
// benchmark; never used on the training path.

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int padding);

template <typename T>
void conv2d_backward(const Tensor<T>& input, const Tensor<T>& weight, int padding,
                     const Tensor<T>& grad_output, Tensor<T>* grad_input, Tensor<T>* grad_weight,
                     Tensor<T>* grad_bias);

template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
void gemm(bool trans_a, bool trans_b, int M, int N, int K, const T* A, const T* B, T* C,
          bool accumulate);

}  // namespace ageflow::reference
