#pragma once

#include "pls/tensor.hpp"

namespace pls {

template <typename T>
Tensor<T> eye(std::size_t n);

// C = A @ B for rank-2 operands.  Accumulation over the inner dimension is
// strictly left to right, so results are bit-reproducible.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// y = A @ x for rank-1 x.
template <typename T>
Tensor<T> matvec(const Tensor<T>& a, const Tensor<T>& x);

template <typename T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, double c);

template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

// Per-column causal convolution: V[i,j] = sum_{k=0..i} H[k,j] * U[i-k,j].
// H holds one length-N filter per column.
template <typename T>
Tensor<T> causal_conv_cols(const Tensor<T>& h, const Tensor<T>& u);

// Per-column circular convolution: V[i,j] = sum_k H[k,j] * U[(i-k) mod N, j].
// Routed through the causal kernel on a periodically doubled sequence.
template <typename T>
Tensor<T> circular_conv_cols(const Tensor<T>& h, const Tensor<T>& u);

template <typename T>
struct SvdResult {
    Tensor<T> u;  // m x n, orthonormal columns
    Tensor<T> s;  // n, descending, non-negative
    Tensor<T> v;  // n x n, orthogonal
};

// Thin SVD by one-sided Jacobi.  Requires m >= n.  Throws NumericalError if
// the sweep cap is hit before column pairs are orthogonal to tolerance.
template <typename T>
SvdResult<T> svd_thin(const Tensor<T>& a);

// Affine remap of the singular values of A onto [smin, smax]; the largest
// maps to smax and the smallest to smin.  If all singular values are equal
// they all map to smax.
template <typename T>
Tensor<T> shape_spectrum(const Tensor<T>& a, double smin, double smax);

// Least squares solution of min ||Ax - b|| via Householder QR.  A is m x n
// with m >= n, b has length m.  Throws NumericalError on rank deficiency.
template <typename T>
Tensor<T> ols_solve(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
double dot(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
double max_abs(const Tensor<T>& a);

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
double fro_norm(const Tensor<T>& a);

// Mean of squared entries of (a - b).
template <typename T>
double mse(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace pls
