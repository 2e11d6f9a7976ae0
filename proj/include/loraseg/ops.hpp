#pragma once

#include <vector>

#include "loraseg/tensor.hpp"

// Differentiable primitives. Every op runs its forward through the active
// kernel backend and, when a tape is supplied and any input requires grad,
// records a backward closure on it. Passing tape == nullptr gives plain
// inference.

namespace loraseg::ops {

// [m x k] * [k x n] -> [m x n]
Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b);
// [m x k] * [n x k]^T -> [m x n]
Tensor matmul_nt(Tape* tape, const Tensor& a, const Tensor& b);

Tensor add(Tape* tape, const Tensor& a, const Tensor& b);  // same shape
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(Tape* tape, const Tensor& x, float s);
// x[.. x D] + bias[D], broadcast over leading dims
Tensor add_row_bias(Tape* tape, const Tensor& x, const Tensor& bias);

Tensor slice_cols(Tape* tape, const Tensor& x, int start, int len);
Tensor concat_cols(Tape* tape, const std::vector<Tensor>& parts);
Tensor concat_axis0(Tape* tape, const std::vector<Tensor>& parts);

// Max-subtracted softmax along `axis`; every slice sums to 1 and is
// strictly positive.
Tensor softmax(Tape* tape, const Tensor& x, int axis);

// Normalizes over the last dimension, then applies gamma/beta.
Tensor layer_norm(Tape* tape, const Tensor& x, const Tensor& gamma,
                  const Tensor& beta, float eps = 1e-6f);

// Exact erf-based GELU: 0.5*x*(1 + erf(x/sqrt(2))). Not the tanh
// approximation.
Tensor gelu(Tape* tape, const Tensor& x);
Tensor relu(Tape* tape, const Tensor& x);
Tensor sigmoid(Tape* tape, const Tensor& x);

// x[Cin x H x W], w[Cout x Cin x k x k], bias[Cout]; k in {1, 3};
// out-of-bounds taps read zero. Implemented as im2col + GEMM.
Tensor conv2d(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b,
              int stride, int dilation, int padding);

// Half-pixel (align-corners-false) sampling with edge clamping.
Tensor bilinear_resize(Tape* tape, const Tensor& x, int out_h, int out_w);

// [C x h x w] -> [C x 1 x 1] per-channel mean.
Tensor adaptive_avg_pool(Tape* tape, const Tensor& x);

// [N x D] -> [D x g x g]; token n lands at (n / g, n % g).
Tensor tokens_to_grid(Tape* tape, const Tensor& x);
Tensor grid_to_tokens(Tape* tape, const Tensor& x);

// [C x H x W] -> [N x (P*P*C)]; patches ordered row-major over the grid,
// each flattened channel-major: column c*P*P + py*P + px.
Tensor extract_patches(Tape* tape, const Tensor& image, int patch);

// Mean over elements of max(x,0) - x*y + log1p(exp(-|x|)); targets must be
// exactly 0 or 1.
Tensor bce_with_logits(Tape* tape, const Tensor& logits,
                       const Tensor& targets);

Tensor sum_all(Tape* tape, const Tensor& x);

}  // namespace loraseg::ops
