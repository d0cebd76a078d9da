#pragma once

#include <vector>

#include "nsvit/tensor.hpp"

namespace nsvit::ops {

// Closed op set: exactly what the transformer forward pass and the attacks
// need. Every op optionally records its backward step on `g`; with g == nullptr
// (or when no input requires grad) the op is a plain function and the output
// does not track gradients.

// Standard matrix product, rank-2 only. dA = dC.B^T, dB = A^T.dC.
Tensor matmul(const Tensor& a, const Tensor& b, Graph* g = nullptr);

// Elementwise, same shape.
Tensor add(const Tensor& a, const Tensor& b, Graph* g = nullptr);
Tensor mul(const Tensor& a, const Tensor& b, Graph* g = nullptr);

// Broadcast a length-n vector across every row of an m x n matrix.
Tensor add_rowvec(const Tensor& a, const Tensor& v, Graph* g = nullptr);
Tensor mul_rowvec(const Tensor& a, const Tensor& v, Graph* g = nullptr);

Tensor scale(const Tensor& a, float s, Graph* g = nullptr);

// Softmax over the last axis, max-subtracted, row sums accumulated in f64.
Tensor softmax(const Tensor& a, Graph* g = nullptr);

// Per-vector (last axis) normalization to mean 0 / var 1, then gamma * x + beta.
// Statistics accumulated in f64.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  float eps, Graph* g = nullptr);

// Tanh-approximation GELU.
Tensor gelu(const Tensor& x, Graph* g = nullptr);

Tensor reshape(const Tensor& x, std::vector<int> shape, Graph* g = nullptr);
Tensor transpose(const Tensor& x, Graph* g = nullptr);  // rank-2

Tensor slice_rows(const Tensor& x, int r0, int count, Graph* g = nullptr);
Tensor slice_cols(const Tensor& x, int c0, int count, Graph* g = nullptr);
Tensor concat_rows(const std::vector<Tensor>& parts, Graph* g = nullptr);
Tensor concat_cols(const std::vector<Tensor>& parts, Graph* g = nullptr);

// Full reductions to a scalar, f64 accumulation.
Tensor sum(const Tensor& x, Graph* g = nullptr);
Tensor mean(const Tensor& x, Graph* g = nullptr);

// Cosine similarity of two flattened equal-size tensors. A zero-norm operand
// yields similarity 0 (degenerate case) with a warning and a zero gradient.
Tensor cosine_similarity(const Tensor& a, const Tensor& b, Graph* g = nullptr);

// Cross-entropy of a single logit vector (rank 1 [K] or rank 2 [1 x K])
// against a class index, via a max-subtracted log-sum-exp in f64.
Tensor cross_entropy(const Tensor& logits, int label, Graph* g = nullptr);

}  // namespace nsvit::ops
