#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "unicompress/tensor.hpp"

// Differentiable primitives. All matrix ops treat rank-1 tensors as one row.
namespace unicompress {

inline constexpr double kLayerNormEps = 1e-5;

Tensor matmul(const Tensor& a, const Tensor& b);
// a * b^T without materialising the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
// Adds a length-n vector to every row of an m x n matrix.
Tensor add_row_broadcast(const Tensor& a, const Tensor& row);

Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count);
Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor repeat_rows(const Tensor& a, std::size_t times);
// Row lookup into a table; indices are 0-based rows of `table`.
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices);
Tensor mean_rows(const Tensor& a);

// Row-wise softmax, stabilised by row-max subtraction. With `causal`, entry
// (i, j) is excluded for j > i and returns exactly 0.
Tensor softmax_rows(const Tensor& a, bool causal = false);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = kLayerNormEps);
Tensor gelu(const Tensor& a);

// Stop-gradient. Participates in finite-difference replay (see gradcheck.hpp).
Tensor detach(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// mean((a - b)^2) over all elements.
Tensor mse(const Tensor& a, const Tensor& b);
// Mean over rows of the per-row squared Euclidean distance.
Tensor mean_row_sq_dist(const Tensor& a, const Tensor& b);
// Mean next-token cross-entropy over the listed rows. `targets[i]` is the
// class column for row `rows[i]`.
Tensor cross_entropy_rows(const Tensor& logits, std::span<const std::size_t> rows,
                          std::span<const std::size_t> targets);

// Weighted sum with a fixed weight tensor; used to reduce outputs to a scalar.
Tensor dot_const(const Tensor& a, std::span<const double> weights);

}  // namespace unicompress
