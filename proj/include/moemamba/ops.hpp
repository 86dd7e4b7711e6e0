#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "moemamba/tensor.hpp"

// Differentiable operations used by the layers. There is no general
// broadcasting engine: binary elementwise ops accept operands whose shapes are
// equal or where one shape is a suffix of the other (broadcast over leading
// dimensions only).

namespace moemamba {

/// a[..., m, k] x b[k, n] -> [..., m, n], or batched when b is [..., k, n]
/// with the same leading dimensions as a.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> negate(const Tensor<T>& x);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

template <typename T>
Tensor<T> exp(const Tensor<T>& x);
// log(1 + e^x), evaluated without overflow for large |x|.
template <typename T>
Tensor<T> softplus(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
// x * sigmoid(x)
template <typename T>
Tensor<T> silu(const Tensor<T>& x);

// Reductions to a single-element tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);
/// [N, E] -> [E], averaging over rows.
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x);

/// Softmax along `axis` (negative values count from the back). Uses
/// max-subtraction; the normalizer is summed in ascending order so the
/// result does not depend on the order of the entries. Throws NumericError on
/// NaN input.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1);

/// y = x / sqrt(mean(x^2) + eps) * gain over the last dimension.
template <typename T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& gain, T eps);

/// Depthwise causal convolution. x: [B, L, C], kernel: [C, k], bias: [C].
/// kernel[c, j] weights the input j steps in the past:
///   y[b, t, c] = bias[c] + sum_j kernel[c, j] * x[b, t - j, c],
/// with x at negative positions treated as zero.
template <typename T>
Tensor<T> conv1d_depthwise_causal(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias);

/// Mean negative log-likelihood of `targets` under softmax(logits).
/// logits: [N, V]; targets: N indices in [0, V).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets);

/// Row lookup: table [V, d], ids -> [lead..., d] where product(lead) == ids.size().
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids, const Shape& lead);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// Columns [start, start + length) of the last dimension.
template <typename T>
Tensor<T> slice_last(const Tensor<T>& x, std::size_t start, std::size_t length);

/// Rows of a 2-D tensor, in the given order.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows);

/// Inverse of gather_rows for disjoint index lists: output row rows[p][i]
/// receives parts[p] row i; rows not named by any list are zero.
template <typename T>
Tensor<T> combine_rows(const std::vector<Tensor<T>>& parts,
                       const std::vector<std::vector<std::size_t>>& rows, std::size_t n_rows,
                       std::size_t width);

/// x[n, cols[n]] for a 2-D x -> [N].
template <typename T>
Tensor<T> pick(const Tensor<T>& x, std::span<const std::int32_t> cols);

/// Multiplies row n of a 2-D x by s[n].
template <typename T>
Tensor<T> scale_rows(const Tensor<T>& x, const Tensor<T>& s);

}  // namespace moemamba
