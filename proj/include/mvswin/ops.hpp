#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "mvswin/tensor.hpp"

// Differentiable primitives. Every op is a pure function of its inputs; when a
// tape is active on the calling thread and any input requires grad, the op
// records a backward rule and its result requires grad. Results are checked
// for NaN/Inf and a NumericError naming the op is thrown on failure.
namespace mvswin::ops {

/// Batched matrix product a[..., m, k] x b[..., k, n]. Leading batch extents
/// broadcast numpy-style (right aligned, extent 1 or missing broadcasts).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// a[..., m, k] x b[..., n, k]^T without materializing the transpose.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);

/// Elementwise a + b with b broadcast to a's shape.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

/// Elementwise product of equal shapes.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

template <typename T>
Tensor<T> sum(const Tensor<T>& a);

template <typename T>
Tensor<T> mean(const Tensor<T>& a);

/// Mean over one axis, which is removed from the result.
template <typename T>
Tensor<T> mean_axis(const Tensor<T>& a, int axis);

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);

/// General axis permutation; out.shape[i] = a.shape[axes[i]].
template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& axes);

/// Row gather. `a` is viewed as rows of `width` contiguous elements; output
/// row r is input row index[r]. The backward rule scatter-adds, so indices may
/// repeat. out_shape must hold index.size() * width elements.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, std::size_t width,
                      std::span<const std::size_t> index, Shape out_shape);

/// Concatenation along the last axis; leading extents must agree.
template <typename T>
Tensor<T> concat_last(const Tensor<T>& a, const Tensor<T>& b);

/// Softmax over the last axis with max subtraction.
template <typename T>
Tensor<T> softmax_last(const Tensor<T>& x);

/// LayerNorm over the last axis: biased variance, eps inside the root.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5));

/// x[..., I] W[I, O] + b[O]. `b` may be undefined (no bias).
template <typename T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

/// Mean binary cross-entropy on logits, fused form
/// max(z, 0) - z*y + log1p(exp(-|z|)). Labels must be exactly 0 or 1.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& labels);

/// Scalar sigmoid with the two-branch stable form, for non-tensor callers.
double stable_sigmoid(double x);

/// Sign-pattern fingerprint of every relu evaluated on this thread between
/// begin and end. Two evaluations with equal fingerprints lie on the same
/// linear piece of every relu, which is what finite differences need.
void relu_trace_begin();
std::uint64_t relu_trace_end();

}  // namespace mvswin::ops
