#pragma once

#include <cstddef>
#include <variant>

#include "mvswin/init.hpp"
#include "mvswin/tensor.hpp"
#include "mvswin/windowing.hpp"

namespace mvswin {

/// Self and cross maps are concatenated along the key axis (N x 2N) and
/// mapped back to N x N by a learned matrix shared across heads and windows.
struct Concatenation {};

/// F = w_self * A_self + w_cross * A_cross with non-negative weights summing
/// to one.
struct WeightedAddition {
  double w_self = 0.9;
  double w_cross = 0.1;
};

using FuseMode = std::variant<Concatenation, WeightedAddition>;

/// Throws ConfigError for negative weights or weights not summing to 1.
void validate_fuse_mode(const FuseMode& mode);

/// Projections of one windowed attention module. Weights are [C, C] used as
/// x * W (+ b); heads split the channel axis evenly.
template <typename T>
struct AttentionParams {
  std::size_t heads = 1;
  std::size_t window = 1;
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<T> rel_bias;  // [(2M-1)^2, heads]; undefined when disabled

  std::size_t channels() const { return wq.dim(0); }
};

/// One multi-head dynamic attention module.
template <typename T>
struct MdaParams {
  AttentionParams<T> attn;
  FuseMode fuse = Concatenation{};
  Tensor<T> wf;  // [2N, N], only with Concatenation
};

template <typename T>
struct ViewPair {
  FeatureMap<T> cc;
  FeatureMap<T> mlo;
};

/// Window size and roll applied before partitioning. The standard shifted
/// variant uses shift = window / 2.
struct WindowGeometry {
  std::size_t window = 1;
  std::size_t shift = 0;

  static WindowGeometry regular(std::size_t window) { return {window, 0}; }
  static WindowGeometry shifted(std::size_t window) { return {window, window / 2}; }
};

/// Optional capture of the intermediate maps, [B, nW, heads, N, N] each.
template <typename T>
struct AttentionTrace {
  Tensor<T> self_map;
  Tensor<T> cross_map;
  Tensor<T> fused_map;
};

/// Truncated-normal projections (std 0.02), zero biases and zero table.
template <typename T>
AttentionParams<T> make_attention_params(std::size_t channels, std::size_t heads,
                                         std::size_t window, bool rel_bias, Rng& rng);

/// Adds the fusion state; Concatenation gets wf = 0.5 [I; I] + N(0, 0.01).
template <typename T>
MdaParams<T> make_mda_params(std::size_t channels, std::size_t heads, std::size_t window,
                             bool rel_bias, const FuseMode& fuse, Rng& rng);

/// Dynamic attention over windowed tokens [B * nW, N, C].
///
/// Queries and values come from the origin view (q_src, v_src); self scores
/// use keys projected from k_self, cross scores keys projected from k_cross.
/// `mask` may be undefined; when present it is [nW, N, N].
template <typename T>
Tensor<T> dynamic_attention(const Tensor<T>& q_src, const Tensor<T>& k_self,
                            const Tensor<T>& k_cross, const Tensor<T>& v_src,
                            const MdaParams<T>& p, const Tensor<T>& mask,
                            AttentionTrace<T>* trace = nullptr);

/// Plain windowed multi-head self-attention over [B * nW, N, C].
template <typename T>
Tensor<T> window_self_attention(const Tensor<T>& tokens, const AttentionParams<T>& p,
                                const Tensor<T>& mask);

/// W-MDA (shift 0) or SW-MDA over a view pair: roll, partition, dynamic
/// attention for each view against the other, reverse, unroll. p_cc serves
/// the CC output and p_mlo the MLO output; pass the same set for siamese
/// streams.
template <typename T>
ViewPair<T> w_mda(const ViewPair<T>& pair, const MdaParams<T>& p_cc, const MdaParams<T>& p_mlo,
                  const WindowGeometry& geo, AttentionTrace<T>* cc_trace = nullptr,
                  AttentionTrace<T>* mlo_trace = nullptr);

template <typename T>
ViewPair<T> w_mda(const ViewPair<T>& pair, const MdaParams<T>& p, const WindowGeometry& geo) {
  return w_mda(pair, p, p, geo);
}

/// Single-view W-MSA / SW-MSA on a feature map.
template <typename T>
FeatureMap<T> window_attention(const FeatureMap<T>& fm, const AttentionParams<T>& p,
                               const WindowGeometry& geo);

}  // namespace mvswin
