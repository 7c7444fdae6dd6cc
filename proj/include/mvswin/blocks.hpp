#pragma once

#include "mvswin/attention.hpp"

namespace mvswin {

template <typename T>
struct LayerNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
};

/// C -> ratio*C -> C with ReLU between.
template <typename T>
struct MlpParams {
  Tensor<T> w1, b1, w2, b2;
};

/// Pre-norm sub-block around a multi-head dynamic attention module.
template <typename T>
struct OmniBlockParams {
  LayerNormParams<T> ln1;
  MdaParams<T> mda;
  LayerNormParams<T> ln2;
  MlpParams<T> mlp;
};

/// Pre-norm sub-block around single-view window self-attention.
template <typename T>
struct SwinBlockParams {
  LayerNormParams<T> ln1;
  AttentionParams<T> attn;
  LayerNormParams<T> ln2;
  MlpParams<T> mlp;
};

/// LayerNorm(4C) then a bias-free 4C -> 2C map.
template <typename T>
struct PatchMergeParams {
  LayerNormParams<T> norm;
  Tensor<T> w;
};

template <typename T>
LayerNormParams<T> make_layer_norm(std::size_t channels);
template <typename T>
MlpParams<T> make_mlp(std::size_t channels, std::size_t ratio, Rng& rng);
template <typename T>
OmniBlockParams<T> make_omni_block(std::size_t channels, std::size_t heads, std::size_t window,
                                   bool rel_bias, const FuseMode& fuse, std::size_t mlp_ratio,
                                   Rng& rng);
template <typename T>
SwinBlockParams<T> make_swin_block(std::size_t channels, std::size_t heads, std::size_t window,
                                   bool rel_bias, std::size_t mlp_ratio, Rng& rng);
template <typename T>
PatchMergeParams<T> make_patch_merge(std::size_t channels, Rng& rng);

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const LayerNormParams<T>& p);
template <typename T>
Tensor<T> mlp(const Tensor<T>& x, const MlpParams<T>& p);

/// One Omni-Attention sub-block on both views:
///   Zh = MDA(LN(Z)) + Z,  Z' = MLP(LN(Zh)) + Zh
/// with W-MDA for geo.shift == 0 and SW-MDA otherwise.
template <typename T>
ViewPair<T> omni_block(const ViewPair<T>& pair, const OmniBlockParams<T>& p_cc,
                       const OmniBlockParams<T>& p_mlo, const WindowGeometry& geo);

/// Regular-window sub-block with (p1_cc, p1_mlo) followed by a shifted one
/// with (p2_cc, p2_mlo).
template <typename T>
ViewPair<T> omni_block_pair(const ViewPair<T>& pair, const OmniBlockParams<T>& p1_cc,
                            const OmniBlockParams<T>& p1_mlo, const OmniBlockParams<T>& p2_cc,
                            const OmniBlockParams<T>& p2_mlo, std::size_t window,
                            std::size_t shift);

/// Shared-parameter form; shift defaults to window / 2.
template <typename T>
ViewPair<T> omni_block_pair(const ViewPair<T>& pair, const OmniBlockParams<T>& p1,
                            const OmniBlockParams<T>& p2, std::size_t window) {
  return omni_block_pair(pair, p1, p1, p2, p2, window, window / 2);
}

/// Single-view sub-block. Accepts the attention projections of either block
/// type so a dual-stream block can run on one view with cross attention off.
template <typename T>
FeatureMap<T> self_block(const FeatureMap<T>& fm, const LayerNormParams<T>& ln1,
                         const AttentionParams<T>& attn, const LayerNormParams<T>& ln2,
                         const MlpParams<T>& mlp_params, const WindowGeometry& geo);

template <typename T>
FeatureMap<T> swin_block(const FeatureMap<T>& fm, const SwinBlockParams<T>& p1,
                         const SwinBlockParams<T>& p2, std::size_t window, std::size_t shift);

template <typename T>
FeatureMap<T> swin_block(const FeatureMap<T>& fm, const SwinBlockParams<T>& p1,
                         const SwinBlockParams<T>& p2, std::size_t window) {
  return swin_block(fm, p1, p2, window, window / 2);
}

/// [B, H, W, C] -> [B, H/2, W/2, 2C].
template <typename T>
FeatureMap<T> patch_merge(const FeatureMap<T>& fm, const PatchMergeParams<T>& p);

}  // namespace mvswin
