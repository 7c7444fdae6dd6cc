#include "mvswin/blocks.hpp"

#include <string>

#include "mvswin/ops.hpp"

namespace mvswin {

template <typename T>
LayerNormParams<T> make_layer_norm(std::size_t channels) {
  return {Tensor<T>::full({channels}, T(1), true), Tensor<T>::zeros({channels}, true)};
}

template <typename T>
MlpParams<T> make_mlp(std::size_t channels, std::size_t ratio, Rng& rng) {
  const std::size_t hidden = channels * ratio;
  MlpParams<T> p;
  p.w1 = trunc_normal<T>({channels, hidden}, 0.02, rng);
  p.b1 = Tensor<T>::zeros({hidden}, true);
  p.w2 = trunc_normal<T>({hidden, channels}, 0.02, rng);
  p.b2 = Tensor<T>::zeros({channels}, true);
  return p;
}

template <typename T>
OmniBlockParams<T> make_omni_block(std::size_t channels, std::size_t heads, std::size_t window,
                                   bool rel_bias, const FuseMode& fuse, std::size_t mlp_ratio,
                                   Rng& rng) {
  OmniBlockParams<T> p;
  p.ln1 = make_layer_norm<T>(channels);
  p.mda = make_mda_params<T>(channels, heads, window, rel_bias, fuse, rng);
  p.ln2 = make_layer_norm<T>(channels);
  p.mlp = make_mlp<T>(channels, mlp_ratio, rng);
  return p;
}

template <typename T>
SwinBlockParams<T> make_swin_block(std::size_t channels, std::size_t heads, std::size_t window,
                                   bool rel_bias, std::size_t mlp_ratio, Rng& rng) {
  SwinBlockParams<T> p;
  p.ln1 = make_layer_norm<T>(channels);
  p.attn = make_attention_params<T>(channels, heads, window, rel_bias, rng);
  p.ln2 = make_layer_norm<T>(channels);
  p.mlp = make_mlp<T>(channels, mlp_ratio, rng);
  return p;
}

template <typename T>
PatchMergeParams<T> make_patch_merge(std::size_t channels, Rng& rng) {
  return {make_layer_norm<T>(4 * channels), trunc_normal<T>({4 * channels, 2 * channels}, 0.02, rng)};
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const LayerNormParams<T>& p) {
  return ops::layer_norm(x, p.gamma, p.beta);
}

template <typename T>
Tensor<T> mlp(const Tensor<T>& x, const MlpParams<T>& p) {
  return ops::affine(ops::relu(ops::affine(x, p.w1, p.b1)), p.w2, p.b2);
}

namespace {

template <typename T>
FeatureMap<T> mlp_residual(const FeatureMap<T>& z, const LayerNormParams<T>& ln,
                           const MlpParams<T>& p) {
  return FeatureMap<T>(ops::add(mlp(layer_norm(z.values, ln), p), z.values));
}

}  // namespace

template <typename T>
ViewPair<T> omni_block(const ViewPair<T>& pair, const OmniBlockParams<T>& p_cc,
                       const OmniBlockParams<T>& p_mlo, const WindowGeometry& geo) {
  const ViewPair<T> normed{FeatureMap<T>(layer_norm(pair.cc.values, p_cc.ln1)),
                           FeatureMap<T>(layer_norm(pair.mlo.values, p_mlo.ln1))};
  const auto attended = w_mda(normed, p_cc.mda, p_mlo.mda, geo);
  const FeatureMap<T> cc(ops::add(attended.cc.values, pair.cc.values));
  const FeatureMap<T> mlo(ops::add(attended.mlo.values, pair.mlo.values));
  return {mlp_residual(cc, p_cc.ln2, p_cc.mlp), mlp_residual(mlo, p_mlo.ln2, p_mlo.mlp)};
}

template <typename T>
ViewPair<T> omni_block_pair(const ViewPair<T>& pair, const OmniBlockParams<T>& p1_cc,
                            const OmniBlockParams<T>& p1_mlo, const OmniBlockParams<T>& p2_cc,
                            const OmniBlockParams<T>& p2_mlo, std::size_t window,
                            std::size_t shift) {
  const auto first = omni_block(pair, p1_cc, p1_mlo, WindowGeometry::regular(window));
  return omni_block(first, p2_cc, p2_mlo, WindowGeometry{window, shift});
}

template <typename T>
FeatureMap<T> self_block(const FeatureMap<T>& fm, const LayerNormParams<T>& ln1,
                         const AttentionParams<T>& attn, const LayerNormParams<T>& ln2,
                         const MlpParams<T>& mlp_params, const WindowGeometry& geo) {
  const auto attended = window_attention(FeatureMap<T>(layer_norm(fm.values, ln1)), attn, geo);
  const FeatureMap<T> z(ops::add(attended.values, fm.values));
  return mlp_residual(z, ln2, mlp_params);
}

template <typename T>
FeatureMap<T> swin_block(const FeatureMap<T>& fm, const SwinBlockParams<T>& p1,
                         const SwinBlockParams<T>& p2, std::size_t window, std::size_t shift) {
  const auto first = self_block(fm, p1.ln1, p1.attn, p1.ln2, p1.mlp, WindowGeometry::regular(window));
  return self_block(first, p2.ln1, p2.attn, p2.ln2, p2.mlp, WindowGeometry{window, shift});
}

template <typename T>
FeatureMap<T> patch_merge(const FeatureMap<T>& fm, const PatchMergeParams<T>& p) {
  const std::size_t b = fm.batch();
  const std::size_t h = fm.height();
  const std::size_t w = fm.width();
  const std::size_t c = fm.channels();
  if (h % 2 != 0 || w % 2 != 0) {
    throw ConfigError("patch_merge: grid " + std::to_string(h) + "x" + std::to_string(w) +
                      " has an odd extent");
  }
  // Neighborhood order (0,0), (1,0), (0,1), (1,1) as (row, col) offsets.
  constexpr std::size_t dy[4] = {0, 1, 0, 1};
  constexpr std::size_t dx[4] = {0, 0, 1, 1};
  std::vector<std::size_t> index;
  index.reserve(b * h * w);
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t y = 0; y < h / 2; ++y) {
      for (std::size_t x = 0; x < w / 2; ++x) {
        for (std::size_t k = 0; k < 4; ++k) {
          index.push_back((n * h + 2 * y + dy[k]) * w + 2 * x + dx[k]);
        }
      }
    }
  }
  auto grouped = ops::gather_rows(fm.values, c, index, Shape{b, h / 2, w / 2, 4 * c});
  return FeatureMap<T>(ops::affine(layer_norm(grouped, p.norm), p.w, Tensor<T>{}));
}

#define MVSWIN_INSTANTIATE(T)                                                                   \
  template LayerNormParams<T> make_layer_norm<T>(std::size_t);                                 \
  template MlpParams<T> make_mlp<T>(std::size_t, std::size_t, Rng&);                           \
  template OmniBlockParams<T> make_omni_block<T>(std::size_t, std::size_t, std::size_t, bool,  \
                                                 const FuseMode&, std::size_t, Rng&);          \
  template SwinBlockParams<T> make_swin_block<T>(std::size_t, std::size_t, std::size_t, bool,  \
                                                 std::size_t, Rng&);                            \
  template PatchMergeParams<T> make_patch_merge<T>(std::size_t, Rng&);                         \
  template Tensor<T> layer_norm(const Tensor<T>&, const LayerNormParams<T>&);                  \
  template Tensor<T> mlp(const Tensor<T>&, const MlpParams<T>&);                               \
  template ViewPair<T> omni_block(const ViewPair<T>&, const OmniBlockParams<T>&,               \
                                  const OmniBlockParams<T>&, const WindowGeometry&);           \
  template ViewPair<T> omni_block_pair(const ViewPair<T>&, const OmniBlockParams<T>&,          \
                                       const OmniBlockParams<T>&, const OmniBlockParams<T>&,   \
                                       const OmniBlockParams<T>&, std::size_t, std::size_t);   \
  template FeatureMap<T> self_block(const FeatureMap<T>&, const LayerNormParams<T>&,           \
                                    const AttentionParams<T>&, const LayerNormParams<T>&,      \
                                    const MlpParams<T>&, const WindowGeometry&);               \
  template FeatureMap<T> swin_block(const FeatureMap<T>&, const SwinBlockParams<T>&,           \
                                    const SwinBlockParams<T>&, std::size_t, std::size_t);      \
  template FeatureMap<T> patch_merge(const FeatureMap<T>&, const PatchMergeParams<T>&);

MVSWIN_INSTANTIATE(float)
MVSWIN_INSTANTIATE(double)

#undef MVSWIN_INSTANTIATE

}  // namespace mvswin
