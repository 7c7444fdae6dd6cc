#pragma once

#include <cstddef>
#include <vector>

#include "mvswin/tensor.hpp"

namespace mvswin {

/// Score added to blocked (query, key) pairs. Finite so 32-bit softmax stays
/// NaN-free; exp underflows to exactly zero.
inline constexpr double kBlockedScore = -1e9;

/// Token grid [B, H, W, C].
template <typename T>
struct FeatureMap {
  Tensor<T> values;

  FeatureMap() = default;
  explicit FeatureMap(Tensor<T> v);

  std::size_t batch() const { return values.dim(0); }
  std::size_t height() const { return values.dim(1); }
  std::size_t width() const { return values.dim(2); }
  std::size_t channels() const { return values.dim(3); }
};

struct WindowOrigin {
  std::size_t batch = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t window = 0;

  std::size_t windows_per_image() const { return (height / window) * (width / window); }
  std::size_t tokens_per_window() const { return window * window; }
};

/// Windows [B * nW, M * M, C], window-major then row-major tokens.
template <typename T>
struct WindowSet {
  Tensor<T> windows;
  WindowOrigin origin;
};

/// [nW, N, N] with 0 for allowed pairs and kBlockedScore for blocked ones.
template <typename T>
struct AttentionMask {
  Tensor<T> mask;
};

/// Splits image [B, h, w, ch] into patch x patch blocks, flattens each in
/// (row, col, channel) order and maps it through w [patch*patch*ch, dim] + b.
template <typename T>
FeatureMap<T> patch_embed(const Tensor<T>& image, std::size_t patch, const Tensor<T>& w,
                          const Tensor<T>& b);

template <typename T>
WindowSet<T> window_partition(const FeatureMap<T>& fm, std::size_t window);

template <typename T>
FeatureMap<T> window_reverse(const WindowSet<T>& ws);

/// Toroidal roll: out[i, j] = in[(i - d) mod H, (j - d) mod W].
template <typename T>
FeatureMap<T> cyclic_shift(const FeatureMap<T>& fm, long shift);

/// Mask for attention on a grid already rolled by -shift. Tokens whose
/// pre-roll regions differ inside a window are blocked.
template <typename T>
AttentionMask<T> shift_mask(std::size_t height, std::size_t width, std::size_t window,
                            std::size_t shift);

/// Row-major N x N map into a (2M - 1)^2 relative position table.
const std::vector<std::size_t>& relative_position_index(std::size_t window);

}  // namespace mvswin
