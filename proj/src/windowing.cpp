#include "mvswin/windowing.hpp"

#include <map>
#include <mutex>
#include <string>

#include "mvswin/ops.hpp"

namespace mvswin {

template <typename T>
FeatureMap<T>::FeatureMap(Tensor<T> v) : values(std::move(v)) {
  if (!values.defined() || values.ndim() != 4) {
    throw DimensionError("feature map must be [B, H, W, C], got " +
                         (values.defined() ? shape_str(values.shape()) : std::string("<undefined>")));
  }
}

template <typename T>
FeatureMap<T> patch_embed(const Tensor<T>& image, std::size_t patch, const Tensor<T>& w,
                          const Tensor<T>& b) {
  if (image.ndim() != 4) {
    throw DimensionError("patch_embed: image must be [B, h, w, ch], got " + shape_str(image.shape()));
  }
  const std::size_t batch = image.dim(0);
  const std::size_t h = image.dim(1);
  const std::size_t wd = image.dim(2);
  const std::size_t ch = image.dim(3);
  if (patch == 0 || h % patch != 0 || wd % patch != 0) {
    throw ConfigError("patch_embed: image " + std::to_string(h) + "x" + std::to_string(wd) +
                      " is not divisible by patch " + std::to_string(patch));
  }
  const std::size_t gh = h / patch;
  const std::size_t gw = wd / patch;
  // Each output row of ch values is one pixel of one patch.
  std::vector<std::size_t> index;
  index.reserve(batch * h * wd);
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t gy = 0; gy < gh; ++gy) {
      for (std::size_t gx = 0; gx < gw; ++gx) {
        for (std::size_t py = 0; py < patch; ++py) {
          for (std::size_t px = 0; px < patch; ++px) {
            index.push_back((n * h + gy * patch + py) * wd + gx * patch + px);
          }
        }
      }
    }
  }
  auto patches = ops::gather_rows(image, ch, index, Shape{batch, gh, gw, patch * patch * ch});
  return FeatureMap<T>(ops::affine(patches, w, b));
}

template <typename T>
WindowSet<T> window_partition(const FeatureMap<T>& fm, std::size_t window) {
  const std::size_t batch = fm.batch();
  const std::size_t h = fm.height();
  const std::size_t w = fm.width();
  const std::size_t c = fm.channels();
  if (window == 0 || h % window != 0 || w % window != 0) {
    throw ConfigError("window_partition: grid " + std::to_string(h) + "x" + std::to_string(w) +
                      " is not divisible by window " + std::to_string(window));
  }
  const std::size_t nh = h / window;
  const std::size_t nw = w / window;
  std::vector<std::size_t> index;
  index.reserve(batch * h * w);
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t wy = 0; wy < nh; ++wy) {
      for (std::size_t wx = 0; wx < nw; ++wx) {
        for (std::size_t i = 0; i < window; ++i) {
          for (std::size_t j = 0; j < window; ++j) {
            index.push_back((n * h + wy * window + i) * w + wx * window + j);
          }
        }
      }
    }
  }
  WindowOrigin origin{batch, h, w, window};
  auto windows = ops::gather_rows(fm.values, c, index,
                                  Shape{batch * nh * nw, window * window, c});
  return WindowSet<T>{std::move(windows), origin};
}

template <typename T>
FeatureMap<T> window_reverse(const WindowSet<T>& ws) {
  const auto& o = ws.origin;
  if (o.window == 0 || o.height % o.window != 0 || o.width % o.window != 0 ||
      ws.windows.ndim() != 3 || ws.windows.dim(0) != o.batch * o.windows_per_image() ||
      ws.windows.dim(1) != o.tokens_per_window()) {
    throw ContractError("window_reverse: windows " + shape_str(ws.windows.shape()) +
                        " inconsistent with origin " + std::to_string(o.batch) + "x" +
                        std::to_string(o.height) + "x" + std::to_string(o.width) + " window " +
                        std::to_string(o.window));
  }
  const std::size_t c = ws.windows.dim(2);
  const std::size_t m = o.window;
  const std::size_t nw = o.width / m;
  const std::size_t nh = o.height / m;
  std::vector<std::size_t> index;
  index.reserve(o.batch * o.height * o.width);
  for (std::size_t n = 0; n < o.batch; ++n) {
    for (std::size_t y = 0; y < o.height; ++y) {
      for (std::size_t x = 0; x < o.width; ++x) {
        const std::size_t win = (n * nh + y / m) * nw + x / m;
        index.push_back(win * m * m + (y % m) * m + x % m);
      }
    }
  }
  return FeatureMap<T>(
      ops::gather_rows(ws.windows, c, index, Shape{o.batch, o.height, o.width, c}));
}

template <typename T>
FeatureMap<T> cyclic_shift(const FeatureMap<T>& fm, long shift) {
  const std::size_t batch = fm.batch();
  const std::size_t h = fm.height();
  const std::size_t w = fm.width();
  const long lim = static_cast<long>(std::min(h, w));
  if (shift <= -lim || shift >= lim) {
    throw DimensionError("cyclic_shift: |shift| " + std::to_string(shift) +
                         " must be below min(H, W) = " + std::to_string(lim));
  }
  if (shift == 0) return fm;
  const long hh = static_cast<long>(h);
  const long ww = static_cast<long>(w);
  std::vector<std::size_t> index;
  index.reserve(batch * h * w);
  for (std::size_t n = 0; n < batch; ++n) {
    for (long y = 0; y < hh; ++y) {
      const long sy = ((y - shift) % hh + hh) % hh;
      for (long x = 0; x < ww; ++x) {
        const long sx = ((x - shift) % ww + ww) % ww;
        index.push_back((n * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx));
      }
    }
  }
  return FeatureMap<T>(ops::gather_rows(fm.values, fm.channels(), index, Shape(fm.values.shape())));
}

template <typename T>
AttentionMask<T> shift_mask(std::size_t height, std::size_t width, std::size_t window,
                            std::size_t shift) {
  if (window == 0 || shift >= window) {
    throw ConfigError("shift_mask: shift " + std::to_string(shift) + " must be below window " +
                      std::to_string(window));
  }
  if (height % window != 0 || width % window != 0) {
    throw ConfigError("shift_mask: grid " + std::to_string(height) + "x" + std::to_string(width) +
                      " is not divisible by window " + std::to_string(window));
  }
  // Three bands per axis: [0, L-M), [L-M, L-s), [L-s, L).
  auto band = [window, shift](std::size_t i, std::size_t len) -> std::size_t {
    if (i < len - window) return 0;
    if (i < len - shift) return 1;
    return 2;
  };
  const std::size_t nh = height / window;
  const std::size_t nw = width / window;
  const std::size_t n = window * window;
  std::vector<T> mask(nh * nw * n * n, T(0));
  std::vector<std::size_t> label(n);
  for (std::size_t wy = 0; wy < nh; ++wy) {
    for (std::size_t wx = 0; wx < nw; ++wx) {
      for (std::size_t i = 0; i < window; ++i) {
        for (std::size_t j = 0; j < window; ++j) {
          label[i * window + j] =
              band(wy * window + i, height) * 3 + band(wx * window + j, width);
        }
      }
      T* block = mask.data() + (wy * nw + wx) * n * n;
      for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = 0; b < n; ++b) {
          if (label[a] != label[b]) block[a * n + b] = static_cast<T>(kBlockedScore);
        }
      }
    }
  }
  return AttentionMask<T>{Tensor<T>(Shape{nh * nw, n, n}, std::move(mask))};
}

const std::vector<std::size_t>& relative_position_index(std::size_t window) {
  static std::mutex guard;
  static std::map<std::size_t, std::vector<std::size_t>> cache;
  std::lock_guard lock(guard);
  auto it = cache.find(window);
  if (it != cache.end()) return it->second;
  const std::size_t n = window * window;
  const std::size_t span = 2 * window - 1;
  std::vector<std::size_t> index(n * n);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t dy = a / window + window - 1 - b / window;
      const std::size_t dx = a % window + window - 1 - b % window;
      index[a * n + b] = dy * span + dx;
    }
  }
  return cache.emplace(window, std::move(index)).first->second;
}

#define MVSWIN_INSTANTIATE(T)                                                                   \
  template struct FeatureMap<T>;                                                                \
  template FeatureMap<T> patch_embed(const Tensor<T>&, std::size_t, const Tensor<T>&,          \
                                     const Tensor<T>&);                                         \
  template WindowSet<T> window_partition(const FeatureMap<T>&, std::size_t);                   \
  template FeatureMap<T> window_reverse(const WindowSet<T>&);                                  \
  template FeatureMap<T> cyclic_shift(const FeatureMap<T>&, long);                             \
  template AttentionMask<T> shift_mask<T>(std::size_t, std::size_t, std::size_t, std::size_t);

MVSWIN_INSTANTIATE(float)
MVSWIN_INSTANTIATE(double)

#undef MVSWIN_INSTANTIATE

}  // namespace mvswin
