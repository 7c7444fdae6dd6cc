#include "mvswin/attention.hpp"

#include <cmath>
#include <string>

#include "mvswin/ops.hpp"

namespace mvswin {

void validate_fuse_mode(const FuseMode& mode) {
  if (const auto* wa = std::get_if<WeightedAddition>(&mode)) {
    if (!(wa->w_self >= 0.0) || !(wa->w_cross >= 0.0)) {
      throw ConfigError("weighted addition weights must be non-negative");
    }
    if (std::abs(wa->w_self + wa->w_cross - 1.0) > 1e-12) {
      throw ConfigError("weighted addition weights must sum to 1, got " +
                        std::to_string(wa->w_self + wa->w_cross));
    }
  }
}

template <typename T>
AttentionParams<T> make_attention_params(std::size_t channels, std::size_t heads,
                                         std::size_t window, bool rel_bias, Rng& rng) {
  if (heads == 0 || channels % heads != 0) {
    throw ConfigError("attention: " + std::to_string(heads) + " heads do not divide " +
                      std::to_string(channels) + " channels");
  }
  AttentionParams<T> p;
  p.heads = heads;
  p.window = window;
  const Shape square{channels, channels};
  p.wq = trunc_normal<T>(square, 0.02, rng);
  p.bq = Tensor<T>::zeros({channels}, true);
  p.wk = trunc_normal<T>(square, 0.02, rng);
  p.bk = Tensor<T>::zeros({channels}, true);
  p.wv = trunc_normal<T>(square, 0.02, rng);
  p.bv = Tensor<T>::zeros({channels}, true);
  p.wo = trunc_normal<T>(square, 0.02, rng);
  p.bo = Tensor<T>::zeros({channels}, true);
  if (rel_bias) {
    const std::size_t span = 2 * window - 1;
    p.rel_bias = Tensor<T>::zeros({span * span, heads}, true);
  }
  return p;
}

template <typename T>
MdaParams<T> make_mda_params(std::size_t channels, std::size_t heads, std::size_t window,
                             bool rel_bias, const FuseMode& fuse, Rng& rng) {
  validate_fuse_mode(fuse);
  MdaParams<T> p;
  p.attn = make_attention_params<T>(channels, heads, window, rel_bias, rng);
  p.fuse = fuse;
  if (std::holds_alternative<Concatenation>(fuse)) {
    const std::size_t n = window * window;
    p.wf = normal<T>({2 * n, n}, 0.0, 0.01, rng);
    auto w = p.wf.mutable_data();
    for (std::size_t i = 0; i < n; ++i) {
      w[i * n + i] += T(0.5);
      w[(n + i) * n + i] += T(0.5);
    }
  }
  return p;
}

namespace {

// [R, N, C] -> [R / nw, nw, heads, N, d]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t nw, std::size_t heads) {
  const std::size_t r = x.dim(0);
  const std::size_t n = x.dim(1);
  const std::size_t c = x.dim(2);
  const std::size_t d = c / heads;
  std::vector<std::size_t> index(r * heads * n);
  std::size_t o = 0;
  for (std::size_t w = 0; w < r; ++w) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t t = 0; t < n; ++t) index[o++] = (w * n + t) * heads + h;
    }
  }
  return ops::gather_rows(x, d, index, Shape{r / nw, nw, heads, n, d});
}

// [B, nw, heads, N, d] -> [B * nw, N, C]
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  const std::size_t r = x.dim(0) * x.dim(1);
  const std::size_t heads = x.dim(2);
  const std::size_t n = x.dim(3);
  const std::size_t d = x.dim(4);
  std::vector<std::size_t> index(r * n * heads);
  std::size_t o = 0;
  for (std::size_t w = 0; w < r; ++w) {
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t h = 0; h < heads; ++h) index[o++] = (w * heads + h) * n + t;
    }
  }
  return ops::gather_rows(x, d, index, Shape{r, n, heads * d});
}

// Relative position bias table [(2M-1)^2, heads] expanded to [heads, N, N].
template <typename T>
Tensor<T> expand_bias(const AttentionParams<T>& p, std::size_t n) {
  if (!p.rel_bias.defined()) return {};
  if (p.window * p.window != n) {
    throw DimensionError("attention: bias table built for window " + std::to_string(p.window) +
                         " used on " + std::to_string(n) + "-token windows");
  }
  const auto& rel = relative_position_index(p.window);
  std::vector<std::size_t> index(p.heads * n * n);
  std::size_t o = 0;
  for (std::size_t h = 0; h < p.heads; ++h) {
    for (std::size_t k = 0; k < n * n; ++k) index[o++] = rel[k] * p.heads + h;
  }
  return ops::gather_rows(p.rel_bias, 1, index, Shape{p.heads, n, n});
}

// [nW, N, N] -> [nW, 1, N, N] so it broadcasts over batch and heads.
template <typename T>
Tensor<T> mask_for_heads(const Tensor<T>& mask, std::size_t rows, std::size_t n) {
  if (!mask.defined()) return {};
  if (mask.ndim() != 3 || mask.dim(1) != n || mask.dim(2) != n || rows % mask.dim(0) != 0) {
    throw DimensionError("attention: mask " + shape_str(mask.shape()) + " does not fit " +
                         std::to_string(rows) + " windows of " + std::to_string(n) + " tokens");
  }
  return Tensor<T>(Shape{mask.dim(0), 1, n, n},
                   std::vector<T>(mask.data().begin(), mask.data().end()));
}

template <typename T>
Tensor<T> attention_scores(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& bias,
                           const Tensor<T>& mask, T inv_scale) {
  auto s = ops::scale(ops::matmul_nt(q, k), inv_scale);
  if (bias.defined()) s = ops::add(s, bias);
  if (mask.defined()) s = ops::add(s, mask);
  return s;
}

struct Projected {
  std::size_t windows = 1;  // nW
  std::size_t rows = 0;     // B * nW
  std::size_t tokens = 0;   // N
  std::size_t channels = 0;
};

template <typename T>
Projected check_tokens(const Tensor<T>& x, const AttentionParams<T>& p, const Tensor<T>& mask,
                       const char* what) {
  if (!x.defined() || x.ndim() != 3) {
    throw DimensionError(std::string(what) + ": tokens must be [B*nW, N, C]");
  }
  if (x.dim(2) != p.channels()) {
    throw DimensionError(std::string(what) + ": tokens " + shape_str(x.shape()) +
                         " do not match projection width " + std::to_string(p.channels()));
  }
  if (p.heads == 0 || x.dim(2) % p.heads != 0) {
    throw DimensionError(std::string(what) + ": " + std::to_string(p.heads) +
                         " heads do not divide " + std::to_string(x.dim(2)) + " channels");
  }
  Projected g;
  g.rows = x.dim(0);
  g.tokens = x.dim(1);
  g.channels = x.dim(2);
  g.windows = mask.defined() ? mask.dim(0) : 1;
  return g;
}

template <typename T>
Tensor<T> project(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t nw,
                  std::size_t heads) {
  return split_heads(ops::affine(x, w, b), nw, heads);
}

// Everything after the q/k/v projections. Shapes are [B, nW, heads, N, d].
template <typename T>
Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& k_self, const Tensor<T>& k_cross,
                 const Tensor<T>& v, const MdaParams<T>& p, const Tensor<T>& bias,
                 const Tensor<T>& mask, AttentionTrace<T>* trace) {
  const std::size_t d = q.dim(4);
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(d));
  auto a_self = ops::softmax_last(attention_scores(q, k_self, bias, mask, inv_scale));
  auto a_cross = ops::softmax_last(attention_scores(q, k_cross, bias, mask, inv_scale));
  Tensor<T> fused;
  if (const auto* wa = std::get_if<WeightedAddition>(&p.fuse)) {
    fused = ops::add(ops::scale(a_self, static_cast<T>(wa->w_self)),
                     ops::scale(a_cross, static_cast<T>(wa->w_cross)));
  } else {
    const std::size_t n = q.dim(3);
    if (!p.wf.defined() || p.wf.shape() != Shape{2 * n, n}) {
      throw DimensionError("attention: concatenation fusion needs wf of shape " +
                           shape_str(Shape{2 * n, n}));
    }
    fused = ops::matmul(ops::concat_last(a_self, a_cross), p.wf);
  }
  if (trace != nullptr) {
    trace->self_map = a_self;
    trace->cross_map = a_cross;
    trace->fused_map = fused;
  }
  return ops::affine(merge_heads(ops::matmul(fused, v)), p.attn.wo, p.attn.bo);
}

template <typename T>
void check_pair(const ViewPair<T>& pair) {
  if (pair.cc.values.shape() != pair.mlo.values.shape()) {
    throw ContractError("view pair shapes differ: CC " + shape_str(pair.cc.values.shape()) +
                        " vs MLO " + shape_str(pair.mlo.values.shape()));
  }
}

void check_geometry(const WindowGeometry& geo, std::size_t h, std::size_t w) {
  if (geo.window == 0 || h % geo.window != 0 || w % geo.window != 0) {
    throw ConfigError("grid " + std::to_string(h) + "x" + std::to_string(w) +
                      " is not divisible by window " + std::to_string(geo.window));
  }
  if (geo.shift >= geo.window) {
    throw ConfigError("shift " + std::to_string(geo.shift) + " must be below window " +
                      std::to_string(geo.window));
  }
}

}  // namespace

template <typename T>
Tensor<T> dynamic_attention(const Tensor<T>& q_src, const Tensor<T>& k_self,
                            const Tensor<T>& k_cross, const Tensor<T>& v_src,
                            const MdaParams<T>& p, const Tensor<T>& mask,
                            AttentionTrace<T>* trace) {
  const auto g = check_tokens(q_src, p.attn, mask, "dynamic_attention");
  for (const auto* t : {&k_self, &k_cross, &v_src}) {
    if (!t->defined() || t->shape() != q_src.shape()) {
      throw DimensionError("dynamic_attention: all token inputs must share shape " +
                           shape_str(q_src.shape()));
    }
  }
  const auto mask4 = mask_for_heads(mask, g.rows, g.tokens);
  const auto& a = p.attn;
  auto q = project(q_src, a.wq, a.bq, g.windows, a.heads);
  auto ks = project(k_self, a.wk, a.bk, g.windows, a.heads);
  auto kc = project(k_cross, a.wk, a.bk, g.windows, a.heads);
  auto v = project(v_src, a.wv, a.bv, g.windows, a.heads);
  return attend(q, ks, kc, v, p, expand_bias(a, g.tokens), mask4, trace);
}

template <typename T>
Tensor<T> window_self_attention(const Tensor<T>& tokens, const AttentionParams<T>& p,
                                const Tensor<T>& mask) {
  const auto g = check_tokens(tokens, p, mask, "window_self_attention");
  const auto mask4 = mask_for_heads(mask, g.rows, g.tokens);
  auto q = project(tokens, p.wq, p.bq, g.windows, p.heads);
  auto k = project(tokens, p.wk, p.bk, g.windows, p.heads);
  auto v = project(tokens, p.wv, p.bv, g.windows, p.heads);
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(q.dim(4)));
  auto attn = ops::softmax_last(attention_scores(q, k, expand_bias(p, g.tokens), mask4, inv_scale));
  return ops::affine(merge_heads(ops::matmul(attn, v)), p.wo, p.bo);
}

template <typename T>
ViewPair<T> w_mda(const ViewPair<T>& pair, const MdaParams<T>& p_cc, const MdaParams<T>& p_mlo,
                  const WindowGeometry& geo, AttentionTrace<T>* cc_trace,
                  AttentionTrace<T>* mlo_trace) {
  check_pair(pair);
  const std::size_t h = pair.cc.height();
  const std::size_t w = pair.cc.width();
  check_geometry(geo, h, w);
  const long shift = static_cast<long>(geo.shift);

  auto windows_of = [&](const FeatureMap<T>& fm) {
    return window_partition(shift != 0 ? cyclic_shift(fm, -shift) : fm, geo.window);
  };
  const auto ws_cc = windows_of(pair.cc);
  const auto ws_mlo = windows_of(pair.mlo);
  const std::size_t nw = ws_cc.origin.windows_per_image();
  const std::size_t n = ws_cc.origin.tokens_per_window();

  Tensor<T> mask;
  if (shift != 0) mask = shift_mask<T>(h, w, geo.window, geo.shift).mask;
  check_tokens(ws_cc.windows, p_cc.attn, mask, "w_mda");
  check_tokens(ws_mlo.windows, p_mlo.attn, mask, "w_mda");
  const auto mask4 = mask_for_heads(mask, ws_cc.windows.dim(0), n);

  const auto& ac = p_cc.attn;
  const auto& am = p_mlo.attn;
  auto q_cc = project(ws_cc.windows, ac.wq, ac.bq, nw, ac.heads);
  auto k_cc = project(ws_cc.windows, ac.wk, ac.bk, nw, ac.heads);
  auto v_cc = project(ws_cc.windows, ac.wv, ac.bv, nw, ac.heads);
  auto q_mlo = project(ws_mlo.windows, am.wq, am.bq, nw, am.heads);
  auto k_mlo = project(ws_mlo.windows, am.wk, am.bk, nw, am.heads);
  auto v_mlo = project(ws_mlo.windows, am.wv, am.bv, nw, am.heads);

  const auto bias_cc = expand_bias(ac, n);
  const auto bias_mlo = ac.rel_bias.same_node(am.rel_bias) ? bias_cc : expand_bias(am, n);
  auto out_cc = attend(q_cc, k_cc, k_mlo, v_cc, p_cc, bias_cc, mask4, cc_trace);
  auto out_mlo = attend(q_mlo, k_mlo, k_cc, v_mlo, p_mlo, bias_mlo, mask4, mlo_trace);

  auto restore = [&](Tensor<T> tokens, const WindowOrigin& origin) {
    auto fm = window_reverse(WindowSet<T>{std::move(tokens), origin});
    return shift != 0 ? cyclic_shift(fm, shift) : fm;
  };
  return ViewPair<T>{restore(std::move(out_cc), ws_cc.origin),
                     restore(std::move(out_mlo), ws_mlo.origin)};
}

template <typename T>
FeatureMap<T> window_attention(const FeatureMap<T>& fm, const AttentionParams<T>& p,
                               const WindowGeometry& geo) {
  check_geometry(geo, fm.height(), fm.width());
  const long shift = static_cast<long>(geo.shift);
  const auto ws = window_partition(shift != 0 ? cyclic_shift(fm, -shift) : fm, geo.window);
  Tensor<T> mask;
  if (shift != 0) mask = shift_mask<T>(fm.height(), fm.width(), geo.window, geo.shift).mask;
  auto out = window_reverse(WindowSet<T>{window_self_attention(ws.windows, p, mask), ws.origin});
  return shift != 0 ? cyclic_shift(out, shift) : out;
}

#define MVSWIN_INSTANTIATE(T)                                                                   \
  template AttentionParams<T> make_attention_params<T>(std::size_t, std::size_t, std::size_t, \
                                                       bool, Rng&);                             \
  template MdaParams<T> make_mda_params<T>(std::size_t, std::size_t, std::size_t, bool,        \
                                           const FuseMode&, Rng&);                              \
  template Tensor<T> dynamic_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                       const Tensor<T>&, const MdaParams<T>&, const Tensor<T>&, \
                                       AttentionTrace<T>*);                                     \
  template Tensor<T> window_self_attention(const Tensor<T>&, const AttentionParams<T>&,        \
                                           const Tensor<T>&);                                   \
  template ViewPair<T> w_mda(const ViewPair<T>&, const MdaParams<T>&, const MdaParams<T>&,     \
                             const WindowGeometry&, AttentionTrace<T>*, AttentionTrace<T>*);    \
  template FeatureMap<T> window_attention(const FeatureMap<T>&, const AttentionParams<T>&,     \
                                          const WindowGeometry&);

MVSWIN_INSTANTIATE(float)
MVSWIN_INSTANTIATE(double)

#undef MVSWIN_INSTANTIATE

}  // namespace mvswin
