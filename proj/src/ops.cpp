#include "mvswin/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

namespace mvswin::ops {

namespace {
struct ReluTrace {
  bool on = false;
  std::uint64_t digest = 0;
};
thread_local ReluTrace relu_trace;

void trace_bit(bool positive) {
  // FNV-1a over the sign bits
  relu_trace.digest = (relu_trace.digest ^ (positive ? 1u : 2u)) * 0x100000001b3ULL;
}
}  // namespace

void relu_trace_begin() { relu_trace = {true, 0xcbf29ce484222325ULL}; }

std::uint64_t relu_trace_end() {
  relu_trace.on = false;
  return relu_trace.digest;
}

namespace {

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

template <typename T>
bool wants_grad(std::initializer_list<const Tensor<T>*> inputs) {
  if (active_tape<T>() == nullptr) return false;
  for (const auto* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
Tensor<T> make_output(const char* op, Shape shape, std::vector<T> data, bool grad) {
  for (const auto& v : data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + op + " (output shape " +
                         shape_str(shape) + ")");
    }
  }
  return Tensor<T>(std::move(shape), std::move(data), grad);
}

template <typename T>
void record(const char* op, const Tensor<T>& out, std::function<void()> rule) {
  active_tape<T>()->record(op, out.node(), std::move(rule));
}

// Gradient buffer of an input, or null when that input takes no gradient.
template <typename T>
T* grad_of(const NodePtr<T>& node) {
  if (!node || !node->requires_grad) return nullptr;
  return node->grad_buffer();
}

void require(bool ok, const std::string& message) {
  if (!ok) throw DimensionError(message);
}

// Row-major kernels; all accumulate into c.
// c[m,n] += a[m,k] b[k,n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,n] += a[m,k] b[n,k]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T s = T(0);
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c[i * n + j] += s;
    }
  }
}

// c[m,n] += a[k,m]^T b[k,n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

struct BatchPlan {
  Shape batch;
  std::vector<std::size_t> a_index;
  std::vector<std::size_t> b_index;
};

BatchPlan plan_batches(const Shape& a_batch, const Shape& b_batch, const Shape& a_full,
                       const Shape& b_full) {
  const std::size_t nd = std::max(a_batch.size(), b_batch.size());
  BatchPlan plan;
  plan.batch.assign(nd, 1);
  for (std::size_t i = 0; i < nd; ++i) {
    const std::size_t ea =
        i < nd - a_batch.size() ? 1 : a_batch[i - (nd - a_batch.size())];
    const std::size_t eb =
        i < nd - b_batch.size() ? 1 : b_batch[i - (nd - b_batch.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw DimensionError("matmul batch extents do not broadcast: " + shape_str(a_full) +
                           " vs " + shape_str(b_full));
    }
    plan.batch[i] = std::max(ea, eb);
  }
  const std::size_t count = shape_numel(plan.batch);
  plan.a_index.resize(count);
  plan.b_index.resize(count);
  std::vector<std::size_t> idx(nd, 0);
  for (std::size_t flat = 0; flat < count; ++flat) {
    std::size_t ai = 0;
    std::size_t bi = 0;
    for (std::size_t d = 0; d < nd; ++d) {
      if (d >= nd - a_batch.size()) {
        const auto e = a_batch[d - (nd - a_batch.size())];
        ai = ai * e + (e == 1 ? 0 : idx[d]);
      }
      if (d >= nd - b_batch.size()) {
        const auto e = b_batch[d - (nd - b_batch.size())];
        bi = bi * e + (e == 1 ? 0 : idx[d]);
      }
    }
    plan.a_index[flat] = ai;
    plan.b_index[flat] = bi;
    for (std::size_t d = nd; d-- > 0;) {
      if (++idx[d] < plan.batch[d]) break;
      idx[d] = 0;
    }
  }
  return plan;
}

template <typename T>
Tensor<T> matmul_impl(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  const char* op = transpose_b ? "matmul_nt" : "matmul";
  require(a.defined() && b.defined() && a.ndim() >= 2 && b.ndim() >= 2,
          std::string(op) + " needs operands of rank >= 2");
  const std::size_t m = a.dim(-2);
  const std::size_t k = a.dim(-1);
  const std::size_t kb = transpose_b ? b.dim(-1) : b.dim(-2);
  const std::size_t n = transpose_b ? b.dim(-2) : b.dim(-1);
  if (k != kb) {
    throw DimensionError(std::string(op) + " inner extents differ: " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  auto plan = std::make_shared<BatchPlan>(plan_batches(a_batch, b_batch, a.shape(), b.shape()));

  Shape out_shape = plan->batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<T> out(shape_numel(out_shape), T(0));
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  const std::size_t count = plan->a_index.size();
  for (std::size_t s = 0; s < count; ++s) {
    const T* as = ad + plan->a_index[s] * m * k;
    const T* bs = bd + plan->b_index[s] * k * n;
    T* cs = out.data() + s * m * n;
    if (transpose_b) {
      gemm_nt(m, n, k, as, bs, cs);
    } else {
      gemm_nn(m, n, k, as, bs, cs);
    }
  }
  const bool grad = wants_grad<T>({&a, &b});
  auto result = make_output(op, std::move(out_shape), std::move(out), grad);
  if (grad) {
    record<T>(op, result, [an = a.node(), bn = b.node(), on = result.node(), plan, m, n, k,
                           transpose_b] {
      T* ga = grad_of(an);
      T* gb = grad_of(bn);
      const T* g = on->grad.data();
      const T* ad = an->data.data();
      const T* bd = bn->data.data();
      for (std::size_t s = 0; s < plan->a_index.size(); ++s) {
        const T* gs = g + s * m * n;
        const std::size_t ai = plan->a_index[s] * m * k;
        const std::size_t bi = plan->b_index[s] * k * n;
        if (transpose_b) {
          // c = a b^T : da = g b, db = g^T a
          if (ga) gemm_nn(m, k, n, gs, bd + bi, ga + ai);
          if (gb) gemm_tn(n, k, m, gs, ad + ai, gb + bi);
        } else {
          // c = a b : da = g b^T, db = a^T g
          if (ga) gemm_nt(m, k, n, gs, bd + bi, ga + ai);
          if (gb) gemm_tn(k, n, m, ad + ai, gs, gb + bi);
        }
      }
    });
  }
  return result;
}

}  // namespace

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  return matmul_impl(a, b, false);
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  return matmul_impl(a, b, true);
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (bs.size() > as.size()) {
    throw DimensionError("add: " + shape_str(bs) + " does not broadcast to " + shape_str(as));
  }
  const std::size_t lead = as.size() - bs.size();
  for (std::size_t i = 0; i < bs.size(); ++i) {
    if (bs[i] != 1 && bs[i] != as[lead + i]) {
      throw DimensionError("add: " + shape_str(bs) + " does not broadcast to " + shape_str(as));
    }
  }
  const std::size_t n = a.numel();
  std::vector<T> out(a.data().begin(), a.data().end());
  std::shared_ptr<std::vector<std::size_t>> bmap;
  if (bs == as) {
    const auto bd = b.data();
    for (std::size_t i = 0; i < n; ++i) out[i] += bd[i];
  } else {
    // Offset into b for every element of a.
    bmap = std::make_shared<std::vector<std::size_t>>(n);
    Shape bstride(as.size(), 0);
    std::size_t stride = 1;
    for (std::size_t i = bs.size(); i-- > 0;) {
      bstride[lead + i] = bs[i] == 1 ? 0 : stride;
      stride *= bs[i];
    }
    std::vector<std::size_t> idx(as.size(), 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < n; ++i) {
      (*bmap)[i] = off;
      for (std::size_t d = as.size(); d-- > 0;) {
        off += bstride[d];
        if (++idx[d] < as[d]) break;
        off -= bstride[d] * idx[d];
        idx[d] = 0;
      }
    }
    const auto bd = b.data();
    for (std::size_t i = 0; i < n; ++i) out[i] += bd[(*bmap)[i]];
  }
  const bool grad = wants_grad<T>({&a, &b});
  auto result = make_output("add", Shape(as), std::move(out), grad);
  if (grad) {
    record<T>("add", result, [an = a.node(), bn = b.node(), on = result.node(), bmap] {
      const auto& g = on->grad;
      if (T* ga = grad_of(an)) {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (T* gb = grad_of(bn)) {
        if (bmap) {
          for (std::size_t i = 0; i < g.size(); ++i) gb[(*bmap)[i]] += g[i];
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shapes differ " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  const bool grad = wants_grad<T>({&a, &b});
  auto result = make_output("mul", Shape(a.shape()), std::move(out), grad);
  if (grad) {
    record<T>("mul", result, [an = a.node(), bn = b.node(), on = result.node()] {
      const auto& g = on->grad;
      T* ga = grad_of(an);
      T* gb = grad_of(bn);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (ga) ga[i] += g[i] * bn->data[i];
        if (gb) gb[i] += g[i] * an->data[i];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  const bool grad = wants_grad<T>({&a});
  auto result = make_output("scale", Shape(a.shape()), std::move(out), grad);
  if (grad) {
    record<T>("scale", result, [an = a.node(), on = result.node(), factor] {
      const auto& g = on->grad;
      if (T* ga = grad_of(an)) {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = T(0);
  for (auto v : a.data()) total += v;
  const bool grad = wants_grad<T>({&a});
  auto result = make_output("sum", Shape{}, std::vector<T>{total}, grad);
  if (grad) {
    record<T>("sum", result, [an = a.node(), on = result.node()] {
      const T g = on->grad[0];
      if (T* ga = grad_of(an)) {
        for (std::size_t i = 0; i < an->data.size(); ++i) ga[i] += g;
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  T total = T(0);
  for (auto v : a.data()) total += v;
  const T count = static_cast<T>(a.numel());
  const bool grad = wants_grad<T>({&a});
  auto result = make_output("mean", Shape{}, std::vector<T>{total / count}, grad);
  if (grad) {
    record<T>("mean", result, [an = a.node(), on = result.node(), count] {
      const T g = on->grad[0] / count;
      if (T* ga = grad_of(an)) {
        for (std::size_t i = 0; i < an->data.size(); ++i) ga[i] += g;
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& a, int axis) {
  const int nd = static_cast<int>(a.ndim());
  const int ax = axis < 0 ? axis + nd : axis;
  require(ax >= 0 && ax < nd, "mean_axis: axis out of range for " + shape_str(a.shape()));
  const auto& s = a.shape();
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (int i = 0; i < ax; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (int i = ax + 1; i < nd; ++i) inner *= s[static_cast<std::size_t>(i)];
  const std::size_t len = s[static_cast<std::size_t>(ax)];
  Shape out_shape;
  for (int i = 0; i < nd; ++i) {
    if (i != ax) out_shape.push_back(s[static_cast<std::size_t>(i)]);
  }
  std::vector<T> out(outer * inner, T(0));
  const T* ad = a.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    T* orow = out.data() + o * inner;
    for (std::size_t k = 0; k < len; ++k) {
      const T* arow = ad + (o * len + k) * inner;
      for (std::size_t i = 0; i < inner; ++i) orow[i] += arow[i];
    }
    for (std::size_t i = 0; i < inner; ++i) orow[i] /= static_cast<T>(len);
  }
  const bool grad = wants_grad<T>({&a});
  auto result = make_output("mean_axis", std::move(out_shape), std::move(out), grad);
  if (grad) {
    record<T>("mean_axis", result, [an = a.node(), on = result.node(), outer, inner, len] {
      T* ga = grad_of(an);
      if (!ga) return;
      const T* g = on->grad.data();
      const T w = T(1) / static_cast<T>(len);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t k = 0; k < len; ++k) {
          T* arow = ga + (o * len + k) * inner;
          for (std::size_t i = 0; i < inner; ++i) arow[i] += g[o * inner + i] * w;
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  const bool grad = wants_grad<T>({&a});
  auto result = make_output("reshape", std::move(shape), std::move(out), grad);
  if (grad) {
    record<T>("reshape", result, [an = a.node(), on = result.node()] {
      if (T* ga = grad_of(an)) {
        const auto& g = on->grad;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, std::size_t width, std::span<const std::size_t> index,
                      Shape out_shape) {
  require(width > 0 && a.numel() % width == 0,
          "gather_rows: width " + std::to_string(width) + " does not tile " +
              shape_str(a.shape()));
  if (shape_numel(out_shape) != index.size() * width) {
    throw DimensionError("gather_rows: output shape " + shape_str(out_shape) + " does not hold " +
                         std::to_string(index.size()) + " rows of " + std::to_string(width));
  }
  const std::size_t rows = a.numel() / width;
  std::vector<T> out(index.size() * width);
  const T* ad = a.data().data();
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= rows) {
      throw DimensionError("gather_rows: row " + std::to_string(index[r]) + " out of " +
                           std::to_string(rows));
    }
    std::copy_n(ad + index[r] * width, width, out.data() + r * width);
  }
  const bool grad = wants_grad<T>({&a});
  auto result = make_output("gather_rows", std::move(out_shape), std::move(out), grad);
  if (grad) {
    auto idx = std::make_shared<std::vector<std::size_t>>(index.begin(), index.end());
    record<T>("gather_rows", result, [an = a.node(), on = result.node(), idx, width] {
      T* ga = grad_of(an);
      if (!ga) return;
      const T* g = on->grad.data();
      for (std::size_t r = 0; r < idx->size(); ++r) {
        T* dst = ga + (*idx)[r] * width;
        const T* src = g + r * width;
        for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& axes) {
  const std::size_t nd = a.ndim();
  require(axes.size() == nd, "permute: expected " + std::to_string(nd) + " axes");
  std::vector<bool> seen(nd, false);
  for (auto ax : axes) {
    require(ax < nd && !seen[ax], "permute: axes are not a permutation");
    seen[ax] = true;
  }
  const auto& s = a.shape();
  // Trailing axes left in place move as contiguous rows.
  std::size_t keep = 0;
  while (keep < nd && axes[nd - 1 - keep] == nd - 1 - keep) ++keep;
  const std::size_t lead = nd - keep;
  std::size_t width = 1;
  for (std::size_t i = lead; i < nd; ++i) width *= s[i];

  std::vector<std::size_t> in_stride(lead, 1);
  for (std::size_t i = lead; i-- > 1;) in_stride[i - 1] = in_stride[i] * s[i];
  Shape out_shape(nd);
  for (std::size_t i = 0; i < nd; ++i) out_shape[i] = s[axes[i]];

  std::size_t rows = 1;
  for (std::size_t i = 0; i < lead; ++i) rows *= out_shape[i];
  std::vector<std::size_t> index(rows);
  std::vector<std::size_t> idx(lead, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < lead; ++i) src += idx[i] * in_stride[axes[i]];
    index[r] = src;
    for (std::size_t d = lead; d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  return gather_rows(a, width, index, std::move(out_shape));
}

template <typename T>
Tensor<T> concat_last(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.ndim() >= 1 && a.ndim() == b.ndim(),
          "concat_last: rank mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  for (std::size_t i = 0; i + 1 < a.ndim(); ++i) {
    require(a.shape()[i] == b.shape()[i], "concat_last: leading extents differ " +
                                              shape_str(a.shape()) + " vs " +
                                              shape_str(b.shape()));
  }
  const std::size_t p = a.dim(-1);
  const std::size_t q = b.dim(-1);
  const std::size_t rows = a.numel() / p;
  Shape out_shape = a.shape();
  out_shape.back() = p + q;
  std::vector<T> out(rows * (p + q));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.data().data() + r * p, p, out.data() + r * (p + q));
    std::copy_n(b.data().data() + r * q, q, out.data() + r * (p + q) + p);
  }
  const bool grad = wants_grad<T>({&a, &b});
  auto result = make_output("concat_last", std::move(out_shape), std::move(out), grad);
  if (grad) {
    record<T>("concat_last", result, [an = a.node(), bn = b.node(), on = result.node(), p, q,
                                      rows] {
      const T* g = on->grad.data();
      T* ga = grad_of(an);
      T* gb = grad_of(bn);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* grow = g + r * (p + q);
        if (ga) {
          for (std::size_t j = 0; j < p; ++j) ga[r * p + j] += grow[j];
        }
        if (gb) {
          for (std::size_t j = 0; j < q; ++j) gb[r * q + j] += grow[p + j];
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> softmax_last(const Tensor<T>& x) {
  require(x.ndim() >= 1, "softmax_last: needs rank >= 1");
  const std::size_t n = x.dim(-1);
  const std::size_t rows = x.numel() / n;
  std::vector<T> out(x.numel());
  const T* xd = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xd + r * n;
    T* yr = out.data() + r * n;
    const T mx = *std::max_element(xr, xr + n);
    T total = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      total += yr[j];
    }
    for (std::size_t j = 0; j < n; ++j) yr[j] /= total;
  }
  const bool grad = wants_grad<T>({&x});
  auto result = make_output("softmax_last", Shape(x.shape()), std::move(out), grad);
  if (grad) {
    record<T>("softmax_last", result, [xn = x.node(), on = result.node(), n, rows] {
      T* gx = grad_of(xn);
      if (!gx) return;
      const T* y = on->data.data();
      const T* g = on->grad.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* yr = y + r * n;
        const T* gr = g + r * n;
        T dot = T(0);
        for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
        T* dx = gx + r * n;
        for (std::size_t j = 0; j < n; ++j) dx[j] += yr[j] * (gr[j] - dot);
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  require(x.ndim() >= 1, "layer_norm: needs rank >= 1");
  const std::size_t c = x.dim(-1);
  require(gamma.shape() == Shape{c} && beta.shape() == Shape{c},
          "layer_norm: gamma/beta must have shape [" + std::to_string(c) + "], got " +
              shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
  if (!(eps > T(0))) throw ValidationError("layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / c;
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  std::vector<T> out(x.numel());
  const T* xd = x.data().data();
  const T* gd = gamma.data().data();
  const T* bd = beta.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xd + r * c;
    T mu = T(0);
    for (std::size_t j = 0; j < c; ++j) mu += xr[j];
    mu /= static_cast<T>(c);
    T var = T(0);
    for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(c);
    // an overflowed variance would silently zero the row
    if (!std::isfinite(var)) throw NumericError("non-finite value produced by layer_norm (row variance)");
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    T* hr = xhat->data() + r * c;
    T* yr = out.data() + r * c;
    for (std::size_t j = 0; j < c; ++j) {
      hr[j] = (xr[j] - mu) * rs;
      yr[j] = hr[j] * gd[j] + bd[j];
    }
  }
  const bool grad = wants_grad<T>({&x, &gamma, &beta});
  auto result = make_output("layer_norm", Shape(x.shape()), std::move(out), grad);
  if (grad) {
    record<T>("layer_norm", result, [xn = x.node(), gn = gamma.node(), bn = beta.node(),
                                     on = result.node(), xhat, rstd, rows, c] {
      const T* g = on->grad.data();
      T* gx = grad_of(xn);
      T* gg = grad_of(gn);
      T* gb = grad_of(bn);
      const T* gam = gn->data.data();
      std::vector<T> dxhat(c);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* gr = g + r * c;
        const T* hr = xhat->data() + r * c;
        if (gg) {
          for (std::size_t j = 0; j < c; ++j) gg[j] += gr[j] * hr[j];
        }
        if (gb) {
          for (std::size_t j = 0; j < c; ++j) gb[j] += gr[j];
        }
        if (gx) {
          T m1 = T(0);
          T m2 = T(0);
          for (std::size_t j = 0; j < c; ++j) {
            dxhat[j] = gr[j] * gam[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * hr[j];
          }
          m1 /= static_cast<T>(c);
          m2 /= static_cast<T>(c);
          const T rs = (*rstd)[r];
          T* dx = gx + r * c;
          for (std::size_t j = 0; j < c; ++j) dx[j] += rs * (dxhat[j] - m1 - hr[j] * m2);
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require(x.ndim() >= 1 && w.ndim() == 2, "affine: needs x[..., I] and W[I, O]");
  const std::size_t in = x.dim(-1);
  if (w.dim(0) != in) {
    throw DimensionError("affine: input extent " + std::to_string(in) +
                         " does not match weight " + shape_str(w.shape()) + " (x is " +
                         shape_str(x.shape()) + ")");
  }
  const std::size_t outw = w.dim(1);
  if (b.defined() && b.shape() != Shape{outw}) {
    throw DimensionError("affine: bias " + shape_str(b.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  }
  const std::size_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = outw;
  std::vector<T> out(rows * outw, T(0));
  if (b.defined()) {
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(b.data().data(), outw, out.data() + r * outw);
  }
  gemm_nn(rows, outw, in, x.data().data(), w.data().data(), out.data());
  const bool grad = wants_grad<T>({&x, &w, &b});
  auto result = make_output("affine", std::move(out_shape), std::move(out), grad);
  if (grad) {
    record<T>("affine", result, [xn = x.node(), wn = w.node(), bn = b.node(), on = result.node(),
                                 rows, in, outw] {
      const T* g = on->grad.data();
      if (T* gx = grad_of(xn)) gemm_nt(rows, in, outw, g, wn->data.data(), gx);
      if (T* gw = grad_of(wn)) gemm_tn(in, outw, rows, xn->data.data(), g, gw);
      if (T* gb = grad_of(bn)) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < outw; ++j) gb[j] += g[r * outw + j];
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) > T(0) ? x.at(i) : T(0);
  if (relu_trace.on) {
    for (std::size_t i = 0; i < out.size(); ++i) trace_bit(x.at(i) > T(0));
  }
  const bool grad = wants_grad<T>({&x});
  auto result = make_output("relu", Shape(x.shape()), std::move(out), grad);
  if (grad) {
    record<T>("relu", result, [xn = x.node(), on = result.node()] {
      T* gx = grad_of(xn);
      if (!gx) return;
      const auto& g = on->grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (xn->data[i] > T(0)) gx[i] += g[i];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x.at(i);
    if (v >= T(0)) {
      out[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      out[i] = e / (T(1) + e);
    }
  }
  const bool grad = wants_grad<T>({&x});
  auto result = make_output("sigmoid", Shape(x.shape()), std::move(out), grad);
  if (grad) {
    record<T>("sigmoid", result, [xn = x.node(), on = result.node()] {
      T* gx = grad_of(xn);
      if (!gx) return;
      const auto& g = on->grad;
      const auto& y = on->data;
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (T(1) - y[i]);
    });
  }
  return result;
}

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& labels) {
  if (logits.shape() != labels.shape()) {
    throw DimensionError("bce_with_logits: logits " + shape_str(logits.shape()) +
                         " vs labels " + shape_str(labels.shape()));
  }
  const std::size_t n = logits.numel();
  T total = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const T y = labels.at(i);
    if (y != T(0) && y != T(1)) {
      throw ValidationError("bce_with_logits: label at " + std::to_string(i) +
                            " is not 0 or 1");
    }
    const T z = logits.at(i);
    total += std::max(z, T(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  const bool grad = wants_grad<T>({&logits});
  auto result = make_output("bce_with_logits", Shape{}, std::vector<T>{total / static_cast<T>(n)},
                            grad);
  if (grad) {
    record<T>("bce_with_logits", result, [zn = logits.node(), yn = labels.node(),
                                          on = result.node(), n] {
      T* gz = grad_of(zn);
      if (!gz) return;
      const T g = on->grad[0] / static_cast<T>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const T p = static_cast<T>(stable_sigmoid(static_cast<double>(zn->data[i])));
        gz[i] += g * (p - yn->data[i]);
      }
    });
  }
  return result;
}

#define MVSWIN_INSTANTIATE(T)                                                                  \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> scale(const Tensor<T>&, T);                                               \
  template Tensor<T> sum(const Tensor<T>&);                                                    \
  template Tensor<T> mean(const Tensor<T>&);                                                   \
  template Tensor<T> mean_axis(const Tensor<T>&, int);                                         \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                         \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);               \
  template Tensor<T> gather_rows(const Tensor<T>&, std::size_t, std::span<const std::size_t>, \
                                 Shape);                                                       \
  template Tensor<T> concat_last(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> softmax_last(const Tensor<T>&);                                           \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);      \
  template Tensor<T> affine(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> relu(const Tensor<T>&);                                                   \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                \
  template Tensor<T> bce_with_logits(const Tensor<T>&, const Tensor<T>&);

MVSWIN_INSTANTIATE(float)
MVSWIN_INSTANTIATE(double)

#undef MVSWIN_INSTANTIATE

}  // namespace mvswin::ops
