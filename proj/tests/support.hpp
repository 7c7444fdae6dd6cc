#pragma once

#include <cmath>
#include <cstring>
#include <random>

#include "mvswin/attention.hpp"
#include "mvswin/init.hpp"
#include "oracles.hpp"

namespace testing {

using mvswin::Shape;
using mvswin::Tensor;
using TensorD = mvswin::Tensor<double>;

inline TensorD randn(Shape shape, std::uint64_t seed, double stddev = 1.0, bool grad = false) {
  mvswin::Rng rng(seed);
  return mvswin::normal<double>(std::move(shape), 0.0, stddev, rng, grad);
}

inline oracle::Vec vec(const TensorD& t) { return {t.data().begin(), t.data().end()}; }

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double worst = 0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    worst = std::max(worst, std::abs(static_cast<double>(a.at(i)) - static_cast<double>(b.at(i))));
  return worst;
}

inline double max_abs_diff(const oracle::Vec& a, const oracle::Vec& b) {
  if (a.size() != b.size()) return INFINITY;
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(T)) == 0;
}

/// Overwrites every element with seeded Gaussians (keeps the grad flag).
inline void fill_randn(TensorD t, std::uint64_t seed, double stddev) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.mutable_data()) v = dist(rng);
}

/// Randomizes every attention parameter so biases and the table matter.
inline void randomize(mvswin::AttentionParams<double>& p, std::uint64_t seed) {
  std::uint64_t s = seed;
  for (auto* t : {&p.wq, &p.bq, &p.wk, &p.bk, &p.wv, &p.bv, &p.wo, &p.bo}) fill_randn(*t, ++s, 0.4);
  if (p.rel_bias.defined()) fill_randn(p.rel_bias, ++s, 0.5);
}

inline oracle::Attention to_oracle(const mvswin::MdaParams<double>& p) {
  const auto& a = p.attn;
  oracle::Attention o;
  o.channels = a.channels();
  o.heads = a.heads;
  o.window = a.window;
  o.wq = vec(a.wq); o.bq = vec(a.bq);
  o.wk = vec(a.wk); o.bk = vec(a.bk);
  o.wv = vec(a.wv); o.bv = vec(a.bv);
  o.wo = vec(a.wo); o.bo = vec(a.bo);
  if (a.rel_bias.defined()) o.rel_bias = vec(a.rel_bias);
  if (const auto* wa = std::get_if<mvswin::WeightedAddition>(&p.fuse)) {
    o.w_self = wa->w_self;
    o.w_cross = wa->w_cross;
  } else {
    o.wf = vec(p.wf);
  }
  return o;
}

/// Slice b of a [B, H, W, C] tensor as a flat [H, W, C] vector.
inline oracle::Vec image(const TensorD& t, std::size_t b) {
  const std::size_t per = t.numel() / t.dim(0);
  return {t.data().begin() + static_cast<std::ptrdiff_t>(b * per),
          t.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * per)};
}

}  // namespace testing
