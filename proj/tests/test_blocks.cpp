#include "doctest.h"
#include "mvswin/blocks.hpp"
#include "mvswin/gradcheck.hpp"
#include "mvswin/ops.hpp"
#include "support.hpp"

using namespace mvswin;
using testing::randn;
using testing::TensorD;

namespace {

void zero(TensorD t) {
  for (auto& v : t.mutable_data()) v = 0.0;
}

void scramble(OmniBlockParams<double>& p, std::uint64_t seed) {
  testing::randomize(p.mda.attn, seed);
  testing::fill_randn(p.ln1.gamma, seed + 100, 0.3);
  testing::fill_randn(p.ln2.beta, seed + 101, 0.3);
  testing::fill_randn(p.mlp.w1, seed + 102, 0.4);
  testing::fill_randn(p.mlp.b1, seed + 103, 0.4);
  testing::fill_randn(p.mlp.w2, seed + 104, 0.4);
  if (p.mda.wf.defined()) testing::fill_randn(p.mda.wf, seed + 105, 0.3);
}

OmniBlockParams<double> omni(std::size_t c, std::size_t heads, std::size_t m, const FuseMode& fuse,
                             std::uint64_t seed) {
  Rng rng(seed);
  auto p = make_omni_block<double>(c, heads, m, true, fuse, 4, rng);
  scramble(p, seed);
  return p;
}

SwinBlockParams<double> as_swin(const OmniBlockParams<double>& p) {
  return {p.ln1, p.mda.attn, p.ln2, p.mlp};
}

ViewPair<double> pair_of(Shape s, std::uint64_t seed, double scale = 1.0, bool grad = false) {
  return {FeatureMap<double>(randn(s, seed, scale, grad)),
          FeatureMap<double>(randn(s, seed + 1, scale, grad))};
}

std::vector<NamedTensor> block_params(const std::string& tag, const OmniBlockParams<double>& p) {
  std::vector<NamedTensor> out{
      {tag + ".ln1.gamma", p.ln1.gamma}, {tag + ".ln1.beta", p.ln1.beta},
      {tag + ".wq", p.mda.attn.wq},      {tag + ".bq", p.mda.attn.bq},
      {tag + ".wk", p.mda.attn.wk},      {tag + ".bk", p.mda.attn.bk},
      {tag + ".wv", p.mda.attn.wv},      {tag + ".bv", p.mda.attn.bv},
      {tag + ".wo", p.mda.attn.wo},      {tag + ".bo", p.mda.attn.bo},
      {tag + ".ln2.gamma", p.ln2.gamma}, {tag + ".ln2.beta", p.ln2.beta},
      {tag + ".w1", p.mlp.w1},           {tag + ".b1", p.mlp.b1},
      {tag + ".w2", p.mlp.w2},           {tag + ".b2", p.mlp.b2}};
  if (p.mda.attn.rel_bias.defined()) out.emplace_back(tag + ".table", p.mda.attn.rel_bias);
  if (p.mda.wf.defined()) out.emplace_back(tag + ".wf", p.mda.wf);
  return out;
}

}  // namespace

TEST_SUITE("blocks") {

TEST_CASE("zeroed output projections make every block the identity, bitwise") {
  for (const auto& fuse : {FuseMode{Concatenation{}}, FuseMode{WeightedAddition{0.9, 0.1}}}) {
    auto p1 = omni(8, 2, 2, fuse, 1);
    auto p2 = omni(8, 2, 2, fuse, 2);
    for (auto* p : {&p1, &p2}) {
      zero(p->mda.attn.wo);
      zero(p->mda.attn.bo);
      zero(p->mlp.w2);
      zero(p->mlp.b2);
    }
    const auto in = pair_of({2, 4, 4, 8}, 3);
    const auto out = omni_block_pair(in, p1, p2, 2);
    CHECK(testing::bitwise_equal(out.cc.values, in.cc.values));
    CHECK(testing::bitwise_equal(out.mlo.values, in.mlo.values));
    const auto single = swin_block(in.cc, as_swin(p1), as_swin(p2), 2);
    CHECK(testing::bitwise_equal(single.values, in.cc.values));
  }
}

TEST_CASE("identical views with shared parameters stay identical") {
  const auto p1 = omni(8, 2, 2, Concatenation{}, 4);
  const auto p2 = omni(8, 2, 2, Concatenation{}, 5);
  const FeatureMap<double> x(randn({1, 4, 4, 8}, 6));
  const auto out = omni_block_pair(ViewPair<double>{x, x}, p1, p2, 2);
  CHECK(testing::bitwise_equal(out.cc.values, out.mlo.values));
}

TEST_CASE("block output shape equals input shape") {
  const auto p1 = omni(8, 2, 2, Concatenation{}, 7);
  const auto p2 = omni(8, 2, 2, Concatenation{}, 8);
  const auto in = pair_of({3, 8, 8, 8}, 9);
  const auto out = omni_block_pair(in, p1, p2, 2);
  CHECK(out.cc.values.shape() == in.cc.values.shape());
  CHECK(out.mlo.values.shape() == in.mlo.values.shape());
  CHECK(swin_block(in.cc, as_swin(p1), as_swin(p2), 2).values.shape() == in.cc.values.shape());
}

TEST_CASE("swin_block equals the dual block restricted to one view with w_cross = 0") {
  for (std::size_t grid : {4u, 8u}) {
    const auto p1 = omni(8, 2, 2, WeightedAddition{1.0, 0.0}, 10 + grid);
    const auto p2 = omni(8, 2, 2, WeightedAddition{1.0, 0.0}, 20 + grid);
    const auto in = pair_of({2, grid, grid, 8}, 30);
    const auto dual = omni_block_pair(in, p1, p2, 2);
    const auto single = swin_block(in.cc, as_swin(p1), as_swin(p2), 2);
    CHECK(testing::max_abs_diff(dual.cc.values, single.values) < 1e-12);
    const auto single_mlo = swin_block(in.mlo, as_swin(p1), as_swin(p2), 2);
    CHECK(testing::max_abs_diff(dual.mlo.values, single_mlo.values) < 1e-12);
  }
}

TEST_CASE("with zero shift both sub-blocks compute the same map") {
  const auto p = as_swin(omni(8, 2, 2, WeightedAddition{1.0, 0.0}, 40));
  const FeatureMap<double> x(randn({1, 4, 4, 8}, 41));
  const auto twice = swin_block(x, p, p, 2, 0);
  const auto geo = WindowGeometry::regular(2);
  const auto once = self_block(x, p.ln1, p.attn, p.ln2, p.mlp, geo);
  const auto manual = self_block(once, p.ln1, p.attn, p.ln2, p.mlp, geo);
  CHECK(testing::bitwise_equal(twice.values, manual.values));
}

TEST_CASE("pre-norm keeps large inputs finite") {
  Rng rng(50);
  const auto p1 = make_omni_block<double>(8, 2, 2, true, Concatenation{}, 4, rng);
  const auto p2 = make_omni_block<double>(8, 2, 2, true, Concatenation{}, 4, rng);
  const auto in = pair_of({1, 4, 4, 8}, 51, 1e3, true);
  Tape<double> tape;
  Recording<double> rec(tape);
  const auto out = omni_block_pair(in, p1, p2, 2);
  for (auto v : out.cc.values.data()) CHECK(std::isfinite(v));
  tape.backward(ops::add(ops::sum(out.cc.values), ops::sum(ops::mul(out.mlo.values, out.mlo.values))));
  for (const auto& [name, t] : block_params("b", p1)) {
    CAPTURE(name);
    REQUIRE(t.has_grad());
    for (auto g : t.grad()) CHECK(std::isfinite(g));
  }
  for (auto g : in.cc.values.grad()) CHECK(std::isfinite(g));
}

TEST_CASE("patch_merge shape and constant input") {
  Rng rng(60);
  auto p = make_patch_merge<double>(3, rng);
  const FeatureMap<double> x(randn({2, 4, 4, 3}, 61));
  const auto y = patch_merge(x, p);
  CHECK(y.values.shape() == Shape{2, 2, 2, 6});

  // A spatially constant map merges to a spatially constant map; with an
  // averaging W and unit gamma each output is the mean of the normalized
  // 4C vector, i.e. beta's mean.
  std::vector<double> v;
  for (std::size_t t = 0; t < 16; ++t)
    for (double c : {1.0, -2.0, 4.0}) v.push_back(c);
  testing::fill_randn(p.norm.beta, 62, 1.0);
  for (auto& w : p.w.mutable_data()) w = 1.0 / 12.0;
  const auto z = patch_merge(FeatureMap<double>(TensorD({1, 4, 4, 3}, v)), p);
  double beta_mean = 0;
  for (auto b : p.norm.beta.data()) beta_mean += b / 12.0;
  for (auto o : z.values.data()) CHECK(std::abs(o - beta_mean) < 1e-12);

  CHECK_THROWS_AS(patch_merge(FeatureMap<double>(randn({1, 3, 4, 3}, 63)), p), ConfigError);
  CHECK_THROWS_AS(patch_merge(FeatureMap<double>(randn({1, 4, 5, 3}, 63)), p), ConfigError);
}

TEST_CASE("omni block pair gradients match finite differences") {
  for (const auto& fuse : {FuseMode{Concatenation{}}, FuseMode{WeightedAddition{0.9, 0.1}}}) {
    const auto p1 = omni(4, 2, 2, fuse, 70);
    const auto p2 = omni(4, 2, 2, fuse, 71);
    const auto in = pair_of({1, 4, 4, 4}, 72, 1.0, true);
    const auto proj = randn({1, 4, 4, 4}, 74);
    auto params = block_params("p1", p1);
    for (auto& np : block_params("p2", p2)) params.push_back(np);
    params.emplace_back("cc", in.cc.values);
    params.emplace_back("mlo", in.mlo.values);
    auto f = [&] {
      const auto out = omni_block_pair(in, p1, p2, 2);
      return ops::add(ops::sum(ops::mul(out.cc.values, proj)),
                      ops::sum(ops::mul(ops::mul(out.mlo.values, proj), proj)));
    };
    const auto r = grad_check(f, params, 1e-5, 400, 1);
    CAPTURE(r.worst_param);
    CHECK(r.probes >= 100);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("patch_merge and swin_block gradients match finite differences") {
  Rng rng(80);
  auto pm = make_patch_merge<double>(4, rng);
  testing::fill_randn(pm.norm.gamma, 81, 0.5);
  const auto s1 = as_swin(omni(8, 2, 2, WeightedAddition{1.0, 0.0}, 82));
  const auto s2 = as_swin(omni(8, 2, 2, WeightedAddition{1.0, 0.0}, 83));
  auto x = randn({1, 8, 8, 4}, 84, 1.0, true);
  const auto proj = randn({1, 4, 4, 8}, 85);
  std::vector<NamedTensor> params{{"x", x}, {"gamma", pm.norm.gamma}, {"beta", pm.norm.beta}, {"w", pm.w},
                                  {"wq", s1.attn.wq}, {"w1", s2.mlp.w1}, {"table", s2.attn.rel_bias}};
  auto f = [&] {
    const auto y = swin_block(patch_merge(FeatureMap<double>(x), pm), s1, s2, 2);
    return ops::sum(ops::mul(y.values, proj));
  };
  const auto r = grad_check(f, params, 1e-5, 300, 2);
  CHECK(r.probes >= 100);
  CHECK(r.max_rel_error < 1e-4);
}

}  // TEST_SUITE
