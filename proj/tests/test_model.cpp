#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "json.hpp"
#include "mvswin/diagnostics.hpp"
#include "mvswin/model.hpp"
#include "mvswin/ops.hpp"
#include "support.hpp"

using namespace mvswin;
using testing::randn;
using testing::TensorD;
namespace fs = std::filesystem;

namespace {

oracle::CountInputs count_inputs(const ModelConfig& c) {
  oracle::CountInputs s{};
  s.image = c.image_size;
  s.patch = c.patch;
  s.in_ch = c.in_channels;
  s.dim = c.stem_dim;
  s.window = c.window;
  s.mlp_ratio = c.mlp_ratio;
  s.depths = c.depths;
  s.heads = c.heads;
  s.fusion_stage = c.fusion_stage;
  s.concat = std::holds_alternative<Concatenation>(c.fuse_mode);
  s.rel_bias = c.rel_bias;
  s.separate_views = c.view_weights == ViewWeights::Separate;
  return s;
}

// [top; bottom] with top = a*I and bottom = b*I, each [C, C].
TensorD stacked_identity(std::size_t c, double a, double b) {
  TensorD w = TensorD::zeros({2 * c, c});
  for (std::size_t i = 0; i < c; ++i) {
    w.mutable_data()[i * c + i] = a;
    w.mutable_data()[(c + i) * c + i] = b;
  }
  return w;
}

void set_fusion(Model<double>& m, double a, double b) {
  const std::size_t c = m.fusion_w.dim(1);
  const auto w = stacked_identity(c, a, b);
  std::copy(w.data().begin(), w.data().end(), m.fusion_w.mutable_data().begin());
  for (auto& v : m.fusion_b.mutable_data()) v = 0.0;
}

// Give every parameter non-trivial values so the equivalences are not
// satisfied by accident (e.g. zero tables, unit gammas).
void perturb_all(Model<double>& m, std::uint64_t seed) {
  for (auto& [name, t] : m.named_parameters()) {
    if (name.rfind("fusion.", 0) == 0) continue;
    auto data = t.mutable_data();
    Rng rng(seed++);
    const auto noise = normal<double>({t.numel()}, 0.0, 0.05, rng);
    for (std::size_t i = 0; i < data.size(); ++i) data[i] += noise.at(i);
  }
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("mvswin_test_" + name);
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("toy forward returns one finite logit per example") {
  const auto m = build_model<double>(ModelConfig::toy());
  const auto out = forward_pair(m, randn({3, 8, 8, 1}, 1), randn({3, 8, 8, 1}, 2));
  REQUIRE(out.shape() == Shape{3});
  for (auto z : out.data()) {
    CHECK(std::isfinite(z));
    CHECK(std::abs(z) < 1e3);
  }
  CHECK(forward_single(m, randn({2, 8, 8, 1}, 3)).shape() == Shape{2});
}

TEST_CASE("initialization is deterministic under a fixed seed") {
  auto cfg = ModelConfig::toy();
  cfg.rel_bias = true;
  const auto a = build_model<double>(cfg);
  const auto b = build_model<double>(cfg);
  const auto pa = a.named_parameters(), pb = b.named_parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].first == pb[i].first);
    CHECK(testing::bitwise_equal(pa[i].second, pb[i].second));
  }
  cfg.seed = 99;
  const auto c = build_model<double>(cfg);
  CHECK_FALSE(testing::bitwise_equal(pa.front().second, c.named_parameters().front().second));

  const auto x = randn({2, 8, 8, 1}, 4);
  CHECK(testing::bitwise_equal(forward_single(a, x), forward_single(b, x)));
}

TEST_CASE("parameter count matches the closed form") {
  std::vector<ModelConfig> cfgs;
  for (int fusion : {2, 3, 4})
    for (bool concat : {true, false})
      for (bool separate : {false, true}) {
        auto c = ModelConfig::toy();
        c.fusion_stage = fusion;
        c.rel_bias = fusion != 3;
        c.fuse_mode = concat ? FuseMode{Concatenation{}} : FuseMode{WeightedAddition{0.9, 0.1}};
        c.view_weights = separate ? ViewWeights::Separate : ViewWeights::Shared;
        cfgs.push_back(c);
      }
  auto wide = ModelConfig::toy();
  wide.image_size = 32;
  wide.patch = 2;
  wide.window = 4;
  wide.mlp_ratio = 3;
  cfgs.push_back(wide);
  for (const auto& c : cfgs) {
    CAPTURE(c.fusion_stage);
    CHECK(count_params(build_model<float>(c)) == oracle::param_count(count_inputs(c)));
  }
}

TEST_CASE("tiny-variant parameter counts follow the fusion-stage and image-size ordering") {
  std::size_t counts[3];
  for (int f = 2; f <= 4; ++f) {
    const auto cfg = ModelConfig::tiny(224, f);
    counts[f - 2] = count_params(build_model<float>(cfg));
    CHECK(counts[f - 2] == oracle::param_count(count_inputs(cfg)));
  }
  CHECK(counts[0] < counts[1]);
  CHECK(counts[1] < counts[2]);
  const auto big = ModelConfig::tiny(384, 2);
  CHECK(big.window == 12);
  CHECK(oracle::param_count(count_inputs(big)) > counts[0]);
  CHECK(count_params(build_model<float>(big)) == oracle::param_count(count_inputs(big)));
}

TEST_CASE("fuse_views selects, averages and keeps the shape") {
  const ViewPair<double> pair{FeatureMap<double>(randn({2, 4, 4, 6}, 10)),
                              FeatureMap<double>(randn({2, 4, 4, 6}, 11))};
  const auto zero_b = TensorD::zeros({6});
  const auto sel = fuse_views(pair, stacked_identity(6, 1.0, 0.0), zero_b);
  CHECK(testing::bitwise_equal(sel.values, pair.cc.values));
  const auto mean = fuse_views(pair, stacked_identity(6, 0.5, 0.5), zero_b);
  for (std::size_t i = 0; i < mean.values.numel(); ++i)
    CHECK(std::abs(mean.values.at(i) - 0.5 * (pair.cc.values.at(i) + pair.mlo.values.at(i))) < 1e-15);

  const ViewPair<double> big{FeatureMap<double>(randn({1, 14, 14, 192}, 12)),
                             FeatureMap<double>(randn({1, 14, 14, 192}, 13))};
  Rng rng(14);
  const auto out = fuse_views(big, normal<double>({384, 192}, 0.0, 0.02, rng), TensorD::zeros({192}));
  CHECK(out.values.shape() == Shape{1, 14, 14, 192});

  const ViewPair<double> bad{pair.cc, FeatureMap<double>(randn({2, 2, 2, 6}, 15))};
  CHECK_THROWS_AS(fuse_views(bad, stacked_identity(6, 1.0, 0.0), zero_b), ContractError);
}

TEST_CASE("duplicate views with mean fusion collapse to the single-stream forward") {
  for (int fusion : {2, 3}) {
    auto cfg = ModelConfig::toy();
    cfg.fusion_stage = fusion;
    cfg.rel_bias = true;
    cfg.fuse_mode = WeightedAddition{0.9, 0.1};
    auto m = build_model<double>(cfg);
    perturb_all(m, 20);
    set_fusion(m, 0.5, 0.5);
    const auto x = randn({2, 8, 8, 1}, 21);
    CHECK(testing::max_abs_diff(forward_pair(m, x, x), forward_single(m, x)) < 1e-10);
  }
}

TEST_CASE("forward_single equals forward_pair with w_cross = 0 selecting CC") {
  auto cfg = ModelConfig::toy();
  cfg.rel_bias = true;
  cfg.fuse_mode = WeightedAddition{1.0, 0.0};
  auto m = build_model<double>(cfg);
  perturb_all(m, 30);
  set_fusion(m, 1.0, 0.0);
  const auto cc = randn({2, 8, 8, 1}, 31);
  const auto mlo = randn({2, 8, 8, 1}, 32);
  const auto pair_logits = forward_pair(m, cc, mlo);
  CHECK(testing::max_abs_diff(pair_logits, forward_single(m, cc)) < 1e-10);
  // cross-isolation: a large MLO perturbation leaves the logit unchanged
  const auto moved = forward_pair(m, cc, randn({2, 8, 8, 1}, 33, 20.0));
  CHECK(testing::max_abs_diff(pair_logits, moved) < 1e-12);
}

TEST_CASE("the MLO view does influence the default model") {
  auto m = build_model<double>(ModelConfig::toy());
  perturb_all(m, 40);
  const auto cc = randn({1, 8, 8, 1}, 41);
  const auto a = forward_pair(m, cc, randn({1, 8, 8, 1}, 42));
  const auto b = forward_pair(m, cc, randn({1, 8, 8, 1}, 43));
  CHECK(testing::max_abs_diff(a, b) > 1e-6);
}

TEST_CASE("every parameter receives a finite gradient") {
  for (auto weights : {ViewWeights::Shared, ViewWeights::Separate}) {
    auto cfg = ModelConfig::toy();
    cfg.rel_bias = true;
    cfg.view_weights = weights;
    auto m = build_model<double>(cfg);
    Tape<double> tape;
    Recording<double> rec(tape);
    const auto logits = forward_pair(m, randn({2, 8, 8, 1}, 50), randn({2, 8, 8, 1}, 51));
    tape.backward(ops::bce_with_logits(logits, TensorD({2}, {1.0, 0.0})));
    for (const auto& [name, t] : m.named_parameters()) {
      CAPTURE(name);
      CHECK(t.has_grad());
      for (auto g : t.grad()) CHECK(std::isfinite(g));
    }
  }
}

TEST_CASE("full-model gradients match finite differences") {
  for (auto fuse : {FuseMode{Concatenation{}}, FuseMode{WeightedAddition{0.9, 0.1}}}) {
    auto cfg = ModelConfig::toy();
    cfg.fuse_mode = fuse;
    cfg.rel_bias = true;
    for (const auto& c : gradcheck_components(cfg, 200, 3)) {
      CAPTURE(c.component);
      CAPTURE(c.report.worst_param);
      CHECK(c.report.probes >= 100);
      CHECK(c.report.max_rel_error < 1e-4);
    }
  }
}

TEST_CASE("input validation") {
  const auto m = build_model<double>(ModelConfig::toy());
  CHECK_THROWS_AS(forward_pair(m, randn({1, 8, 8, 1}, 1), randn({1, 4, 4, 1}, 2)), ContractError);
  CHECK_THROWS_AS(forward_pair(m, randn({1, 8, 8, 2}, 1), randn({1, 8, 8, 2}, 2)), ContractError);
  CHECK_THROWS_AS(forward_single(m, randn({8, 8, 1}, 1)), ContractError);
  auto bad = randn({1, 8, 8, 1}, 3);
  bad.mutable_data()[5] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(forward_pair(m, bad, bad), NumericError);
}

TEST_CASE("numeric failures name the layer") {
  auto m = build_model<double>(ModelConfig::toy());
  // Huge fused features overflow the variance in the next merge's layer norm.
  testing::fill_randn(m.fusion_w, 60, 1e300);
  const auto x = randn({1, 8, 8, 1}, 61);
  try {
    forward_pair(m, x, x);
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CAPTURE(e.what());
    CHECK(std::string(e.what()).rfind("stage3.merge", 0) == 0);
  }
}

TEST_CASE("invalid configs list every violation") {
  auto cfg = ModelConfig::toy();
  cfg.depths = {2, 3, 2, 2};
  cfg.heads = {3, 2, 2, 2};
  cfg.fusion_stage = 2;
  try {
    build_model<double>(cfg);
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("stage 2: depth 3") != std::string::npos);
    CHECK(msg.find("stage 1: 3 heads") != std::string::npos);
  }
  auto small = ModelConfig::toy();
  small.fusion_stage = 5;
  small.fuse_mode = WeightedAddition{0.5, 0.2};
  const auto v = small.violations();
  CHECK(v.size() == 2);
  auto grid = ModelConfig::toy();
  grid.image_size = 12;
  CHECK_THROWS_AS(grid.validate(), ConfigError);
}

TEST_CASE("window and shift are clipped to the grid") {
  const auto geo = ModelConfig::tiny(224).stages();
  CHECK(geo[0].grid == 56);
  CHECK(geo[0].window == 7);
  CHECK(geo[0].shift == 3);
  CHECK(geo[3].grid == 7);
  CHECK(geo[3].window == 7);
  CHECK(geo[3].shift == 0);
  CHECK(geo[1].dual);
  CHECK_FALSE(geo[2].dual);
  const auto toy = ModelConfig::toy().stages();
  CHECK(toy[2].grid == 2);
  CHECK(toy[3].window == 1);
  CHECK(toy[3].shift == 0);
}

TEST_CASE("checkpoint round trip restores the exact function") {
  auto cfg = ModelConfig::toy();
  cfg.rel_bias = true;
  auto a = build_model<double>(cfg);
  perturb_all(a, 70);
  const auto dir = scratch("roundtrip");
  save_checkpoint(a, dir);
  CHECK(fs::exists(dir / "manifest.json"));
  cfg.seed = 12345;
  auto b = build_model<double>(cfg);
  load_checkpoint(b, dir);
  const auto cc = randn({2, 8, 8, 1}, 71), mlo = randn({2, 8, 8, 1}, 72);
  CHECK(testing::bitwise_equal(forward_pair(a, cc, mlo), forward_pair(b, cc, mlo)));
  fs::remove_all(dir);
}

TEST_CASE("checkpoint mismatches are reported by parameter name") {
  auto cfg = ModelConfig::toy();
  const auto m = build_model<double>(cfg);
  const auto dir = scratch("mismatch");
  save_checkpoint(m, dir);

  auto wider = cfg;
  wider.stem_dim = 16;
  auto other = build_model<double>(wider);
  try {
    load_checkpoint(other, dir);
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("views.embed.w") != std::string::npos);
  }

  auto sep = cfg;
  sep.view_weights = ViewWeights::Separate;
  auto separate = build_model<double>(sep);
  CHECK_THROWS_AS(load_checkpoint(separate, dir), ConfigError);

  // drop one entry from the manifest
  nlohmann::json manifest;
  std::ifstream(dir / "manifest.json") >> manifest;
  const std::string dropped = manifest["parameters"].back()["name"];
  manifest["parameters"].erase(manifest["parameters"].size() - 1);
  std::ofstream(dir / "manifest.json") << manifest.dump();
  auto same = build_model<double>(cfg);
  try {
    load_checkpoint(same, dir);
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find(dropped) != std::string::npos);
  }

  std::ofstream(dir / "manifest.json") << "{not json";
  CHECK_THROWS_AS(load_checkpoint(same, dir), IoError);
  CHECK_THROWS_AS(load_checkpoint(same, dir / "missing"), IoError);
  fs::remove_all(dir);
}

}  // TEST_SUITE
