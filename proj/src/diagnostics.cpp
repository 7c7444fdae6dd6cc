#include "mvswin/diagnostics.hpp"

#include "mvswin/init.hpp"
#include "mvswin/ops.hpp"

namespace mvswin {

namespace {

// Projection onto fixed random weights keeps every output coordinate in play.
Tensor<double> probe_loss(const Tensor<double>& out, const Tensor<double>& weights) {
  return ops::sum(ops::mul(out, weights));
}

void add_attention(std::vector<NamedTensor>& out, const std::string& prefix,
                   const AttentionParams<double>& p) {
  for (const auto& [name, t] : {std::pair{"wq", p.wq}, {"bq", p.bq}, {"wk", p.wk}, {"bk", p.bk},
                                {"wv", p.wv}, {"bv", p.bv}, {"wo", p.wo}, {"bo", p.bo},
                                {"rel_bias", p.rel_bias}}) {
    if (t.defined()) out.emplace_back(prefix + name, t);
  }
}

void add_omni(std::vector<NamedTensor>& out, const std::string& prefix,
              const OmniBlockParams<double>& b) {
  out.emplace_back(prefix + "ln1.gamma", b.ln1.gamma);
  out.emplace_back(prefix + "ln1.beta", b.ln1.beta);
  add_attention(out, prefix + "attn.", b.mda.attn);
  if (b.mda.wf.defined()) out.emplace_back(prefix + "attn.wf", b.mda.wf);
  out.emplace_back(prefix + "ln2.gamma", b.ln2.gamma);
  out.emplace_back(prefix + "ln2.beta", b.ln2.beta);
  out.emplace_back(prefix + "mlp.w1", b.mlp.w1);
  out.emplace_back(prefix + "mlp.b1", b.mlp.b1);
  out.emplace_back(prefix + "mlp.w2", b.mlp.w2);
  out.emplace_back(prefix + "mlp.b2", b.mlp.b2);
}

}  // namespace

std::vector<ComponentCheck> gradcheck_components(const ModelConfig& cfg, std::size_t probes,
                                                 std::uint64_t seed) {
  cfg.validate();
  const auto model = build_model<double>(cfg);
  const auto geo = cfg.stages();
  const auto& s1 = geo[0];
  const auto& blocks = model.cc.stages[0];
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);

  const Shape fm_shape{1, s1.grid, s1.grid, s1.channels};
  auto cc = normal<double>(fm_shape, 0.0, 1.0, rng);
  auto mlo = normal<double>(fm_shape, 0.0, 1.0, rng);
  auto w_fm = normal<double>(fm_shape, 0.0, 1.0, rng, false);
  const WindowGeometry shifted{s1.window, s1.shift};

  std::vector<ComponentCheck> out;

  {
    std::vector<NamedTensor> params{{"cc", cc}, {"mlo", mlo}};
    add_attention(params, "attn.", blocks[1].mda.attn);
    if (blocks[1].mda.wf.defined()) params.emplace_back("attn.wf", blocks[1].mda.wf);
    auto loss = [&] {
      const auto y = w_mda(ViewPair<double>{FeatureMap<double>(cc), FeatureMap<double>(mlo)},
                           blocks[1].mda, blocks[1].mda, shifted);
      return ops::add(probe_loss(y.cc.values, w_fm), probe_loss(y.mlo.values, w_fm));
    };
    out.push_back({"mda", grad_check(loss, params, 1e-5, probes, seed)});
  }

  {
    std::vector<NamedTensor> params{{"cc", cc}, {"mlo", mlo}};
    add_omni(params, "block0.", blocks[0]);
    add_omni(params, "block1.", blocks[1]);
    auto loss = [&] {
      const auto y = omni_block_pair(
          ViewPair<double>{FeatureMap<double>(cc), FeatureMap<double>(mlo)}, blocks[0], blocks[0],
          blocks[1], blocks[1], s1.window, s1.shift);
      return ops::add(probe_loss(y.cc.values, w_fm), probe_loss(y.mlo.values, w_fm));
    };
    out.push_back({"omni_block_pair", grad_check(loss, params, 1e-5, probes, seed)});
  }

  {
    // The first merge of whichever stream or stack owns it.
    const PatchMergeParams<double>& merge =
        model.cc.merges.empty() ? model.merges.front() : model.cc.merges.front();
    const Shape merged{1, s1.grid / 2, s1.grid / 2, 2 * s1.channels};
    auto w_merge = normal<double>(merged, 0.0, 1.0, rng, false);
    std::vector<NamedTensor> params{{"x", cc},
                                    {"norm.gamma", merge.norm.gamma},
                                    {"norm.beta", merge.norm.beta},
                                    {"w", merge.w}};
    auto loss = [&] { return probe_loss(patch_merge(FeatureMap<double>(cc), merge).values, w_merge); };
    out.push_back({"patch_merge", grad_check(loss, params, 1e-5, probes, seed)});
  }

  {
    const Shape img{2, cfg.image_size, cfg.image_size, cfg.in_channels};
    auto x_cc = normal<double>(img, 0.0, 1.0, rng, false);
    auto x_mlo = normal<double>(img, 0.0, 1.0, rng, false);
    const Tensor<double> labels({2}, {1.0, 0.0});
    std::vector<NamedTensor> params;
    for (const auto& [name, t] : model.named_parameters()) params.emplace_back(name, t);
    auto loss = [&] { return ops::bce_with_logits(forward_pair(model, x_cc, x_mlo), labels); };
    out.push_back({"model", grad_check(loss, params, 1e-5, probes, seed)});
  }
  return out;
}

}  // namespace mvswin
