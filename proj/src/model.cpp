#include "mvswin/model.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mvswin/io.hpp"
#include "mvswin/ops.hpp"

namespace mvswin {

ModelConfig ModelConfig::tiny(std::size_t image_size, int fusion_stage, FuseMode fuse) {
  ModelConfig cfg;
  cfg.image_size = image_size;
  cfg.window = image_size / 32;
  cfg.fusion_stage = fusion_stage;
  cfg.fuse_mode = fuse;
  return cfg;
}

ModelConfig ModelConfig::toy() {
  ModelConfig cfg;
  cfg.image_size = 8;
  cfg.patch = 1;
  cfg.window = 2;
  cfg.stem_dim = 8;
  cfg.depths = {2, 2, 2, 2};
  cfg.heads = {2, 2, 2, 2};
  cfg.rel_bias = false;
  return cfg;
}

std::vector<StageGeometry> ModelConfig::stages() const {
  std::vector<StageGeometry> out;
  std::size_t side = grid();
  std::size_t channels = stem_dim;
  for (std::size_t s = 0; s < 4; ++s) {
    StageGeometry g;
    g.grid = side;
    g.channels = channels;
    g.heads = heads[s];
    g.depth = depths[s];
    g.window = std::min(window, side);
    g.shift = side <= window ? 0 : g.window / 2;
    g.dual = static_cast<int>(s) < fusion_stage;
    out.push_back(g);
    side /= 2;
    channels *= 2;
  }
  return out;
}

std::vector<std::string> ModelConfig::violations() const {
  std::vector<std::string> v;
  auto fail = [&v](std::string msg) { v.push_back(std::move(msg)); };
  if (image_size == 0) fail("image_size must be positive");
  if (in_channels == 0) fail("in_channels must be positive");
  if (patch == 0) fail("patch must be positive");
  if (window == 0) fail("window must be positive");
  if (stem_dim == 0) fail("stem_dim must be positive");
  if (mlp_ratio == 0) fail("mlp_ratio must be positive");
  if (fusion_stage < 2 || fusion_stage > 4) {
    fail("fusion_stage must be 2, 3 or 4, got " + std::to_string(fusion_stage));
  }
  try {
    validate_fuse_mode(fuse_mode);
  } catch (const ConfigError& e) {
    fail(std::string("fuse_mode: ") + e.what());
  }
  if (!v.empty()) return v;
  if (image_size % patch != 0) {
    fail("image_size " + std::to_string(image_size) + " is not divisible by patch " +
         std::to_string(patch));
    return v;
  }
  if (grid() % 8 != 0) {
    fail("token grid " + std::to_string(grid()) + " must be divisible by 8 for three merges");
    return v;
  }
  const auto geo = stages();
  for (std::size_t s = 0; s < 4; ++s) {
    const auto& g = geo[s];
    const std::string stage = "stage " + std::to_string(s + 1) + ": ";
    if (g.depth == 0 || g.depth % 2 != 0) {
      fail(stage + "depth " + std::to_string(g.depth) + " must be a positive even count");
    }
    if (g.heads == 0 || g.channels % g.heads != 0) {
      fail(stage + std::to_string(g.heads) + " heads do not divide " +
           std::to_string(g.channels) + " channels");
    }
    if (g.grid % g.window != 0) {
      fail(stage + "grid " + std::to_string(g.grid) + " is not divisible by window " +
           std::to_string(g.window));
    }
  }
  return v;
}

void ModelConfig::validate() const {
  const auto v = violations();
  if (v.empty()) return;
  std::string msg = "invalid model config:";
  for (const auto& s : v) msg += "\n  - " + s;
  throw ConfigError(msg);
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> Model<T>::named_parameters() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  auto add = [&out](const std::string& name, const Tensor<T>& t) {
    if (t.defined()) out.emplace_back(name, t);
  };
  auto add_ln = [&](const std::string& prefix, const LayerNormParams<T>& p) {
    add(prefix + ".gamma", p.gamma);
    add(prefix + ".beta", p.beta);
  };
  auto add_attn = [&](const std::string& prefix, const AttentionParams<T>& p) {
    add(prefix + ".wq", p.wq);
    add(prefix + ".bq", p.bq);
    add(prefix + ".wk", p.wk);
    add(prefix + ".bk", p.bk);
    add(prefix + ".wv", p.wv);
    add(prefix + ".bv", p.bv);
    add(prefix + ".wo", p.wo);
    add(prefix + ".bo", p.bo);
    add(prefix + ".rel_bias", p.rel_bias);
  };
  auto add_mlp = [&](const std::string& prefix, const MlpParams<T>& p) {
    add(prefix + ".w1", p.w1);
    add(prefix + ".b1", p.b1);
    add(prefix + ".w2", p.w2);
    add(prefix + ".b2", p.b2);
  };
  auto add_merge = [&](const std::string& prefix, const PatchMergeParams<T>& p) {
    add_ln(prefix + ".norm", p.norm);
    add(prefix + ".w", p.w);
  };
  auto add_stream = [&](const std::string& prefix, const ViewStream<T>& s) {
    add(prefix + ".embed.w", s.embed_w);
    add(prefix + ".embed.b", s.embed_b);
    for (std::size_t st = 0; st < s.stages.size(); ++st) {
      const std::string sp = prefix + ".stage" + std::to_string(st + 1);
      if (st > 0) add_merge(sp + ".merge", s.merges[st - 1]);
      for (std::size_t b = 0; b < s.stages[st].size(); ++b) {
        const auto& blk = s.stages[st][b];
        const std::string bp = sp + ".block" + std::to_string(b);
        add_ln(bp + ".ln1", blk.ln1);
        add_attn(bp + ".attn", blk.mda.attn);
        add(bp + ".attn.wf", blk.mda.wf);
        add_ln(bp + ".ln2", blk.ln2);
        add_mlp(bp + ".mlp", blk.mlp);
      }
    }
  };
  if (config.view_weights == ViewWeights::Shared) {
    add_stream("views", cc);
  } else {
    add_stream("cc", cc);
    add_stream("mlo", mlo);
  }
  add("fusion.w", fusion_w);
  add("fusion.b", fusion_b);
  const std::size_t first_single = static_cast<std::size_t>(config.fusion_stage);
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const std::string sp = "stage" + std::to_string(first_single + i + 1);
    add_merge(sp + ".merge", merges[i]);
    for (std::size_t b = 0; b < stages[i].size(); ++b) {
      const auto& blk = stages[i][b];
      const std::string bp = sp + ".block" + std::to_string(b);
      add_ln(bp + ".ln1", blk.ln1);
      add_attn(bp + ".attn", blk.attn);
      add_ln(bp + ".ln2", blk.ln2);
      add_mlp(bp + ".mlp", blk.mlp);
    }
  }
  add("head.w", head_w);
  add("head.b", head_b);
  return out;
}

namespace {

template <typename T>
ViewStream<T> build_stream(const ModelConfig& cfg, const std::vector<StageGeometry>& geo,
                           Rng& rng) {
  ViewStream<T> s;
  s.embed_w = trunc_normal<T>({cfg.patch * cfg.patch * cfg.in_channels, cfg.stem_dim}, 0.02, rng);
  s.embed_b = Tensor<T>::zeros({cfg.stem_dim}, true);
  for (std::size_t st = 0; st < geo.size() && geo[st].dual; ++st) {
    if (st > 0) s.merges.push_back(make_patch_merge<T>(geo[st - 1].channels, rng));
    std::vector<OmniBlockParams<T>> blocks;
    for (std::size_t b = 0; b < geo[st].depth; ++b) {
      blocks.push_back(make_omni_block<T>(geo[st].channels, geo[st].heads, geo[st].window,
                                          cfg.rel_bias, cfg.fuse_mode, cfg.mlp_ratio, rng));
    }
    s.stages.push_back(std::move(blocks));
  }
  return s;
}

template <typename T>
Tensor<T> head_logits(const Model<T>& m, const FeatureMap<T>& fm) {
  const std::size_t b = fm.batch();
  const std::size_t tokens = fm.height() * fm.width();
  const std::size_t c = fm.channels();
  auto pooled = ops::mean_axis(ops::reshape(fm.values, Shape{b, tokens, c}), 1);
  return ops::reshape(ops::affine(pooled, m.head_w, m.head_b), Shape{b});
}

template <typename T>
void check_image(const ModelConfig& cfg, const Tensor<T>& image, const char* which) {
  const Shape want{cfg.image_size, cfg.image_size, cfg.in_channels};
  if (!image.defined() || image.ndim() != 4 ||
      !std::equal(want.begin(), want.end(), image.shape().begin() + 1)) {
    throw ContractError(std::string(which) + " input must be [B, " +
                        std::to_string(cfg.image_size) + ", " + std::to_string(cfg.image_size) +
                        ", " + std::to_string(cfg.in_channels) + "], got " +
                        (image.defined() ? shape_str(image.shape()) : std::string("<undefined>")));
  }
  for (auto v : image.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string(which) + " input holds NaN/Inf");
  }
}

// Prefixes numeric failures with the layer that produced them.
template <typename F>
auto in_layer(const std::string& layer, F&& fn) {
  try {
    return fn();
  } catch (const NumericError& e) {
    throw NumericError(layer + ": " + e.what());
  }
}

template <typename T>
FeatureMap<T> run_single_stages(const Model<T>& m, FeatureMap<T> x) {
  const auto geo = m.config.stages();
  const std::size_t first = static_cast<std::size_t>(m.config.fusion_stage);
  for (std::size_t i = 0; i < m.stages.size(); ++i) {
    const auto& g = geo[first + i];
    const std::string name = "stage" + std::to_string(first + i + 1);
    x = in_layer(name + ".merge", [&] { return patch_merge(x, m.merges[i]); });
    for (std::size_t b = 0; b + 1 < m.stages[i].size(); b += 2) {
      x = in_layer(name + ".block" + std::to_string(b), [&] {
        return swin_block(x, m.stages[i][b], m.stages[i][b + 1], g.window, g.shift);
      });
    }
  }
  return x;
}

}  // namespace

template <typename T>
Model<T> build_model(const ModelConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const auto geo = cfg.stages();
  Model<T> m;
  m.config = cfg;
  m.cc = build_stream<T>(cfg, geo, rng);
  m.mlo = cfg.view_weights == ViewWeights::Shared ? m.cc : build_stream<T>(cfg, geo, rng);
  const auto& fused = geo[static_cast<std::size_t>(cfg.fusion_stage) - 1];
  m.fusion_w = trunc_normal<T>({2 * fused.channels, fused.channels}, 0.02, rng);
  m.fusion_b = Tensor<T>::zeros({fused.channels}, true);
  for (std::size_t st = static_cast<std::size_t>(cfg.fusion_stage); st < geo.size(); ++st) {
    m.merges.push_back(make_patch_merge<T>(geo[st - 1].channels, rng));
    std::vector<SwinBlockParams<T>> blocks;
    for (std::size_t b = 0; b < geo[st].depth; ++b) {
      blocks.push_back(make_swin_block<T>(geo[st].channels, geo[st].heads, geo[st].window,
                                          cfg.rel_bias, cfg.mlp_ratio, rng));
    }
    m.stages.push_back(std::move(blocks));
  }
  m.head_w = trunc_normal<T>({geo.back().channels, 1}, 0.02, rng);
  m.head_b = Tensor<T>::zeros({1}, true);
  return m;
}

template <typename T>
FeatureMap<T> fuse_views(const ViewPair<T>& pair, const Tensor<T>& w, const Tensor<T>& b) {
  if (pair.cc.values.shape() != pair.mlo.values.shape()) {
    throw ContractError("fuse_views: view shapes differ: " + shape_str(pair.cc.values.shape()) +
                        " vs " + shape_str(pair.mlo.values.shape()));
  }
  const std::size_t c = pair.cc.channels();
  if (w.shape() != Shape{2 * c, c}) {
    throw DimensionError("fuse_views: weight must be " + shape_str(Shape{2 * c, c}) + ", got " +
                         shape_str(w.shape()));
  }
  return FeatureMap<T>(ops::affine(ops::concat_last(pair.cc.values, pair.mlo.values), w, b));
}

template <typename T>
Tensor<T> forward_pair(const Model<T>& m, const Tensor<T>& cc, const Tensor<T>& mlo) {
  const auto& cfg = m.config;
  check_image(cfg, cc, "CC");
  check_image(cfg, mlo, "MLO");
  if (cc.dim(0) != mlo.dim(0)) {
    throw ContractError("CC and MLO batches differ: " + shape_str(cc.shape()) + " vs " +
                        shape_str(mlo.shape()));
  }
  const auto geo = cfg.stages();
  ViewPair<T> pair = in_layer("embed", [&] {
    return ViewPair<T>{patch_embed(cc, cfg.patch, m.cc.embed_w, m.cc.embed_b),
                       patch_embed(mlo, cfg.patch, m.mlo.embed_w, m.mlo.embed_b)};
  });
  for (std::size_t st = 0; st < m.cc.stages.size(); ++st) {
    const auto& g = geo[st];
    const std::string name = "stage" + std::to_string(st + 1);
    if (st > 0) {
      pair = in_layer(name + ".merge", [&] {
        return ViewPair<T>{patch_merge(pair.cc, m.cc.merges[st - 1]),
                           patch_merge(pair.mlo, m.mlo.merges[st - 1])};
      });
    }
    const auto& bc = m.cc.stages[st];
    const auto& bm = m.mlo.stages[st];
    for (std::size_t b = 0; b + 1 < bc.size(); b += 2) {
      pair = in_layer(name + ".block" + std::to_string(b), [&] {
        return omni_block_pair(pair, bc[b], bm[b], bc[b + 1], bm[b + 1], g.window, g.shift);
      });
    }
  }
  auto x = in_layer("fusion", [&] { return fuse_views(pair, m.fusion_w, m.fusion_b); });
  x = run_single_stages(m, std::move(x));
  return in_layer("head", [&] { return head_logits(m, x); });
}

template <typename T>
Tensor<T> forward_single(const Model<T>& m, const Tensor<T>& view) {
  const auto& cfg = m.config;
  check_image(cfg, view, "view");
  const auto geo = cfg.stages();
  auto x = in_layer("embed", [&] { return patch_embed(view, cfg.patch, m.cc.embed_w, m.cc.embed_b); });
  for (std::size_t st = 0; st < m.cc.stages.size(); ++st) {
    const auto& g = geo[st];
    const std::string name = "stage" + std::to_string(st + 1);
    if (st > 0) x = in_layer(name + ".merge", [&] { return patch_merge(x, m.cc.merges[st - 1]); });
    const auto& blocks = m.cc.stages[st];
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const WindowGeometry wg{g.window, b % 2 == 0 ? 0 : g.shift};
      x = in_layer(name + ".block" + std::to_string(b), [&] {
        const auto& p = blocks[b];
        return self_block(x, p.ln1, p.mda.attn, p.ln2, p.mlp, wg);
      });
    }
  }
  x = run_single_stages(m, std::move(x));
  return in_layer("head", [&] { return head_logits(m, x); });
}

template <typename T>
std::size_t count_params(const Model<T>& m) {
  std::size_t total = 0;
  for (const auto& [name, t] : m.named_parameters()) total += t.numel();
  return total;
}

template <typename T>
void save_checkpoint(const Model<T>& m, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
  nlohmann::json manifest;
  manifest["format"] = "mvswin-checkpoint";
  manifest["version"] = 1;
  manifest["dtype"] = io::dtype_of<T>() == io::DType::F32 ? "f32" : "f64";
  auto& list = manifest["parameters"] = nlohmann::json::array();
  for (const auto& [name, t] : m.named_parameters()) {
    const std::string file = name + ".mvst";
    io::write_tensor(dir / file, t);
    list.push_back({{"name", name}, {"shape", t.shape()}, {"file", file}});
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
}

template <typename T>
void load_checkpoint(Model<T>& m, const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open " + manifest_path.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  if (!manifest.is_object() || manifest.value("format", "") != "mvswin-checkpoint" ||
      !manifest.contains("parameters") || !manifest["parameters"].is_array()) {
    throw IoError("malformed manifest " + manifest_path.string());
  }
  std::map<std::string, std::pair<Shape, std::string>> entries;
  try {
    for (const auto& e : manifest["parameters"]) {
      entries[e.at("name").get<std::string>()] = {e.at("shape").get<Shape>(),
                                                   e.at("file").get<std::string>()};
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest entry in " + manifest_path.string() + ": " + e.what());
  }
  auto params = m.named_parameters();
  std::set<std::string> expected;
  for (auto& [name, t] : params) {
    expected.insert(name);
    auto it = entries.find(name);
    if (it == entries.end()) throw ConfigError("checkpoint is missing parameter " + name);
    if (it->second.first != t.shape()) {
      throw ConfigError("checkpoint parameter " + name + " has shape " +
                        shape_str(it->second.first) + ", model expects " + shape_str(t.shape()));
    }
  }
  for (const auto& [name, entry] : entries) {
    if (!expected.count(name)) throw ConfigError("checkpoint has unexpected parameter " + name);
  }
  for (auto& [name, t] : params) {
    const auto loaded = io::read_tensor<T>(dir / entries[name].second);
    if (loaded.shape() != t.shape()) {
      throw ConfigError("checkpoint file for " + name + " holds shape " +
                        shape_str(loaded.shape()) + ", model expects " + shape_str(t.shape()));
    }
    std::copy(loaded.data().begin(), loaded.data().end(), t.mutable_data().begin());
  }
}

#define MVSWIN_INSTANTIATE(T)                                                                   \
  template struct Model<T>;                                                                     \
  template Model<T> build_model<T>(const ModelConfig&);                                         \
  template FeatureMap<T> fuse_views(const ViewPair<T>&, const Tensor<T>&, const Tensor<T>&);   \
  template Tensor<T> forward_pair(const Model<T>&, const Tensor<T>&, const Tensor<T>&);        \
  template Tensor<T> forward_single(const Model<T>&, const Tensor<T>&);                        \
  template std::size_t count_params(const Model<T>&);                                           \
  template void save_checkpoint(const Model<T>&, const std::filesystem::path&);                 \
  template void load_checkpoint(Model<T>&, const std::filesystem::path&);

MVSWIN_INSTANTIATE(float)
MVSWIN_INSTANTIATE(double)

#undef MVSWIN_INSTANTIATE

}  // namespace mvswin
