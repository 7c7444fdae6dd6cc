#include "mvswin/config.hpp"

#include <fstream>
#include <set>

namespace mvswin {

namespace {

using nlohmann::json;

class Reader {
 public:
  std::vector<std::string> problems;

  // Returns the object at `path` or nullptr after noting a type problem.
  const json* section(const json& parent, const std::string& key, const std::string& path) {
    if (!parent.contains(key)) return nullptr;
    const json& v = parent.at(key);
    if (!v.is_object()) {
      fail(path, "expected an object");
      return nullptr;
    }
    return &v;
  }

  void known(const json& obj, const std::string& path, std::initializer_list<const char*> keys) {
    std::set<std::string> allowed(keys.begin(), keys.end());
    for (const auto& [k, v] : obj.items()) {
      if (!allowed.count(k)) fail(path + "." + k, "unknown key");
    }
  }

  // Parsed text stores positive integers as unsigned, built documents as signed.
  static bool non_negative_integer(const json& v) {
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0);
  }

  void count(const json& obj, const std::string& path, const char* key, std::size_t& out) {
    if (!obj.contains(key)) return;
    const json& v = obj.at(key);
    if (!non_negative_integer(v)) {
      fail(path + "." + key, "expected a non-negative integer");
      return;
    }
    out = v.get<std::size_t>();
  }

  void u64(const json& obj, const std::string& path, const char* key, std::uint64_t& out) {
    std::size_t tmp = out;
    count(obj, path, key, tmp);
    out = tmp;
  }

  void integer(const json& obj, const std::string& path, const char* key, int& out) {
    if (!obj.contains(key)) return;
    const json& v = obj.at(key);
    if (!v.is_number_integer()) {
      fail(path + "." + key, "expected an integer");
      return;
    }
    out = v.get<int>();
  }

  void number(const json& obj, const std::string& path, const char* key, double& out) {
    if (!obj.contains(key)) return;
    const json& v = obj.at(key);
    if (!v.is_number()) {
      fail(path + "." + key, "expected a number");
      return;
    }
    out = v.get<double>();
  }

  void boolean(const json& obj, const std::string& path, const char* key, bool& out) {
    if (!obj.contains(key)) return;
    const json& v = obj.at(key);
    if (!v.is_boolean()) {
      fail(path + "." + key, "expected true or false");
      return;
    }
    out = v.get<bool>();
  }

  // Returns the string value or "" after noting a problem.
  std::string choice(const json& obj, const std::string& path, const char* key,
                     std::initializer_list<const char*> options) {
    if (!obj.contains(key)) return {};
    const json& v = obj.at(key);
    std::string all;
    for (const char* o : options) all += std::string(all.empty() ? "" : ", ") + '"' + o + '"';
    if (v.is_string()) {
      for (const char* o : options) {
        if (v.get<std::string>() == o) return o;
      }
    }
    fail(path + "." + key, "expected one of " + all);
    return {};
  }

  void quad(const json& obj, const std::string& path, const char* key,
            std::array<std::size_t, 4>& out) {
    if (!obj.contains(key)) return;
    const json& v = obj.at(key);
    if (!v.is_array() || v.size() != 4) {
      fail(path + "." + key, "expected an array of 4 non-negative integers");
      return;
    }
    for (std::size_t i = 0; i < 4; ++i) {
      if (!non_negative_integer(v[i])) {
        fail(path + "." + key + "[" + std::to_string(i) + "]", "expected a non-negative integer");
        return;
      }
      out[i] = v[i].get<std::size_t>();
    }
  }

  void fail(const std::string& path, const std::string& what) {
    problems.push_back(path + ": " + what);
  }

  void prefixed(const std::string& path, const std::vector<std::string>& msgs) {
    for (const auto& m : msgs) problems.push_back(path + ": " + m);
  }
};

}  // namespace

RunConfig parse_run_config(const json& doc) {
  RunConfig cfg;
  Reader r;
  if (!doc.is_object()) throw ConfigError("$: config must be a JSON object");
  r.known(doc, "$", {"model", "train", "data", "mode", "precision"});

  if (const json* m = r.section(doc, "model", "$.model")) {
    const std::string p = "$.model";
    r.known(*m, p,
            {"image_size", "in_channels", "patch", "window", "stem_dim", "depths", "heads",
             "fusion_stage", "fuse_mode", "w_self", "w_cross", "mlp_ratio", "rel_bias",
             "view_weights", "seed"});
    auto& mc = cfg.model;
    r.count(*m, p, "image_size", mc.image_size);
    r.count(*m, p, "in_channels", mc.in_channels);
    r.count(*m, p, "patch", mc.patch);
    r.count(*m, p, "window", mc.window);
    r.count(*m, p, "stem_dim", mc.stem_dim);
    r.quad(*m, p, "depths", mc.depths);
    r.quad(*m, p, "heads", mc.heads);
    r.integer(*m, p, "fusion_stage", mc.fusion_stage);
    r.count(*m, p, "mlp_ratio", mc.mlp_ratio);
    r.boolean(*m, p, "rel_bias", mc.rel_bias);
    r.u64(*m, p, "seed", mc.seed);
    const auto weights = r.choice(*m, p, "view_weights", {"shared", "separate"});
    if (weights == "separate") mc.view_weights = ViewWeights::Separate;
    const auto fuse = r.choice(*m, p, "fuse_mode", {"concat", "weighted"});
    WeightedAddition wa;
    r.number(*m, p, "w_self", wa.w_self);
    r.number(*m, p, "w_cross", wa.w_cross);
    if (fuse == "weighted") {
      mc.fuse_mode = wa;
    } else if (m->contains("w_self") || m->contains("w_cross")) {
      r.fail(p, "w_self/w_cross require \"fuse_mode\": \"weighted\"");
    }
  }

  if (const json* t = r.section(doc, "train", "$.train")) {
    const std::string p = "$.train";
    r.known(*t, p,
            {"lr", "weight_decay", "max_epochs", "batch", "early_stop_patience", "plateau_factor",
             "plateau_patience", "threshold", "val_fraction", "augment", "threads", "seed"});
    auto& tc = cfg.train;
    r.number(*t, p, "lr", tc.lr);
    r.number(*t, p, "weight_decay", tc.weight_decay);
    r.count(*t, p, "max_epochs", tc.max_epochs);
    r.count(*t, p, "batch", tc.batch);
    r.count(*t, p, "early_stop_patience", tc.early_stop_patience);
    r.number(*t, p, "plateau_factor", tc.plateau_factor);
    r.count(*t, p, "plateau_patience", tc.plateau_patience);
    r.number(*t, p, "threshold", tc.threshold);
    r.number(*t, p, "val_fraction", tc.val_fraction);
    r.boolean(*t, p, "augment", tc.augment);
    r.count(*t, p, "threads", tc.threads);
    r.u64(*t, p, "seed", tc.seed);
  }

  if (const json* d = r.section(doc, "data", "$.data")) {
    const std::string p = "$.data";
    r.known(*d, p, {"train_size", "test_size", "seed", "test_seed", "blob_radius", "amplitude",
                    "noise"});
    auto& dc = cfg.data;
    r.count(*d, p, "train_size", dc.train_size);
    r.count(*d, p, "test_size", dc.test_size);
    r.u64(*d, p, "seed", dc.seed);
    r.u64(*d, p, "test_seed", dc.test_seed);
    r.number(*d, p, "blob_radius", dc.blob.radius);
    r.number(*d, p, "amplitude", dc.blob.amplitude);
    r.number(*d, p, "noise", dc.blob.noise);
  }

  if (r.choice(doc, "$", "mode", {"pair", "single"}) == "single") cfg.mode = ViewMode::Single;
  if (r.choice(doc, "$", "precision", {"f32", "f64"}) == "f64") cfg.precision = Precision::F64;

  // Semantic checks only make sense once every field parsed.
  if (r.problems.empty()) {
    r.prefixed("$.model", cfg.model.violations());
    r.prefixed("$.train", cfg.train.violations());
    if (cfg.data.train_size < 10) r.fail("$.data.train_size", "needs at least 10 pairs");
    if (cfg.data.test_size < 2) r.fail("$.data.test_size", "needs at least 2 pairs");
    if (cfg.data.blob.radius < 0) r.fail("$.data.blob_radius", "must be non-negative");
    if (cfg.data.blob.noise < 0) r.fail("$.data.noise", "must be non-negative");
  }

  if (!r.problems.empty()) {
    std::string msg = "invalid config:";
    for (const auto& s : r.problems) msg += "\n  - " + s;
    throw ConfigError(msg);
  }
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(doc);
}

json to_json(const RunConfig& cfg) {
  const auto& m = cfg.model;
  json model{{"image_size", m.image_size},
             {"in_channels", m.in_channels},
             {"patch", m.patch},
             {"window", m.window},
             {"stem_dim", m.stem_dim},
             {"depths", m.depths},
             {"heads", m.heads},
             {"fusion_stage", m.fusion_stage},
             {"mlp_ratio", m.mlp_ratio},
             {"rel_bias", m.rel_bias},
             {"view_weights", m.view_weights == ViewWeights::Shared ? "shared" : "separate"},
             {"seed", m.seed}};
  if (const auto* wa = std::get_if<WeightedAddition>(&m.fuse_mode)) {
    model["fuse_mode"] = "weighted";
    model["w_self"] = wa->w_self;
    model["w_cross"] = wa->w_cross;
  } else {
    model["fuse_mode"] = "concat";
  }
  const auto& t = cfg.train;
  json train{{"lr", t.lr},
             {"weight_decay", t.weight_decay},
             {"max_epochs", t.max_epochs},
             {"batch", t.batch},
             {"early_stop_patience", t.early_stop_patience},
             {"plateau_factor", t.plateau_factor},
             {"plateau_patience", t.plateau_patience},
             {"threshold", t.threshold},
             {"val_fraction", t.val_fraction},
             {"augment", t.augment},
             {"threads", t.threads},
             {"seed", t.seed}};
  const auto& d = cfg.data;
  json data{{"train_size", d.train_size}, {"test_size", d.test_size},
            {"seed", d.seed},             {"test_seed", d.test_seed},
            {"blob_radius", d.blob.radius}, {"amplitude", d.blob.amplitude},
            {"noise", d.blob.noise}};
  return json{{"model", model},
              {"train", train},
              {"data", data},
              {"mode", cfg.mode == ViewMode::Pair ? "pair" : "single"},
              {"precision", cfg.precision == Precision::F32 ? "f32" : "f64"}};
}

}  // namespace mvswin
