#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "mvswin/config.hpp"
#include "mvswin/diagnostics.hpp"
#include "mvswin/harness.hpp"

namespace py = pybind11;
using namespace mvswin;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor<double> to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor<double>(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

template <typename T>
py::array_t<T> to_array(const Tensor<T>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<T> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

// Image batches may come as [S, S], [B, S, S] or [B, S, S, C]; the model wants [B, S, S, C].
Tensor<double> as_images(const Array& a, const ModelConfig& cfg) {
  auto t = to_tensor(a);
  const auto& s = t.shape();
  if (s.size() == 2) return Tensor<double>({1, s[0], s[1], 1}, {t.data().begin(), t.data().end()});
  if (s.size() == 3 && cfg.in_channels == 1)
    return Tensor<double>({s[0], s[1], s[2], 1}, {t.data().begin(), t.data().end()});
  return t;
}

struct PyModel {
  Model<double> model;

  explicit PyModel(const ModelConfig& cfg) : model(build_model<double>(cfg)) {}

  py::array_t<double> forward_pair(const Array& cc, const Array& mlo) const {
    NoRecording<double> off;
    return to_array(mvswin::forward_pair(model, as_images(cc, model.config), as_images(mlo, model.config)));
  }
  py::array_t<double> forward_single(const Array& x) const {
    NoRecording<double> off;
    return to_array(mvswin::forward_single(model, as_images(x, model.config)));
  }
  std::vector<std::string> parameter_names() const {
    std::vector<std::string> out;
    for (const auto& [name, t] : model.named_parameters()) out.push_back(name);
    return out;
  }
  py::array_t<double> parameter(const std::string& name) const {
    for (const auto& [n, t] : model.named_parameters())
      if (n == name) return to_array(t);
    throw py::key_error(name);
  }
  void set_parameter(const std::string& name, const Array& value) {
    for (auto& [n, t] : model.named_parameters()) {
      if (n != name) continue;
      auto v = to_tensor(value);
      if (v.shape() != t.shape()) throw ContractError("set_parameter: shape mismatch for " + name);
      std::copy(v.data().begin(), v.data().end(), t.mutable_data().begin());
      return;
    }
    throw py::key_error(name);
  }
};

py::dict metrics_dict(const Metrics& m) {
  py::dict d;
  d["auc"] = m.auc;
  d["accuracy"] = m.accuracy;
  d["loss"] = m.loss;
  d["n"] = m.n;
  return d;
}

RunConfig run_config_from(const py::object& obj) {
  const auto json_mod = py::module_::import("json");
  const std::string text = py::isinstance<py::str>(obj) ? obj.cast<std::string>()
                                                        : json_mod.attr("dumps")(obj).cast<std::string>();
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_run_config(doc);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Two-view windowed-attention classifier (float64 bindings)";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<ValidationError>(m, "ValidationError", base.ptr());
  py::register_exception<ContractError>(m, "ContractError", base.ptr());
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_static("toy", &ModelConfig::toy)
      .def_static("tiny", [](std::size_t image_size, int fusion_stage) {
        return ModelConfig::tiny(image_size, fusion_stage);
      }, py::arg("image_size"), py::arg("fusion_stage") = 2)
      .def_readwrite("image_size", &ModelConfig::image_size)
      .def_readwrite("in_channels", &ModelConfig::in_channels)
      .def_readwrite("patch", &ModelConfig::patch)
      .def_readwrite("window", &ModelConfig::window)
      .def_readwrite("stem_dim", &ModelConfig::stem_dim)
      .def_readwrite("depths", &ModelConfig::depths)
      .def_readwrite("heads", &ModelConfig::heads)
      .def_readwrite("fusion_stage", &ModelConfig::fusion_stage)
      .def_readwrite("mlp_ratio", &ModelConfig::mlp_ratio)
      .def_readwrite("rel_bias", &ModelConfig::rel_bias)
      .def_readwrite("seed", &ModelConfig::seed)
      .def_property("separate_views",
                    [](const ModelConfig& c) { return c.view_weights == ViewWeights::Separate; },
                    [](ModelConfig& c, bool v) { c.view_weights = v ? ViewWeights::Separate : ViewWeights::Shared; })
      .def("set_concat_fusion", [](ModelConfig& c) { c.fuse_mode = Concatenation{}; })
      .def("set_weighted_fusion", [](ModelConfig& c, double w_self, double w_cross) {
        c.fuse_mode = WeightedAddition{w_self, w_cross};
      }, py::arg("w_self") = 0.9, py::arg("w_cross") = 0.1)
      .def_property_readonly("grid", &ModelConfig::grid)
      .def("violations", &ModelConfig::violations)
      .def("validate", &ModelConfig::validate);

  py::class_<PyModel>(m, "Model")
      .def(py::init<const ModelConfig&>(), py::arg("config"))
      .def_property_readonly("config", [](const PyModel& p) { return p.model.config; })
      .def_property_readonly("num_params", [](const PyModel& p) { return count_params(p.model); })
      .def("forward_pair", &PyModel::forward_pair, py::arg("cc"), py::arg("mlo"),
           "Logits for image batches [B, S, S, C] (or [B, S, S] / [S, S] single-channel).")
      .def("forward_single", &PyModel::forward_single, py::arg("view"))
      .def("parameter_names", &PyModel::parameter_names)
      .def("parameter", &PyModel::parameter, py::arg("name"))
      .def("set_parameter", &PyModel::set_parameter, py::arg("name"), py::arg("value"))
      .def("save", [](const PyModel& p, const std::filesystem::path& dir) { save_checkpoint(p.model, dir); })
      .def("load", [](PyModel& p, const std::filesystem::path& dir) { load_checkpoint(p.model, dir); });

  m.def("synthetic_pairs", [](std::uint64_t seed, std::size_t n, std::size_t size) {
    const auto set = gen_synthetic(seed, n, size);
    py::array_t<float> cc({n, size, size, std::size_t{1}}), mlo({n, size, size, std::size_t{1}});
    py::array_t<int> labels(static_cast<py::ssize_t>(n));
    for (std::size_t i = 0; i < n; ++i) {
      std::copy(set.pairs[i].cc.begin(), set.pairs[i].cc.end(), cc.mutable_data() + i * size * size);
      std::copy(set.pairs[i].mlo.begin(), set.pairs[i].mlo.end(), mlo.mutable_data() + i * size * size);
      labels.mutable_data()[i] = set.pairs[i].label;
    }
    return py::make_tuple(cc, mlo, labels);
  }, py::arg("seed"), py::arg("n"), py::arg("size"),
        "Synthetic pairs: (cc, mlo, labels); label is 1 iff both views hold a blob.");

  m.def("auc", &auc, py::arg("scores"), py::arg("labels"));

  m.def("gradcheck", [](const ModelConfig& cfg, std::size_t probes, std::uint64_t seed) {
    py::dict out;
    for (const auto& c : gradcheck_components(cfg, probes, seed)) {
      py::dict r;
      r["max_rel_error"] = c.report.max_rel_error;
      r["probes"] = c.report.probes;
      r["kink_skips"] = c.report.kink_skips;
      out[py::str(c.component)] = r;
    }
    return out;
  }, py::arg("config"), py::arg("probes") = 200, py::arg("seed") = 0);

  m.def("train_synthetic", [](const py::object& config) {
    const RunConfig cfg = run_config_from(config);
    if (cfg.model.in_channels != 1) throw ConfigError("$.model.in_channels: synthetic pairs are single-channel");
    const auto data = gen_synthetic(cfg.data.seed, cfg.data.train_size, cfg.model.image_size, cfg.data.blob);
    const auto test = gen_synthetic(cfg.data.test_seed, cfg.data.test_size, cfg.model.image_size, cfg.data.blob);
    auto model = build_model<float>(cfg.model);
    TrainResult result;
    {
      py::gil_scoped_release release;
      result = train(model, data, cfg.train, cfg.mode);
    }
    py::list history;
    for (const auto& h : result.history) {
      py::dict row;
      row["epoch"] = h.epoch;
      row["train_loss"] = h.train_loss;
      row["val_loss"] = h.val_loss;
      row["val_auc"] = h.val_auc;
      row["val_acc"] = h.val_acc;
      row["lr"] = h.lr;
      history.append(row);
    }
    py::dict out;
    out["history"] = history;
    out["best_epoch"] = result.best_epoch;
    out["test"] = metrics_dict(evaluate(model, test, cfg.mode, EvalOptions{cfg.train.threshold, 64, cfg.train.threads}));
    return out;
  }, py::arg("config"), "Train on synthetic pairs from a run config (dict or JSON string).");
}
