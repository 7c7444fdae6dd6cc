#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "mvswin/config.hpp"
#include "mvswin/diagnostics.hpp"
#include "mvswin/io.hpp"
#include "mvswin/ops.hpp"

namespace {

using namespace mvswin;

enum Exit { kOk = 0, kInvalid = 1, kNumeric = 2, kIo = 3 };

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::string out;
};

RunConfig resolve(const Globals& g) {
  RunConfig cfg;
  if (g.config.empty()) {
    cfg.model = ModelConfig::toy();
  } else {
    cfg = load_run_config(g.config);
  }
  if (g.seed) {
    cfg.model.seed = *g.seed;
    cfg.train.seed = *g.seed;
  }
  if (g.threads) cfg.train.threads = *g.threads;
  cfg.model.validate();
  cfg.train.validate();
  return cfg;
}

void require_synthetic_compatible(const RunConfig& cfg) {
  if (cfg.model.in_channels != 1) {
    throw ConfigError("$.model.in_channels: synthetic pairs are single-channel, got " +
                      std::to_string(cfg.model.in_channels));
  }
}

std::string metrics_json(const Metrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "{\"auc\": %.6f, \"accuracy\": %.6f, \"loss\": %.6f, \"n\": %zu}",
                m.auc, m.accuracy, m.loss, m.n);
  return buf;
}

int cmd_gradcheck(const Globals& g, std::size_t probes) {
  const RunConfig cfg = resolve(g);
  const std::size_t grid = cfg.model.grid();
  if (grid > 16) {
    std::cerr << "gradcheck: token grid " << grid << "x" << grid
              << " exceeds the 16x16 limit for finite differences.\n"
              << "Use a toy-scale config (image_size / patch <= 16), e.g. configs/toy.json.\n";
    return kInvalid;
  }
  const auto checks = gradcheck_components(cfg.model, probes, cfg.model.seed);
  constexpr double kTol = 1e-4;
  bool ok = true;
  std::printf("%-16s %14s %7s %6s  %s\n", "component", "max_rel_error", "probes", "kinks", "worst");
  for (const auto& c : checks) {
    const auto& r = c.report;
    const bool pass = r.max_rel_error < kTol && r.probes > 0;
    ok = ok && pass;
    std::printf("%-16s %14.3e %7zu %6zu  %s[%zu]%s\n", c.component.c_str(), r.max_rel_error,
                r.probes, r.kink_skips, r.worst_param.c_str(), r.worst_index,
                pass ? "" : "  FAIL");
  }
  std::printf("%s (tolerance %.0e)\n", ok ? "PASS" : "FAIL", kTol);
  return ok ? kOk : kNumeric;
}

template <typename T>
int run_train(const RunConfig& cfg, const std::filesystem::path& out) {
  require_synthetic_compatible(cfg);
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory " + out.string() + ": " + ec.message());
  {
    std::ofstream probe(out / "config.json");
    if (!probe) throw IoError("output directory " + out.string() + " is not writable");
    probe << to_json(cfg).dump(2) << '\n';
  }
  const auto data = gen_synthetic(cfg.data.seed, cfg.data.train_size, cfg.model.image_size, cfg.data.blob);
  const auto test = gen_synthetic(cfg.data.test_seed, cfg.data.test_size, cfg.model.image_size, cfg.data.blob);
  auto model = build_model<T>(cfg.model);
  const auto result = train(model, data, cfg.train, cfg.mode, [](const HistoryRow& r) {
    std::fprintf(stderr, "epoch %3zu  train %.4f  val %.4f  auc %.4f  acc %.4f  lr %.2e\n", r.epoch,
                 r.train_loss, r.val_loss, r.val_auc, r.val_acc, r.lr);
  });
  write_history_csv(out / "history.csv", result.history);
  save_checkpoint(model, out / "checkpoint");
  const auto m = evaluate(model, test, cfg.mode, EvalOptions{cfg.train.threshold, 64, cfg.train.threads});
  std::printf("{\"best_epoch\": %zu, \"epochs\": %zu, \"test\": %s}\n", result.best_epoch,
              result.history.size(), metrics_json(m).c_str());
  return kOk;
}

template <typename T>
int run_eval(const RunConfig& cfg, const std::string& checkpoint, std::uint64_t data_seed) {
  require_synthetic_compatible(cfg);
  auto model = build_model<T>(cfg.model);
  if (!checkpoint.empty()) load_checkpoint(model, checkpoint);
  const auto data = gen_synthetic(data_seed, cfg.data.test_size, cfg.model.image_size, cfg.data.blob);
  const auto m = evaluate(model, data, cfg.mode, EvalOptions{cfg.train.threshold, 64, cfg.train.threads});
  std::printf("%s\n", metrics_json(m).c_str());
  return kOk;
}

template <typename T>
Tensor<T> read_view(const std::string& path) {
  auto t = io::read_tensor<T>(path);
  if (t.ndim() == 3) t = Tensor<T>({1, t.dim(0), t.dim(1), t.dim(2)}, {t.data().begin(), t.data().end()});
  return t;
}

template <typename T>
int run_forward(const RunConfig& cfg, const std::string& checkpoint, const std::string& cc_path,
                const std::string& mlo_path) {
  auto model = build_model<T>(cfg.model);
  load_checkpoint(model, checkpoint);
  const auto cc = read_view<T>(cc_path);
  NoRecording<T> off;
  Tensor<T> logits;
  if (cfg.mode == ViewMode::Pair) {
    logits = forward_pair(model, cc, read_view<T>(mlo_path));
  } else {
    logits = forward_single(model, cc);
  }
  for (auto z : logits.data()) std::printf("%.6f\n", ops::stable_sigmoid(static_cast<double>(z)));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "mvswin: two-view (CC + MLO) windowed-attention classifier on synthetic data.\n"
      "Settings come from --config (JSON; a toy model when omitted). Command-line flags\n"
      "take precedence over file values: --seed replaces model.seed and train.seed,\n"
      "--threads replaces train.threads.\n"
      "Exit codes: 0 ok, 1 invalid input or config, 2 numeric failure, 3 I/O failure."};
  app.fallthrough();
  app.require_subcommand(1);

  Globals g;
  app.add_option("--config", g.config, "Run config (JSON)");
  app.add_option("--seed", g.seed, "Seed for model init and training (overrides config)");
  app.add_option("--threads", g.threads, "Evaluation threads (overrides config)")
      ->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "Output directory for train");

  std::size_t probes = 200;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of MDA, Omni block pair, "
                                             "patch merge and the full model (float64)");
  gc->add_option("--probes", probes, "Coordinates sampled per component")->check(CLI::PositiveNumber);
#ifdef MVSWIN_FAULT_INJECTION
  std::string corrupt;
  gc->add_option("--corrupt-backward", corrupt, "Test hook: scale this op's backward input by 1.5");
#endif

  auto* tr = app.add_subcommand("train", "Train on synthetic pairs; writes history.csv, "
                                         "checkpoint/ and config.json to --out");

  std::string checkpoint;
  std::optional<std::uint64_t> data_seed;
  auto* ev = app.add_subcommand("eval", "Evaluate on a synthetic set; prints metrics JSON");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint directory (untrained model if omitted)");
  ev->add_option("--data-seed", data_seed, "Seed of the evaluation set (default data.test_seed)");

  auto* pa = app.add_subcommand("params", "Print the parameter count");

  std::string cc_path, mlo_path;
  auto* fw = app.add_subcommand("forward", "Score one pair of MVST tensors; prints probabilities");
  fw->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  fw->add_option("--cc", cc_path, "CC view tensor [S,S,C] or [B,S,S,C]")->required();
  fw->add_option("--mlo", mlo_path, "MLO view tensor (ignored in single mode)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kInvalid;
  }

  try {
    if (gc->parsed()) {
#ifdef MVSWIN_FAULT_INJECTION
      if (!corrupt.empty()) fault::corrupt_backward(corrupt);
#endif
      return cmd_gradcheck(g, probes);
    }
    const RunConfig cfg = resolve(g);
    const bool f64 = cfg.precision == Precision::F64;
    if (tr->parsed()) {
      if (g.out.empty()) throw ValidationError("train: --out <dir> is required");
      return f64 ? run_train<double>(cfg, g.out) : run_train<float>(cfg, g.out);
    }
    if (ev->parsed()) {
      const auto seed = data_seed.value_or(cfg.data.test_seed);
      return f64 ? run_eval<double>(cfg, checkpoint, seed) : run_eval<float>(cfg, checkpoint, seed);
    }
    if (pa->parsed()) {
      std::printf("%zu\n", count_params(build_model<float>(cfg.model)));
      return kOk;
    }
    if (fw->parsed()) {
      if (cfg.mode == ViewMode::Pair && mlo_path.empty()) {
        throw ValidationError("forward: --mlo is required in pair mode");
      }
      return f64 ? run_forward<double>(cfg, checkpoint, cc_path, mlo_path)
                 : run_forward<float>(cfg, checkpoint, cc_path, mlo_path);
    }
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInvalid;
  }
  return kInvalid;
}
