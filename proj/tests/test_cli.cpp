#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "mvswin/io.hpp"
#include "mvswin/model.hpp"
#include "support.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path workdir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "mvswin_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

Run run(const std::string& binary, const std::string& args) {
  const auto err_file = workdir() / "stderr.txt";
  const std::string cmd = binary + " " + args + " 2>" + err_file.string();
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = slurp(err_file);
  return r;
}

Run cli(const std::string& args) { return run(MVSWIN_CLI, args); }

std::string config(const std::string& name) {
  return (fs::path(MVSWIN_CONFIG_DIR) / (name + ".json")).string();
}

// Toy config trimmed to a few seconds of training.
std::string quick_config(const std::string& name, const std::string& mode) {
  auto doc = nlohmann::json::parse(slurp(config("toy")));
  doc["train"]["max_epochs"] = 2;
  doc["data"]["train_size"] = 120;
  doc["data"]["test_size"] = 60;
  doc["mode"] = mode;
  const auto path = workdir() / (name + ".json");
  std::ofstream(path) << doc.dump(2);
  return path.string();
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("gradcheck passes on the toy config") {
  const auto r = cli("--config " + config("toy") + " gradcheck --probes 120");
  CAPTURE(r.out);
  CAPTURE(r.err);
  CHECK(r.code == 0);
  for (const char* c : {"mda", "omni_block_pair", "patch_merge", "model"})
    CHECK(r.out.find(c) != std::string::npos);
  CHECK(r.out.find("PASS") != std::string::npos);
}

TEST_CASE("gradcheck refuses large grids") {
  const auto r = cli("--config " + config("small") + " gradcheck --probes 100");
  CHECK(r.code == 0);  // small has an 8x8 grid
  const auto big = cli("--config " + config("tiny224_fusion2") + " gradcheck");
  CHECK(big.code == 1);
  CHECK(big.err.find("exceeds the 16x16 limit") != std::string::npos);
  CHECK(big.err.find("configs/toy.json") != std::string::npos);

  auto doc = nlohmann::json::parse(slurp(config("small")));
  doc["model"]["patch"] = 1;  // 32x32 tokens
  doc["model"]["image_size"] = 32;
  const auto path = workdir() / "grid32.json";
  std::ofstream(path) << doc.dump();
  const auto g32 = cli("--config " + path.string() + " gradcheck");
  CHECK(g32.code == 1);
  CHECK(g32.err.find("32x32") != std::string::npos);
}

TEST_CASE("a corrupted backward rule fails gradcheck") {
  for (const char* op : {"softmax_last", "layer_norm", "matmul"}) {
    CAPTURE(op);
    const auto r = run(MVSWIN_FAULTY_CLI, std::string("--config ") + config("toy") +
                                               " gradcheck --probes 120 --corrupt-backward " + op);
    CHECK(r.code == 2);
    CHECK(r.out.find("FAIL") != std::string::npos);
  }
  // the production binary does not expose the hook
  CHECK(cli("--config " + config("toy") + " gradcheck --corrupt-backward matmul").code == 1);
}

TEST_CASE("params") {
  const auto toy = cli("--config " + config("toy") + " params");
  CHECK(toy.code == 0);
  const auto want = mvswin::count_params(mvswin::build_model<float>(mvswin::ModelConfig::toy()));
  CHECK(std::stoull(toy.out) == want);
  CHECK(std::stoull(cli("params").out) == want);  // toy is the default
  const auto f2 = std::stoull(cli("--config " + config("tiny224_fusion2") + " params").out);
  const auto f4 = std::stoull(cli("--config " + config("tiny224_fusion4") + " params").out);
  CHECK(f2 < f4);

  std::ofstream(workdir() / "invalid.json") << R"({"model": {"depths": [2, 3, 2, 2], "heads": [5, 6, 12, 24]}})";
  const auto bad = cli("--config " + (workdir() / "invalid.json").string() + " params");
  CHECK(bad.code == 1);
  CHECK(bad.err.find("stage 2: depth 3") != std::string::npos);
  CHECK(bad.err.find("stage 1: 5 heads") != std::string::npos);
  CHECK(cli("--config " + (workdir() / "nowhere.json").string() + " params").code == 3);
  CHECK(cli("bogus").code == 1);
}

TEST_CASE("train, eval and forward") {
  const auto cfg = quick_config("quick", "pair");
  const auto out1 = workdir() / "run1";
  const auto out2 = workdir() / "run2";
  const auto t1 = cli("--config " + cfg + " --seed 3 --out " + out1.string() + " train");
  CAPTURE(t1.err);
  REQUIRE(t1.code == 0);
  const auto summary = nlohmann::json::parse(t1.out);
  CHECK(summary["epochs"] == 2);
  CHECK(summary["test"]["n"] == 60);
  REQUIRE(cli("--config " + cfg + " --seed 3 --out " + out2.string() + " train").code == 0);

  const auto csv = slurp(out1 / "history.csv");
  CHECK(csv == slurp(out2 / "history.csv"));
  std::istringstream lines(csv);
  std::string line;
  std::getline(lines, line);
  CHECK(line == "epoch,train_loss,val_loss,val_auc,val_acc,lr");
  int rows = 0;
  while (std::getline(lines, line)) {
    ++rows;
    std::stringstream fields(line);
    std::string f;
    while (std::getline(fields, f, ',')) CHECK(std::isfinite(std::stod(f)));
  }
  CHECK(rows >= 2);
  CHECK(fs::exists(out1 / "checkpoint" / "manifest.json"));
  CHECK(fs::exists(out1 / "config.json"));

  // eval on the trained checkpoint reproduces the test metrics of train
  const auto ev = cli("--config " + cfg + " eval --checkpoint " + (out1 / "checkpoint").string());
  REQUIRE(ev.code == 0);
  const auto metrics = nlohmann::json::parse(ev.out);
  for (const char* k : {"auc", "accuracy", "loss", "n"}) CHECK(metrics.contains(k));
  CHECK(metrics == summary["test"]);

  // forward: deterministic on zero inputs, one line per example
  const auto zeros = mvswin::Tensor<float>::zeros({8, 8, 1});
  mvswin::io::write_tensor(workdir() / "zero.mvst", zeros);
  const auto batch = testing::randn({3, 8, 8, 1}, 5);
  mvswin::io::write_tensor(workdir() / "batch_cc.mvst", batch);
  mvswin::io::write_tensor(workdir() / "batch_mlo.mvst", testing::randn({3, 8, 8, 1}, 6));
  const std::string ckpt = " --checkpoint " + (out1 / "checkpoint").string();
  const std::string zero = (workdir() / "zero.mvst").string();
  const auto f1 = cli("--config " + cfg + " forward" + ckpt + " --cc " + zero + " --mlo " + zero);
  const auto f2 = cli("--config " + cfg + " forward" + ckpt + " --cc " + zero + " --mlo " + zero);
  REQUIRE(f1.code == 0);
  CHECK(f1.out == f2.out);
  const double p = std::stod(f1.out);
  CHECK(p > 0.0);
  CHECK(p < 1.0);
  CHECK(f1.out.find('.') + 7 == f1.out.size() - 1);  // six decimals then newline
  const auto fb = cli("--config " + cfg + " forward" + ckpt + " --cc " + (workdir() / "batch_cc.mvst").string() +
                      " --mlo " + (workdir() / "batch_mlo.mvst").string());
  CHECK(fb.code == 0);
  CHECK(std::count(fb.out.begin(), fb.out.end(), '\n') == 3);
  const auto swapped = cli("--config " + cfg + " forward" + ckpt + " --cc " + (workdir() / "batch_mlo.mvst").string() +
                           " --mlo " + (workdir() / "batch_cc.mvst").string());
  MESSAGE("forward scores: " << fb.out << "swapped: " << swapped.out);

  // a truncated tensor file
  auto bytes = mvswin::io::read_file(workdir() / "zero.mvst");
  bytes.resize(bytes.size() - 5);
  mvswin::io::write_file(workdir() / "short.mvst", bytes);
  const auto tr = cli("--config " + cfg + " forward" + ckpt + " --cc " + (workdir() / "short.mvst").string() +
                      " --mlo " + zero);
  CHECK(tr.code != 0);
  CHECK(tr.err.find("payload length mismatch") != std::string::npos);
  CHECK(cli("--config " + cfg + " forward" + ckpt + " --cc " + zero).code == 1);  // pair mode needs --mlo

  // checkpoint that does not fit the config
  auto wide = nlohmann::json::parse(slurp(cfg));
  wide["model"]["stem_dim"] = 16;
  std::ofstream(workdir() / "wide.json") << wide.dump();
  const auto mismatch = cli("--config " + (workdir() / "wide.json").string() + " eval" + ckpt);
  CHECK(mismatch.code == 1);
  CHECK(mismatch.err.find("views.embed.w") != std::string::npos);
  std::ofstream(workdir() / "broken_manifest.json") << "[";
  fs::create_directories(workdir() / "broken");
  fs::copy_file(workdir() / "broken_manifest.json", workdir() / "broken" / "manifest.json",
                fs::copy_options::overwrite_existing);
  CHECK(cli("--config " + cfg + " eval --checkpoint " + (workdir() / "broken").string()).code == 3);
}

TEST_CASE("multi-view training beats single-view on paired seeds") {
  auto doc = nlohmann::json::parse(slurp(config("small")));
  doc["train"]["max_epochs"] = 2;
  doc["data"]["train_size"] = 1000;
  doc["data"]["test_size"] = 300;
  for (const char* mode : {"pair", "single"}) {
    doc["mode"] = mode;
    std::ofstream(workdir() / (std::string("paired_") + mode + ".json")) << doc.dump();
  }
  auto final_val_auc = [](const fs::path& dir) {
    std::istringstream lines(slurp(dir / "history.csv"));
    std::string line, last;
    while (std::getline(lines, line)) last = line;
    return std::stod(last.substr(last.find(',', last.find(',', last.find(',') + 1) + 1) + 1));
  };
  for (int seed : {0, 1}) {
    CAPTURE(seed);
    double auc[2];
    int i = 0;
    for (const char* mode : {"pair", "single"}) {
      const auto out = workdir() / ("paired_" + std::string(mode) + std::to_string(seed));
      const auto r = cli("--config " + (workdir() / (std::string("paired_") + mode + ".json")).string() +
                         " --seed " + std::to_string(seed) + " --out " + out.string() + " train");
      REQUIRE(r.code == 0);
      auc[i++] = final_val_auc(out);
    }
    MESSAGE("seed " << seed << ": multi-view val AUC " << auc[0] << ", single-view " << auc[1]);
    CHECK(auc[0] > auc[1]);
  }
  // held-out eval of the trained multi-view run
  const auto r = cli("--config " + (workdir() / "paired_pair.json").string() + " eval --checkpoint " +
                     (workdir() / "paired_pair1" / "checkpoint").string());
  REQUIRE(r.code == 0);
  const auto m = nlohmann::json::parse(r.out);
  MESSAGE("multi-view eval: " << r.out);
  CHECK(m["auc"].get<double>() >= 0.95);
  CHECK(m["n"] == 300);
}

TEST_CASE("untrained eval is near chance") {
  const auto r = cli("--config " + config("toy") + " eval --data-seed 77");
  REQUIRE(r.code == 0);
  const auto m = nlohmann::json::parse(r.out);
  CHECK(m["auc"].get<double>() >= 0.3);
  CHECK(m["auc"].get<double>() <= 0.7);
  CHECK(m["n"] == 200);
}

TEST_CASE("train reports an unwritable output directory") {
  const auto r = cli("--config " + quick_config("q2", "pair") + " --out /proc/mvswin_nope train");
  CHECK(r.code == 3);
  CHECK(r.err.find("/proc/mvswin_nope") != std::string::npos);
  CHECK(cli("--config " + config("toy") + " train").code == 1);  // --out missing
}

TEST_CASE("help documents flag precedence") {
  const auto r = cli("--help");
  CHECK(r.code == 0);
  CHECK(r.out.find("take precedence over file values") != std::string::npos);
}

}  // TEST_SUITE
