#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "mvswin/model.hpp"

namespace mvswin {

struct BlobParams {
  double radius = 0;  // Gaussian sigma in pixels; 0 selects size / 8
  double amplitude = 1.0;
  double noise = 0.1;
};

/// One ipsilateral pair of single-channel S x S images, row-major.
struct ImagePair {
  std::vector<float> cc;
  std::vector<float> mlo;
  int label = 0;
};

struct SyntheticPairSet {
  std::size_t size = 0;
  std::uint64_t seed = 0;
  BlobParams blob;
  std::vector<ImagePair> pairs;

  std::size_t count() const { return pairs.size(); }
  std::vector<int> labels() const;
};

/// Each view independently holds a Gaussian blob with probability 1/2;
/// label = 1 iff both do. Pair i depends only on (seed, i).
SyntheticPairSet gen_synthetic(std::uint64_t seed, std::size_t n, std::size_t size,
                               BlobParams blob = {});

enum class Aug { HFlip, VFlip, Rot90, Rot180, Rot270 };

std::vector<float> hflip(const std::vector<float>& img, std::size_t size);
std::vector<float> vflip(const std::vector<float>& img, std::size_t size);
/// Counter-clockwise quarter turns; k may be any integer.
std::vector<float> rot90(const std::vector<float>& img, std::size_t size, int k = 1);
/// Applies the same op to both views; the label is untouched.
ImagePair augment(const ImagePair& pair, std::size_t size, Aug op);
SyntheticPairSet augment(const SyntheticPairSet& set, Aug op);

enum class ViewMode { Pair, Single };

template <typename T>
struct Batch {
  Tensor<T> cc;      // [B, S, S, 1]
  Tensor<T> mlo;     // [B, S, S, 1]
  Tensor<T> labels;  // [B]
};

template <typename T>
Batch<T> make_batch(const SyntheticPairSet& set, const std::vector<std::size_t>& idx);

/// Logits [B] for the batch in the given mode.
template <typename T>
Tensor<T> forward_batch(const Model<T>& m, const Batch<T>& b, ViewMode mode);

/// Rank-based AUC with ties counted one half. ValidationError when either
/// class is absent or the inputs disagree in length.
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

struct Metrics {
  double auc = 0;
  double accuracy = 0;
  double loss = 0;
  std::size_t n = 0;
};

struct EvalOptions {
  double threshold = 0.5;
  std::size_t batch = 64;
  std::size_t threads = 1;
};

/// Scores every pair in `idx` (all pairs when empty). Logits are computed in
/// parallel chunks; the loss is reduced in index order.
template <typename T>
Metrics evaluate(const Model<T>& m, const SyntheticPairSet& data, ViewMode mode,
                 const EvalOptions& opts = {}, const std::vector<std::size_t>& idx = {});

/// Multiplies the learning rate by `factor` once `patience` consecutive
/// epochs pass without a strict improvement, then starts counting again.
class PlateauScheduler {
 public:
  PlateauScheduler(double factor = 0.5, std::size_t patience = 5);
  /// Returns true when this call decayed `lr`.
  bool step(double val_loss, double& lr);
  std::size_t bad_epochs() const { return bad_; }

 private:
  double factor_;
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t bad_ = 0;
};

class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience = 15);
  /// Returns true once `patience` consecutive epochs fail to improve.
  bool step(double val_loss);
  bool improved() const { return improved_; }

 private:
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t bad_ = 0;
  bool improved_ = false;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0;
};

/// Adam with decoupled weight decay: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
template <typename T>
class Adam {
 public:
  Adam(std::vector<std::pair<std::string, Tensor<T>>> params, AdamOptions opts);
  void step(double lr);
  void zero_grad();
  std::size_t steps() const { return t_; }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  AdamOptions opts_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 1e-3;
  std::size_t max_epochs = 100;
  std::size_t batch = 32;
  std::size_t early_stop_patience = 15;
  double plateau_factor = 0.5;
  std::size_t plateau_patience = 5;
  double threshold = 0.5;
  double val_fraction = 0.2;
  bool augment = true;
  std::size_t threads = 1;
  std::uint64_t seed = 0;

  std::vector<std::string> violations() const;
  void validate() const;
};

struct HistoryRow {
  std::size_t epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double val_auc = 0;
  double val_acc = 0;
  double lr = 0;
};

struct TrainResult {
  std::vector<HistoryRow> history;
  std::size_t best_epoch = 0;
  bool stopped_early = false;
};

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

/// Label-stratified, seeded split; each class contributes round(fraction * n_c)
/// validation items.
Split stratified_split(const std::vector<int>& labels, double val_fraction, std::uint64_t seed);

/// Trains in place and leaves `m` holding the best-validation-loss state.
/// `on_epoch` (optional) sees each history row as it is produced.
template <typename T>
TrainResult train(Model<T>& m, const SyntheticPairSet& data, const TrainConfig& tc, ViewMode mode,
                  const std::function<void(const HistoryRow&)>& on_epoch = {});

/// Full-batch Adam steps on `idx`; returns the training loss before each step
/// plus the loss after the last one.
template <typename T>
std::vector<double> train_steps(Model<T>& m, const SyntheticPairSet& data,
                                const std::vector<std::size_t>& idx, std::size_t steps, double lr,
                                ViewMode mode, double weight_decay = 0);

std::string history_csv(const std::vector<HistoryRow>& rows);
void write_history_csv(const std::filesystem::path& path, const std::vector<HistoryRow>& rows);

}  // namespace mvswin
