#include "mvswin/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <numeric>
#include <random>
#include <thread>

#include "mvswin/ops.hpp"

namespace mvswin {

namespace {

Rng seeded(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

// Stream tags keep the independent random sequences of one seed apart.
constexpr std::uint64_t kSplitStream = 0x5b1d;
constexpr std::uint64_t kShuffleStream = 0x5f0e;
constexpr std::uint64_t kAugmentStream = 0xa06e;

void add_blob(std::vector<float>& img, std::size_t size, const BlobParams& blob, Rng& rng) {
  std::uniform_real_distribution<double> pos(0.0, static_cast<double>(size));
  const double cy = pos(rng);
  const double cx = pos(rng);
  const double sigma = blob.radius > 0 ? blob.radius : static_cast<double>(size) / 8.0;
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double dy = static_cast<double>(y) + 0.5 - cy;
      const double dx = static_cast<double>(x) + 0.5 - cx;
      img[y * size + x] += static_cast<float>(blob.amplitude * std::exp(-(dx * dx + dy * dy) * inv));
    }
  }
}

double bce_term(double z, double y) {
  return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
}

}  // namespace

std::vector<int> SyntheticPairSet::labels() const {
  std::vector<int> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(p.label);
  return out;
}

SyntheticPairSet gen_synthetic(std::uint64_t seed, std::size_t n, std::size_t size,
                               BlobParams blob) {
  if (n == 0) throw ValidationError("gen_synthetic: n must be positive");
  if (size == 0) throw ValidationError("gen_synthetic: image size must be positive");
  if (blob.noise < 0) throw ValidationError("gen_synthetic: noise must be non-negative");
  SyntheticPairSet set;
  set.size = size;
  set.seed = seed;
  set.blob = blob;
  set.pairs.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = seeded(seed, i);
    std::bernoulli_distribution present(0.5);
    std::normal_distribution<double> noise(0.0, blob.noise);
    auto& p = set.pairs[i];
    const bool in_cc = present(rng);
    const bool in_mlo = present(rng);
    p.label = in_cc && in_mlo ? 1 : 0;
    for (auto* img : {&p.cc, &p.mlo}) {
      img->assign(size * size, 0.0f);
      if (blob.noise > 0) {
        for (auto& v : *img) v = static_cast<float>(noise(rng));
      }
    }
    if (in_cc) add_blob(p.cc, size, blob, rng);
    if (in_mlo) add_blob(p.mlo, size, blob, rng);
  }
  return set;
}

std::vector<float> hflip(const std::vector<float>& img, std::size_t size) {
  std::vector<float> out(img.size());
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) out[y * size + x] = img[y * size + (size - 1 - x)];
  }
  return out;
}

std::vector<float> vflip(const std::vector<float>& img, std::size_t size) {
  std::vector<float> out(img.size());
  for (std::size_t y = 0; y < size; ++y) {
    std::copy_n(img.begin() + static_cast<std::ptrdiff_t>((size - 1 - y) * size), size,
                out.begin() + static_cast<std::ptrdiff_t>(y * size));
  }
  return out;
}

std::vector<float> rot90(const std::vector<float>& img, std::size_t size, int k) {
  k = ((k % 4) + 4) % 4;
  std::vector<float> cur = img;
  for (int r = 0; r < k; ++r) {
    std::vector<float> out(cur.size());
    // counter-clockwise: out[y][x] = in[x][S-1-y]
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) out[y * size + x] = cur[x * size + (size - 1 - y)];
    }
    cur = std::move(out);
  }
  return cur;
}

namespace {
std::vector<float> apply_aug(const std::vector<float>& img, std::size_t size, Aug op) {
  switch (op) {
    case Aug::HFlip: return hflip(img, size);
    case Aug::VFlip: return vflip(img, size);
    case Aug::Rot90: return rot90(img, size, 1);
    case Aug::Rot180: return rot90(img, size, 2);
    case Aug::Rot270: return rot90(img, size, 3);
  }
  return img;
}
}  // namespace

ImagePair augment(const ImagePair& pair, std::size_t size, Aug op) {
  if (pair.cc.size() != size * size || pair.mlo.size() != size * size) {
    throw DimensionError("augment: views must be " + std::to_string(size) + "x" +
                         std::to_string(size));
  }
  return ImagePair{apply_aug(pair.cc, size, op), apply_aug(pair.mlo, size, op), pair.label};
}

SyntheticPairSet augment(const SyntheticPairSet& set, Aug op) {
  SyntheticPairSet out = set;
  for (auto& p : out.pairs) p = augment(p, set.size, op);
  return out;
}

namespace {

template <typename T>
Batch<T> batch_from(const std::vector<const ImagePair*>& pairs, std::size_t size) {
  const std::size_t b = pairs.size();
  const std::size_t px = size * size;
  std::vector<T> cc(b * px), mlo(b * px), y(b);
  for (std::size_t i = 0; i < b; ++i) {
    std::copy(pairs[i]->cc.begin(), pairs[i]->cc.end(), cc.begin() + static_cast<std::ptrdiff_t>(i * px));
    std::copy(pairs[i]->mlo.begin(), pairs[i]->mlo.end(), mlo.begin() + static_cast<std::ptrdiff_t>(i * px));
    y[i] = static_cast<T>(pairs[i]->label);
  }
  return Batch<T>{Tensor<T>({b, size, size, 1}, std::move(cc)),
                  Tensor<T>({b, size, size, 1}, std::move(mlo)), Tensor<T>({b}, std::move(y))};
}

}  // namespace

template <typename T>
Batch<T> make_batch(const SyntheticPairSet& set, const std::vector<std::size_t>& idx) {
  if (idx.empty()) throw ValidationError("make_batch: empty index list");
  std::vector<const ImagePair*> ptrs;
  ptrs.reserve(idx.size());
  for (auto i : idx) {
    if (i >= set.count()) {
      throw ValidationError("make_batch: index " + std::to_string(i) + " out of range for " +
                            std::to_string(set.count()) + " pairs");
    }
    ptrs.push_back(&set.pairs[i]);
  }
  return batch_from<T>(ptrs, set.size);
}

template <typename T>
Tensor<T> forward_batch(const Model<T>& m, const Batch<T>& b, ViewMode mode) {
  return mode == ViewMode::Pair ? forward_pair(m, b.cc, b.mlo) : forward_single(m, b.cc);
}

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) {
    throw ValidationError("auc: " + std::to_string(scores.size()) + " scores vs " +
                          std::to_string(labels.size()) + " labels");
  }
  std::size_t pos = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ValidationError("auc: labels must be 0 or 1");
    if (std::isnan(scores[i])) throw ValidationError("auc: NaN score at " + std::to_string(i));
    pos += static_cast<std::size_t>(labels[i]);
  }
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw ValidationError("auc: needs both positive and negative labels");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Mann-Whitney: sum of mid-ranks of the positives.
  double rank_sum = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) rank_sum += mid;
    }
    i = j;
  }
  const double np = static_cast<double>(pos);
  const double u = rank_sum - np * (np + 1) / 2;
  return u / (np * static_cast<double>(neg));
}

template <typename T>
Metrics evaluate(const Model<T>& m, const SyntheticPairSet& data, ViewMode mode,
                 const EvalOptions& opts, const std::vector<std::size_t>& idx_in) {
  if (opts.threshold < 0 || opts.threshold > 1) {
    throw ValidationError("evaluate: threshold must lie in [0, 1]");
  }
  std::vector<std::size_t> idx = idx_in;
  if (idx.empty()) {
    idx.resize(data.count());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
  }
  const std::size_t batch = std::max<std::size_t>(1, opts.batch);
  const std::size_t chunks = (idx.size() + batch - 1) / batch;
  std::vector<double> logits(idx.size());
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(chunks);

  auto worker = [&] {
    NoRecording<T> off;
    for (std::size_t c = next++; c < chunks; c = next++) {
      const std::size_t lo = c * batch;
      const std::size_t hi = std::min(idx.size(), lo + batch);
      try {
        std::vector<std::size_t> part(idx.begin() + static_cast<std::ptrdiff_t>(lo),
                                      idx.begin() + static_cast<std::ptrdiff_t>(hi));
        const auto out = forward_batch(m, make_batch<T>(data, part), mode);
        for (std::size_t i = lo; i < hi; ++i) logits[i] = static_cast<double>(out.at(i - lo));
      } catch (...) {
        errors[c] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(opts.threads, 1, chunks);
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  Metrics out;
  out.n = idx.size();
  std::vector<double> scores(idx.size());
  std::vector<int> labels(idx.size());
  double loss = 0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const int y = data.pairs[idx[i]].label;
    labels[i] = y;
    scores[i] = ops::stable_sigmoid(logits[i]);
    loss += bce_term(logits[i], y);
    correct += static_cast<std::size_t>((scores[i] >= opts.threshold ? 1 : 0) == y);
  }
  out.loss = loss / static_cast<double>(idx.size());
  out.accuracy = static_cast<double>(correct) / static_cast<double>(idx.size());
  out.auc = auc(scores, labels);
  return out;
}

PlateauScheduler::PlateauScheduler(double factor, std::size_t patience)
    : factor_(factor), patience_(patience) {
  if (!(factor > 0 && factor < 1)) throw ValidationError("plateau factor must lie in (0, 1)");
  if (patience == 0) throw ValidationError("plateau patience must be positive");
}

bool PlateauScheduler::step(double val_loss, double& lr) {
  if (val_loss < best_) {
    best_ = val_loss;
    bad_ = 0;
    return false;
  }
  if (++bad_ < patience_) return false;
  lr *= factor_;
  bad_ = 0;
  return true;
}

EarlyStopping::EarlyStopping(std::size_t patience) : patience_(patience) {
  if (patience == 0) throw ValidationError("early-stop patience must be positive");
}

bool EarlyStopping::step(double val_loss) {
  improved_ = val_loss < best_;
  if (improved_) {
    best_ = val_loss;
    bad_ = 0;
    return false;
  }
  return ++bad_ >= patience_;
}

template <typename T>
Adam<T>::Adam(std::vector<std::pair<std::string, Tensor<T>>> params, AdamOptions opts)
    : params_(std::move(params)), opts_(opts) {
  for (const auto& [name, t] : params_) {
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
  }
}

template <typename T>
void Adam<T>::step(double lr) {
  ++t_;
  const double c1 = 1 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double c2 = 1 - std::pow(opts_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k].second;
    auto data = p.mutable_data();
    const bool has = p.has_grad();
    const auto grad = p.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = has ? static_cast<double>(grad[i]) : 0.0;
      m[i] = opts_.beta1 * m[i] + (1 - opts_.beta1) * g;
      v[i] = opts_.beta2 * v[i] + (1 - opts_.beta2) * g * g;
      const double upd = (m[i] / c1) / (std::sqrt(v[i] / c2) + opts_.eps);
      const double x = static_cast<double>(data[i]);
      data[i] = static_cast<T>(x - lr * (upd + opts_.weight_decay * x));
    }
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

std::vector<std::string> TrainConfig::violations() const {
  std::vector<std::string> v;
  if (!(lr > 0) || !std::isfinite(lr)) v.push_back("lr must be a positive number");
  if (!(weight_decay >= 0)) v.push_back("weight_decay must be non-negative");
  if (max_epochs == 0) v.push_back("max_epochs must be positive");
  if (batch == 0) v.push_back("batch must be positive");
  if (early_stop_patience == 0) v.push_back("early_stop_patience must be positive");
  if (!(plateau_factor > 0 && plateau_factor < 1)) v.push_back("plateau_factor must lie in (0, 1)");
  if (plateau_patience == 0) v.push_back("plateau_patience must be positive");
  if (!(threshold >= 0 && threshold <= 1)) v.push_back("threshold must lie in [0, 1]");
  if (!(val_fraction > 0 && val_fraction < 1)) v.push_back("val_fraction must lie in (0, 1)");
  if (threads == 0) v.push_back("threads must be positive");
  return v;
}

void TrainConfig::validate() const {
  const auto v = violations();
  if (v.empty()) return;
  std::string msg = "invalid train config:";
  for (const auto& s : v) msg += "\n  - " + s;
  throw ConfigError(msg);
}

Split stratified_split(const std::vector<int>& labels, double val_fraction, std::uint64_t seed) {
  std::vector<std::size_t> by_class[2];
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ValidationError("split: labels must be 0 or 1");
    by_class[labels[i]].push_back(i);
  }
  Rng rng = seeded(seed, kSplitStream);
  Split s;
  for (auto& cls : by_class) {
    std::shuffle(cls.begin(), cls.end(), rng);
    const auto n_val =
        static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(cls.size())));
    s.val.insert(s.val.end(), cls.begin(), cls.begin() + static_cast<std::ptrdiff_t>(n_val));
    s.train.insert(s.train.end(), cls.begin() + static_cast<std::ptrdiff_t>(n_val), cls.end());
  }
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.train.begin(), s.train.end());
  if (s.train.empty() || s.val.empty()) {
    throw ValidationError("split: " + std::to_string(labels.size()) +
                          " pairs are too few for a train/validation split");
  }
  return s;
}

namespace {

template <typename T>
std::vector<std::vector<T>> snapshot(const Model<T>& m) {
  std::vector<std::vector<T>> out;
  for (const auto& [name, t] : m.named_parameters()) out.emplace_back(t.data().begin(), t.data().end());
  return out;
}

template <typename T>
void restore(Model<T>& m, const std::vector<std::vector<T>>& state) {
  auto params = m.named_parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    std::copy(state[k].begin(), state[k].end(), params[k].second.mutable_data().begin());
  }
}

template <typename T>
double sgd_step(Model<T>& m, Adam<T>& opt, const Batch<T>& b, ViewMode mode, double lr) {
  Tape<T> tape;
  Recording<T> rec(tape);
  const auto loss = ops::bce_with_logits(forward_batch(m, b, mode), b.labels);
  const double value = static_cast<double>(loss.item());
  if (!std::isfinite(value)) throw NumericError("training loss is not finite");
  opt.zero_grad();
  tape.backward(loss);
  opt.step(lr);
  return value;
}

}  // namespace

template <typename T>
TrainResult train(Model<T>& m, const SyntheticPairSet& data, const TrainConfig& tc, ViewMode mode,
                  const std::function<void(const HistoryRow&)>& on_epoch) {
  tc.validate();
  const Split split = stratified_split(data.labels(), tc.val_fraction, tc.seed);
  Adam<T> opt(m.named_parameters(), AdamOptions{0.9, 0.999, 1e-8, tc.weight_decay});
  PlateauScheduler plateau(tc.plateau_factor, tc.plateau_patience);
  EarlyStopping stopper(tc.early_stop_patience);
  Rng shuffle_rng = seeded(tc.seed, kShuffleStream);
  Rng aug_rng = seeded(tc.seed, kAugmentStream);
  std::uniform_int_distribution<int> pick_aug(0, 5);  // 0 = identity

  TrainResult result;
  double lr = tc.lr;
  auto best = snapshot(m);
  std::vector<std::size_t> order = split.train;
  EvalOptions eval_opts{tc.threshold, std::max<std::size_t>(tc.batch, 64), tc.threads};

  for (std::size_t epoch = 1; epoch <= tc.max_epochs; ++epoch) {
    HistoryRow row;
    row.epoch = epoch;
    row.lr = lr;
    try {
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      double loss_sum = 0;
      for (std::size_t lo = 0; lo < order.size(); lo += tc.batch) {
        const std::size_t hi = std::min(order.size(), lo + tc.batch);
        std::vector<ImagePair> augmented;
        std::vector<const ImagePair*> ptrs;
        augmented.reserve(hi - lo);
        for (std::size_t i = lo; i < hi; ++i) {
          const ImagePair& src = data.pairs[order[i]];
          const int a = tc.augment ? pick_aug(aug_rng) : 0;
          if (a == 0) {
            ptrs.push_back(&src);
          } else {
            augmented.push_back(augment(src, data.size, static_cast<Aug>(a - 1)));
            ptrs.push_back(&augmented.back());
          }
        }
        const auto batch = batch_from<T>(ptrs, data.size);
        loss_sum += sgd_step(m, opt, batch, mode, lr) * static_cast<double>(hi - lo);
      }
      row.train_loss = loss_sum / static_cast<double>(order.size());
      const Metrics val = evaluate(m, data, mode, eval_opts, split.val);
      row.val_loss = val.loss;
      row.val_auc = val.auc;
      row.val_acc = val.accuracy;
      if (!std::isfinite(row.train_loss) || !std::isfinite(row.val_loss)) {
        throw NumericError("loss is not finite");
      }
    } catch (const NumericError& e) {
      throw NumericError("epoch " + std::to_string(epoch) + ": " + e.what());
    }
    result.history.push_back(row);
    if (on_epoch) on_epoch(row);

    const bool stop = stopper.step(row.val_loss);
    if (stopper.improved()) {
      best = snapshot(m);
      result.best_epoch = epoch;
    }
    plateau.step(row.val_loss, lr);
    if (stop) {
      result.stopped_early = true;
      break;
    }
  }
  restore(m, best);
  return result;
}

template <typename T>
std::vector<double> train_steps(Model<T>& m, const SyntheticPairSet& data,
                                const std::vector<std::size_t>& idx, std::size_t steps, double lr,
                                ViewMode mode, double weight_decay) {
  Adam<T> opt(m.named_parameters(), AdamOptions{0.9, 0.999, 1e-8, weight_decay});
  const auto batch = make_batch<T>(data, idx);
  std::vector<double> losses;
  losses.reserve(steps + 1);
  for (std::size_t s = 0; s < steps; ++s) losses.push_back(sgd_step(m, opt, batch, mode, lr));
  NoRecording<T> off;
  losses.push_back(
      static_cast<double>(ops::bce_with_logits(forward_batch(m, batch, mode), batch.labels).item()));
  return losses;
}

std::string history_csv(const std::vector<HistoryRow>& rows) {
  std::string out = "epoch,train_loss,val_loss,val_auc,val_acc,lr\n";
  char line[256];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%zu,%.6f,%.6f,%.6f,%.6f,%.6f\n", r.epoch, r.train_loss,
                  r.val_loss, r.val_auc, r.val_acc, r.lr);
    out += line;
  }
  return out;
}

void write_history_csv(const std::filesystem::path& path, const std::vector<HistoryRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << history_csv(rows);
  if (!out) throw IoError("write failed for " + path.string());
}

#define MVSWIN_INSTANTIATE(T)                                                                  \
  template Batch<T> make_batch<T>(const SyntheticPairSet&, const std::vector<std::size_t>&);   \
  template Tensor<T> forward_batch(const Model<T>&, const Batch<T>&, ViewMode);                \
  template Metrics evaluate(const Model<T>&, const SyntheticPairSet&, ViewMode,                \
                            const EvalOptions&, const std::vector<std::size_t>&);              \
  template class Adam<T>;                                                                      \
  template TrainResult train(Model<T>&, const SyntheticPairSet&, const TrainConfig&, ViewMode, \
                             const std::function<void(const HistoryRow&)>&);                   \
  template std::vector<double> train_steps(Model<T>&, const SyntheticPairSet&,                 \
                                           const std::vector<std::size_t>&, std::size_t,       \
                                           double, ViewMode, double);

MVSWIN_INSTANTIATE(float)
MVSWIN_INSTANTIATE(double)

#undef MVSWIN_INSTANTIATE

}  // namespace mvswin
