#include "mvswin/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mvswin/ops.hpp"

namespace mvswin {

namespace {

struct Eval {
  double value;
  std::uint64_t relu_signs;
};

Eval evaluate(const std::function<Tensor<double>()>& loss_fn) {
  NoRecording<double> off;
  ops::relu_trace_begin();
  double v = 0;
  try {
    v = loss_fn().item();
  } catch (...) {
    ops::relu_trace_end();
    throw;
  }
  const auto signs = ops::relu_trace_end();
  if (!std::isfinite(v)) throw NumericError("grad_check: loss evaluated to a non-finite value");
  return {v, signs};
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor<double>()>& loss_fn,
                           const std::vector<NamedTensor>& params, double eps,
                           std::size_t max_probes, std::uint64_t seed) {
  if (!(eps > 0)) throw ValidationError("grad_check: eps must be positive");
  for (const auto& [name, p] : params) {
    auto t = p;
    t.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    Recording<double> rec(tape);
    const auto loss = loss_fn();
    if (!std::isfinite(loss.item())) {
      throw NumericError("grad_check: loss evaluated to a non-finite value");
    }
    tape.backward(loss);
    tape.reset();
  }
  for (const auto& [name, p] : params) {
    if (p.has_grad()) {
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      analytic.emplace_back(p.numel(), 0.0);
    }
  }

  std::size_t total = 0;
  for (const auto& [name, p] : params) total += p.numel();

  const std::uint64_t base_signs = evaluate(loss_fn).relu_signs;
  std::mt19937_64 rng(seed);
  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto tensor = params[pi].second;
    const std::size_t n = tensor.numel();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), 0);
    std::size_t take = n;
    if (total > max_probes) {
      const double share = static_cast<double>(max_probes) * static_cast<double>(n) /
                           static_cast<double>(total);
      take = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(share)), 1, n);
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(take);
      std::sort(coords.begin(), coords.end());
    }
    auto values = tensor.mutable_data();
    for (auto c : coords) {
      const double saved = values[c];
      double step = eps;
      bool smooth = false;
      double numeric = 0;
      for (int attempt = 0; attempt < 4 && !smooth; ++attempt, step /= 10) {
        values[c] = saved + step;
        const auto up = evaluate(loss_fn);
        values[c] = saved - step;
        const auto down = evaluate(loss_fn);
        values[c] = saved;
        smooth = up.relu_signs == base_signs && down.relu_signs == base_signs;
        numeric = (up.value - down.value) / (2.0 * step);
      }
      if (!smooth) {
        ++report.kink_skips;
        continue;
      }
      const double ad = analytic[pi][c];
      const double err =
          std::abs(ad - numeric) / std::max({1.0, std::abs(ad), std::abs(numeric)});
      ++report.probes;
      if (report.probes == 1 || err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_param = params[pi].first;
        report.worst_index = c;
      }
    }
  }
  return report;
}

}  // namespace mvswin
