#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mvswin/tensor.hpp"

namespace mvswin {

using NamedTensor = std::pair<std::string, Tensor<double>>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t probes = 0;
  std::size_t kink_skips = 0;  // coordinates sitting on a relu kink even at the smallest step
  std::string worst_param;
  std::size_t worst_index = 0;
};

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// (f(p + eps) - f(p - eps)) / (2 eps) on sampled coordinates of `params`.
///
/// Error per coordinate is |g_ad - g_fd| / max(1, |g_ad|, |g_fd|). When the
/// parameters hold more than `max_probes` coordinates, probes are spread over
/// every tensor in proportion to its size (at least one each) with a seeded
/// draw. `loss_fn` must be deterministic and return a scalar.
///
/// A probe whose +/- step flips the sign of any relu input straddles a kink,
/// where the one-sided slopes differ; such probes retry with eps / 10 (down to
/// eps / 1000) and are counted in kink_skips if they still straddle.
GradCheckReport grad_check(const std::function<Tensor<double>()>& loss_fn,
                           const std::vector<NamedTensor>& params, double eps = 1e-5,
                           std::size_t max_probes = 200, std::uint64_t seed = 0);

}  // namespace mvswin
