#pragma once

#include <random>

#include "mvswin/tensor.hpp"

namespace mvswin {

using Rng = std::mt19937_64;

/// Normal(0, stddev) redrawn until it falls inside +-2 stddev.
template <typename T>
Tensor<T> trunc_normal(Shape shape, double stddev, Rng& rng, bool requires_grad = true);

template <typename T>
Tensor<T> normal(Shape shape, double mean, double stddev, Rng& rng, bool requires_grad = true);

}  // namespace mvswin
