#include "mvswin/init.hpp"

#include <cmath>

namespace mvswin {

template <typename T>
Tensor<T> trunc_normal(Shape shape, double stddev, Rng& rng, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) {
    double x = dist(rng);
    while (std::abs(x) > 2.0 * stddev) x = dist(rng);
    v = static_cast<T>(x);
  }
  return Tensor<T>(std::move(shape), std::move(values), requires_grad);
}

template <typename T>
Tensor<T> normal(Shape shape, double mean, double stddev, Rng& rng, bool requires_grad) {
  std::normal_distribution<double> dist(mean, stddev);
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(values), requires_grad);
}

template Tensor<float> trunc_normal(Shape, double, Rng&, bool);
template Tensor<double> trunc_normal(Shape, double, Rng&, bool);
template Tensor<float> normal(Shape, double, double, Rng&, bool);
template Tensor<double> normal(Shape, double, double, Rng&, bool);

}  // namespace mvswin
