#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "vcmamba/tensor.hpp"

namespace vcm {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }

  // Resamples until the draw lands within `bound` standard deviations.
  double trunc_normal(double stddev, double bound = 2.0) {
    for (;;) {
      const double v = normal();
      if (std::abs(v) <= bound) return v * stddev;
    }
  }

  std::uint64_t next() { return engine_(); }
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

template <typename T>
Tensor<T> random_normal(Shape shape, Rng& rng, double stddev = 1.0) {
  std::vector<T> v(shape_numel(shape));
  for (auto& e : v) e = static_cast<T>(rng.normal(0.0, stddev));
  return Tensor<T>::from(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> random_uniform(Shape shape, Rng& rng, double lo, double hi) {
  std::vector<T> v(shape_numel(shape));
  for (auto& e : v) e = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>::from(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> trunc_normal_tensor(Shape shape, Rng& rng, double stddev) {
  std::vector<T> v(shape_numel(shape));
  for (auto& e : v) e = static_cast<T>(rng.trunc_normal(stddev));
  return Tensor<T>::from(std::move(shape), std::move(v));
}

}  // namespace vcm
