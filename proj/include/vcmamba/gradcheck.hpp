#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "vcmamba/tensor.hpp"

namespace vcm {

template <typename T>
struct GradCheckReport {
  T max_rel_error = T(0);
  T max_abs_error = T(0);
  std::size_t coordinates = 0;
  bool passed = true;
  // "<input index>:<flat coordinate>" of the worst offender.
  std::string worst;
};

struct GradCheckOptions {
  // Inputs with more coordinates than this are checked on a seeded random
  // subset. Zero means every coordinate.
  std::size_t max_coordinates_per_input = 0;
  std::uint64_t seed = 0;
  // Denominator floor so that near-zero gradients are compared absolutely.
  double abs_floor = 1e-6;
};

// Compares reverse-mode gradients of the scalar `f` against central
// differences with respect to every tensor in `inputs`. `f` must rebuild its
// graph from the current input values on every call.
template <typename T>
GradCheckReport<T> finite_diff_check(const std::function<Tensor<T>()>& f,
                                     std::vector<Tensor<T>> inputs, T step,
                                     T tolerance,
                                     const GradCheckOptions& options = {}) {
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  Tensor<T> loss = f();
  if (loss.numel() != 1) {
    throw ShapeError("finite_diff_check: function must return a scalar, got " +
                     shape_str(loss.shape()));
  }
  backward(loss);

  GradCheckReport<T> report;
  std::mt19937_64 rng(options.seed);
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& in = inputs[k];
    std::vector<T> analytic(in.numel(), T(0));
    if (in.has_grad()) {
      std::copy(in.grad().begin(), in.grad().end(), analytic.begin());
    }
    std::vector<std::size_t> coords(in.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coordinates_per_input > 0 &&
        coords.size() > options.max_coordinates_per_input) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coordinates_per_input);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t idx : coords) {
      const T saved = in[idx];
      in[idx] = saved + step;
      const T plus = f().item();
      in[idx] = saved - step;
      const T minus = f().item();
      in[idx] = saved;
      const T numeric = (plus - minus) / (T(2) * step);
      const T abs_err = std::abs(numeric - analytic[idx]);
      const T denom = std::max({std::abs(numeric), std::abs(analytic[idx]),
                                static_cast<T>(options.abs_floor)});
      const T rel = abs_err / denom;
      ++report.coordinates;
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      if (!(rel <= report.max_rel_error)) {
        report.max_rel_error = rel;
        report.worst = std::to_string(k) + ":" + std::to_string(idx);
      }
    }
  }
  report.passed = report.max_rel_error < tolerance;
  return report;
}

}  // namespace vcm
