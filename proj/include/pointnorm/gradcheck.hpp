#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "pointnorm/tensor.hpp"

namespace pointnorm {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Relative errors use max(|analytic|, |numeric|, floor) as denominator so
  // exactly-zero gradients do not divide by zero.
  double floor = 1e-3;
};

struct SkippedCoordinate {
  std::size_t input = 0;
  std::size_t index = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  // Coordinates where the function has a kink at the probe point (e.g. a
  // max-pool tie); central differences are meaningless there.
  std::vector<SkippedCoordinate> skipped;
  bool passed = true;
};

// Compares autodiff gradients of the scalar `f()` with central differences
// (f(x+h) - f(x-h)) / 2h over every coordinate of every tensor in `inputs`.
// `f` must read the inputs' current values; they are perturbed in place and
// restored afterwards.
template <typename T>
GradCheckReport grad_check(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> inputs,
                           GradCheckOptions options = {});

// Single-input form: `f` receives the (perturbed) input tensor.
template <typename T>
GradCheckReport grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, Tensor<T> x,
                           GradCheckOptions options = {});

}  // namespace pointnorm
