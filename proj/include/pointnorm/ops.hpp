#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "pointnorm/tensor.hpp"

// Differentiable operations. Binary elementwise ops broadcast with numpy
// rules (right-aligned, extent-1 axes expand). Every op here is covered by
// the finite-difference suite.
namespace pointnorm {

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s);
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T s);
template <typename T>
Tensor<T> neg(const Tensor<T>& x);
template <typename T>
Tensor<T> square(const Tensor<T>& x);
template <typename T>
Tensor<T> sqrt(const Tensor<T>& x);
// Subgradient 0 at x == 0.
template <typename T>
Tensor<T> abs(const Tensor<T>& x);
template <typename T>
Tensor<T> relu(const Tensor<T>& x);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x, const std::vector<std::size_t>& axes, bool keepdims = true);
template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x, const std::vector<std::size_t>& axes, bool keepdims = true);
// sqrt(mean(x^2)) over `axes`. The gradient at an all-zero slice is taken as 0.
template <typename T>
Tensor<T> reduce_rms(const Tensor<T>& x, const std::vector<std::size_t>& axes, bool keepdims = true);

// Population statistics (divide by count). `std` is the RMS of the centered
// values, so a constant slice gives exactly 0.
template <typename T>
struct MeanStd {
  Tensor<T> mean;
  Tensor<T> std;
};
template <typename T>
MeanStd<T> reduce_mean_std(const Tensor<T>& x, const std::vector<std::size_t>& axes,
                           bool keepdims = false);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
// Expands extent-1 axes (right-aligned) to `shape`.
template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& shape);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);

// x: [B, N, d]. indices holds numel(index_shape) entries, index_shape[0] == B,
// each < N. Result: index_shape + [d]. Not differentiable wrt the indices.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> indices, const Shape& index_shape);

// y[..., j] = sum_i x[..., i] W[i, j] + b[j]. `bias` may be undefined.
template <typename T>
Tensor<T> fully_connected(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

// y[..., c] = x[..., c] * scale[c] + shift[c]; scale/shift have d entries or one.
template <typename T>
Tensor<T> channel_affine(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift);

struct BatchNormOptions {
  bool training = true;
  double momentum = 0.1;
  double eps = 1e-5;
};

// Per-channel batch normalization over every axis but the last. In training
// mode uses batch statistics and updates the running buffers in place
// (running_var with the unbiased estimate); in eval mode uses the buffers.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, BatchNormOptions options);

// Drops `axis`; gradient flows to the first maximal entry.
template <typename T>
Tensor<T> max_pool_axis(const Tensor<T>& x, std::size_t axis);

// Inverted dropout. Identity when !training or p == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, std::mt19937_64& rng);

// logits: [B, C]. Target = (1 - s) one_hot + s / C; returns the batch mean of
// the cross-entropy against that target.
template <typename T>
Tensor<T> label_smoothed_ce(const Tensor<T>& logits, std::span<const std::int64_t> labels, double smoothing);

// Throws NumericError naming `what` and the first bad flat index.
template <typename T>
void check_finite(const Tensor<T>& x, std::string_view what);

}  // namespace pointnorm
