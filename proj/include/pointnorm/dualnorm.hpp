#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "pointnorm/tensor.hpp"

// Point Normalization (grouped points normalized toward their sampled point)
// and Reverse Point Normalization (sampled point normalized toward its
// group), with Local/Global choices for the mean and the standard deviation.
//
// Batched layout throughout: x_s is [B, m, d], x_g is [B, m, k, d]. Global
// statistics are per cloud (one value per batch entry), never across the
// batch.
namespace pointnorm {

enum class Scope { Local, Global };

struct StatsMode {
  Scope mean = Scope::Local;
  Scope std = Scope::Global;

  // "LMGS", "LMLS", "GMLS", "GMGS" (case-insensitive).
  static StatsMode parse(std::string_view name);
  std::string name() const;
  bool operator==(const StatsMode&) const = default;
};

inline constexpr StatsMode kLMGS{Scope::Local, Scope::Global};
inline constexpr StatsMode kLMLS{Scope::Local, Scope::Local};
inline constexpr StatsMode kGMLS{Scope::Global, Scope::Local};
inline constexpr StatsMode kGMGS{Scope::Global, Scope::Global};

inline constexpr double kNormEps = 1e-5;

// Learnable scale (init 1) and shift (init 0), per channel or a single scalar.
template <typename T>
struct NormAffine {
  Tensor<T> alpha;
  Tensor<T> beta;
  double eps = kNormEps;

  static NormAffine create(std::size_t channels, bool scalar = false);
};

// PN mean: Local -> x_s itself as [B, m, 1, d]; Global -> mean over m and d, [B, 1, 1, 1].
template <typename T>
Tensor<T> mean_for_pn(const Tensor<T>& x_s, Scope scope);

// PN std: RMS of (x_g - mu_s). Local -> over the k neighbors, [B, m, 1, d];
// Global -> over k, m and d, [B, 1, 1, 1].
template <typename T>
Tensor<T> std_for_pn(const Tensor<T>& x_g, const Tensor<T>& mu_s, Scope scope);

// alpha * (x_g - mu_s) / (sigma_1 + eps) + beta. When `sigma_out` is given it
// receives sigma_1.
template <typename T>
Tensor<T> point_normalize(const Tensor<T>& x_g, const Tensor<T>& x_s, const NormAffine<T>& affine, StatsMode mode,
                          Tensor<T>* sigma_out = nullptr);

// RPN mean: Local -> mean over the k neighbors, [B, m, d]; Global -> mean over k, m, d, [B, 1, 1].
template <typename T>
Tensor<T> mean_for_rpn(const Tensor<T>& x_g, Scope scope);

// RPN std: Local -> sqrt(|x_s - mu_g| + eps) elementwise, [B, m, d];
// Global -> RMS of (x_s - mu_g) over the cloud, [B, 1, 1].
template <typename T>
Tensor<T> std_for_rpn(const Tensor<T>& x_s, const Tensor<T>& mu_g, Scope scope, double eps = kNormEps);

// alpha * (x_s - mu_g) / (sigma_2 + eps) + beta.
template <typename T>
Tensor<T> reverse_point_normalize(const Tensor<T>& x_s, const Tensor<T>& x_g, const NormAffine<T>& affine,
                                  StatsMode mode);

// A disengaged affine switches that half off (ablation): the raw tensor is
// passed through instead.
template <typename T>
struct DualNormParams {
  std::optional<NormAffine<T>> pn;
  std::optional<NormAffine<T>> rpn;
};

struct DualNormTrace {
  double sigma1 = 0.0;      // mean of sigma_1 over its entries
  double alpha_norm = 0.0;  // mean |alpha_1|
  bool has_pn = false;
};

// Both halves use statistics of the un-normalized inputs. Output
// [B, m, k, 2d]: normalized x_g first, then normalized x_s broadcast over k.
template <typename T>
Tensor<T> dualnorm_apply(const Tensor<T>& x_s, const Tensor<T>& x_g, const DualNormParams<T>& params, StatsMode mode,
                         DualNormTrace* trace = nullptr);

enum class Regime { PullApart, PushTogether, Neutral };
std::string_view regime_name(Regime regime);

struct DeltaReport {
  double sigma1 = 0.0;
  double alpha_norm = 0.0;
  double delta = 0.0;           // alpha_norm / sigma1
  double measured_ratio = 0.0;  // std(after) / std(before)
  Regime regime = Regime::Neutral;
  bool degenerate = false;      // sigma1 == 0: constant group
  // measured_ratio within 1e-3 relative of delta.
  bool consistent = false;
};

// Push/pull diagnostic for global-std PN with a scalar alpha. Standard
// deviations are population std over all entries.
DeltaReport delta_report(std::span<const double> x_g_before, std::span<const double> x_g_after, double alpha,
                         double sigma1, double neutral_tolerance = 1e-12);

// Delta = alpha_norm / sigma1 above, below or (within the relative tolerance) at 1.
Regime classify_regime(double alpha_norm, double sigma1, double neutral_tolerance = 1e-12);

}  // namespace pointnorm
