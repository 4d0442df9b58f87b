#include "pointnorm/dualnorm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>

#include "pointnorm/ops.hpp"

namespace pointnorm {

namespace {

template <typename T>
void check_pair(const Tensor<T>& x_s, const Tensor<T>& x_g, std::string_view op) {
  if (x_s.rank() != 3 || x_g.rank() != 4 || x_s.dim(0) != x_g.dim(0) || x_s.dim(1) != x_g.dim(1) ||
      x_s.dim(2) != x_g.dim(3)) {
    throw DimensionError(std::string(op) + ": x_s " + to_string(x_s.shape()) + " and x_g " + to_string(x_g.shape()) +
                         " are not [B, m, d] / [B, m, k, d]");
  }
}

template <typename T>
Tensor<T> pn_sigma(const Tensor<T>& deviation, Scope scope) {
  return scope == Scope::Local ? reduce_rms(deviation, {2}, true) : reduce_rms(deviation, {1, 2, 3}, true);
}

}  // namespace

StatsMode StatsMode::parse(std::string_view name) {
  std::string upper(name);
  std::transform(upper.begin(), upper.end(), upper.begin(), [](unsigned char c) { return std::toupper(c); });
  if (upper == "LMGS") return kLMGS;
  if (upper == "LMLS") return kLMLS;
  if (upper == "GMLS") return kGMLS;
  if (upper == "GMGS") return kGMGS;
  throw ConfigError("unknown stats mode '" + std::string(name) + "' (expected LMGS, LMLS, GMLS or GMGS)");
}

std::string StatsMode::name() const {
  std::string out;
  out += mean == Scope::Local ? "LM" : "GM";
  out += std == Scope::Local ? "LS" : "GS";
  return out;
}

template <typename T>
NormAffine<T> NormAffine<T>::create(std::size_t channels, bool scalar) {
  const std::size_t n = scalar ? 1 : channels;
  return {Tensor<T>::full({n}, T(1), true), Tensor<T>::full({n}, T(0), true), kNormEps};
}

template <typename T>
Tensor<T> mean_for_pn(const Tensor<T>& x_s, Scope scope) {
  if (x_s.rank() != 3) throw DimensionError("mean_for_pn: x_s must be [B, m, d], got " + to_string(x_s.shape()));
  const std::size_t b = x_s.dim(0);
  if (scope == Scope::Local) return reshape(x_s, {b, x_s.dim(1), 1, x_s.dim(2)});
  return reshape(reduce_mean(x_s, {1, 2}, true), {b, 1, 1, 1});
}

template <typename T>
Tensor<T> std_for_pn(const Tensor<T>& x_g, const Tensor<T>& mu_s, Scope scope) {
  if (x_g.rank() != 4) throw DimensionError("std_for_pn: x_g must be [B, m, k, d], got " + to_string(x_g.shape()));
  return pn_sigma(sub(x_g, mu_s), scope);
}

template <typename T>
Tensor<T> point_normalize(const Tensor<T>& x_g, const Tensor<T>& x_s, const NormAffine<T>& affine, StatsMode mode,
                          Tensor<T>* sigma_out) {
  check_pair(x_s, x_g, "point_normalize");
  check_finite(x_g, "point_normalize x_g");
  check_finite(x_s, "point_normalize x_s");
  const auto mu = mean_for_pn(x_s, mode.mean);
  const auto deviation = sub(x_g, mu);
  const auto sigma = pn_sigma(deviation, mode.std);
  if (sigma_out) *sigma_out = sigma;
  const auto z = div(deviation, add_scalar(sigma, static_cast<T>(affine.eps)));
  return channel_affine(z, affine.alpha, affine.beta);
}

template <typename T>
Tensor<T> mean_for_rpn(const Tensor<T>& x_g, Scope scope) {
  if (x_g.rank() != 4) throw DimensionError("mean_for_rpn: x_g must be [B, m, k, d], got " + to_string(x_g.shape()));
  if (scope == Scope::Local) return reduce_mean(x_g, {2}, false);
  return reshape(reduce_mean(x_g, {1, 2, 3}, true), {x_g.dim(0), 1, 1});
}

template <typename T>
Tensor<T> std_for_rpn(const Tensor<T>& x_s, const Tensor<T>& mu_g, Scope scope, double eps) {
  const auto deviation = sub(x_s, mu_g);
  if (scope == Scope::Local) return sqrt(add_scalar(abs(deviation), static_cast<T>(eps)));
  return reduce_rms(deviation, {1, 2}, true);
}

template <typename T>
Tensor<T> reverse_point_normalize(const Tensor<T>& x_s, const Tensor<T>& x_g, const NormAffine<T>& affine,
                                  StatsMode mode) {
  check_pair(x_s, x_g, "reverse_point_normalize");
  check_finite(x_g, "reverse_point_normalize x_g");
  check_finite(x_s, "reverse_point_normalize x_s");
  const auto mu = mean_for_rpn(x_g, mode.mean);
  const auto deviation = sub(x_s, mu);
  const auto sigma = std_for_rpn(x_s, mu, mode.std, affine.eps);
  const auto z = div(deviation, add_scalar(sigma, static_cast<T>(affine.eps)));
  return channel_affine(z, affine.alpha, affine.beta);
}

template <typename T>
Tensor<T> dualnorm_apply(const Tensor<T>& x_s, const Tensor<T>& x_g, const DualNormParams<T>& params, StatsMode mode,
                         DualNormTrace* trace) {
  check_pair(x_s, x_g, "dualnorm_apply");
  const std::size_t b = x_g.dim(0), m = x_g.dim(1), k = x_g.dim(2), d = x_g.dim(3);
  Tensor<T> grouped = x_g;
  if (params.pn) {
    Tensor<T> sigma;
    grouped = point_normalize(x_g, x_s, *params.pn, mode, &sigma);
    if (trace) {
      const auto sv = sigma.values();
      trace->sigma1 = std::accumulate(sv.begin(), sv.end(), 0.0) / static_cast<double>(sv.size());
      const auto av = params.pn->alpha.values();
      double total = 0;
      for (T a : av) total += std::abs(static_cast<double>(a));
      trace->alpha_norm = total / static_cast<double>(av.size());
      trace->has_pn = true;
    }
  }
  Tensor<T> sampled = params.rpn ? reverse_point_normalize(x_s, x_g, *params.rpn, mode) : x_s;
  sampled = broadcast_to(reshape(sampled, {b, m, 1, d}), {b, m, k, d});
  return concat<T>({grouped, sampled}, 3);
}

std::string_view regime_name(Regime regime) {
  switch (regime) {
    case Regime::PullApart:
      return "pull-apart";
    case Regime::PushTogether:
      return "push-together";
    case Regime::Neutral:
      return "neutral";
  }
  return "neutral";
}

namespace {
double population_std(std::span<const double> v) {
  if (v.empty()) return 0.0;
  const double mu = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double acc = 0;
  for (double x : v) acc += (x - mu) * (x - mu);
  return std::sqrt(acc / static_cast<double>(v.size()));
}
}  // namespace

DeltaReport delta_report(std::span<const double> x_g_before, std::span<const double> x_g_after, double alpha,
                         double sigma1, double neutral_tolerance) {
  DeltaReport report;
  report.sigma1 = sigma1;
  report.alpha_norm = std::abs(alpha);
  const double before = population_std(x_g_before);
  const double after = population_std(x_g_after);
  report.measured_ratio = before > 0 ? after / before : 0.0;
  if (sigma1 <= 0.0) {
    report.degenerate = true;
    return report;
  }
  report.delta = report.alpha_norm / sigma1;
  report.consistent = std::abs(report.measured_ratio - report.delta) <= 1e-3 * report.delta;
  report.regime = classify_regime(report.alpha_norm, sigma1, neutral_tolerance);
  return report;
}

Regime classify_regime(double alpha_norm, double sigma1, double neutral_tolerance) {
  const double gap = alpha_norm - sigma1;
  if (std::abs(gap) <= neutral_tolerance * std::max(alpha_norm, sigma1)) return Regime::Neutral;
  return gap > 0 ? Regime::PullApart : Regime::PushTogether;
}

#define POINTNORM_INSTANTIATE_DUALNORM(T)                                                                          \
  template struct NormAffine<T>;                                                                                  \
  template Tensor<T> mean_for_pn<T>(const Tensor<T>&, Scope);                                                     \
  template Tensor<T> std_for_pn<T>(const Tensor<T>&, const Tensor<T>&, Scope);                                    \
  template Tensor<T> point_normalize<T>(const Tensor<T>&, const Tensor<T>&, const NormAffine<T>&, StatsMode,      \
                                        Tensor<T>*);                                                              \
  template Tensor<T> mean_for_rpn<T>(const Tensor<T>&, Scope);                                                    \
  template Tensor<T> std_for_rpn<T>(const Tensor<T>&, const Tensor<T>&, Scope, double);                           \
  template Tensor<T> reverse_point_normalize<T>(const Tensor<T>&, const Tensor<T>&, const NormAffine<T>&,         \
                                                StatsMode);                                                       \
  template Tensor<T> dualnorm_apply<T>(const Tensor<T>&, const Tensor<T>&, const DualNormParams<T>&, StatsMode,  \
                                       DualNormTrace*);

POINTNORM_INSTANTIATE_DUALNORM(float)
POINTNORM_INSTANTIATE_DUALNORM(double)

#undef POINTNORM_INSTANTIATE_DUALNORM

}  // namespace pointnorm
