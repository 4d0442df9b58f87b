#include "pointnorm/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace pointnorm {

namespace {

template <typename T>
double evaluate(const std::function<Tensor<T>()>& f, std::size_t input, std::size_t index) {
  NoGradGuard guard;
  const Tensor<T> out = f();
  if (out.numel() != 1) throw ContractError("grad_check: function must return a scalar");
  const double v = static_cast<double>(out.item());
  if (!std::isfinite(v)) {
    throw NumericError("grad_check: non-finite value probing input " + std::to_string(input) + " coordinate " +
                       std::to_string(index));
  }
  return v;
}

}  // namespace

template <typename T>
GradCheckReport grad_check(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> inputs,
                           GradCheckOptions options) {
  if (options.step <= 0.0) throw ArgumentError("grad_check: step must be positive");
  for (auto& x : inputs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }
  const Tensor<T> out = f();
  if (out.numel() != 1) throw ContractError("grad_check: function must return a scalar");
  if (!std::isfinite(static_cast<double>(out.item()))) throw NumericError("grad_check: non-finite value at base point");
  backward(out);

  GradCheckReport report;
  const T h = static_cast<T>(options.step);
  for (std::size_t in = 0; in < inputs.size(); ++in) {
    auto& x = inputs[in];
    std::vector<T> analytic(x.numel(), T(0));
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
    auto values = x.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T original = values[i];
      auto probe = [&](T offset) {
        values[i] = original + offset;
        try {
          const double v = evaluate(f, in, i);
          values[i] = original;
          return v;
        } catch (...) {
          values[i] = original;
          throw;
        }
      };
      const double plus = probe(h);
      const double minus = probe(-h);
      const double centre = evaluate(f, in, i);
      const double numeric = (plus - minus) / (2.0 * options.step);

      // Kink detection: the one-sided slopes disagree and the disagreement
      // does not shrink with the step.
      const double jump = std::abs((plus - centre) - (centre - minus)) / options.step;
      const double scale = std::max({1.0, std::abs(numeric)});
      if (jump > 1e-3 * scale) {
        const T h2 = h / T(10);
        const double plus2 = probe(h2);
        const double minus2 = probe(-h2);
        const double jump2 = std::abs((plus2 - centre) - (centre - minus2)) / (options.step / 10.0);
        if (jump2 > 0.5 * jump) {
          report.skipped.push_back({in, i});
          continue;
        }
      }
      const double a = static_cast<double>(analytic[i]);
      const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
      report.max_rel_error = std::max(report.max_rel_error, std::abs(a - numeric) / denom);
      ++report.checked;
    }
  }
  report.passed = report.max_rel_error <= options.tolerance;
  return report;
}

template <typename T>
GradCheckReport grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, Tensor<T> x,
                           GradCheckOptions options) {
  return grad_check<T>(std::function<Tensor<T>()>([&f, x]() { return f(x); }), std::vector<Tensor<T>>{x},
                       options);
}

template GradCheckReport grad_check<float>(const std::function<Tensor<float>()>&, std::vector<Tensor<float>>,
                                           GradCheckOptions);
template GradCheckReport grad_check<double>(const std::function<Tensor<double>()>&, std::vector<Tensor<double>>,
                                            GradCheckOptions);
template GradCheckReport grad_check<float>(const std::function<Tensor<float>(const Tensor<float>&)>&,
                                           Tensor<float>, GradCheckOptions);
template GradCheckReport grad_check<double>(const std::function<Tensor<double>(const Tensor<double>&)>&,
                                            Tensor<double>, GradCheckOptions);

}  // namespace pointnorm
