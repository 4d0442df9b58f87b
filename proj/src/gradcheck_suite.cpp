#include "pointnorm/gradcheck_suite.hpp"

#include "pointnorm/dualnorm.hpp"
#include "pointnorm/network.hpp"
#include "pointnorm/ops.hpp"
#include "pointnorm/random.hpp"

namespace pointnorm {

namespace {

using Td = Tensor<double>;

Td random(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = uniform(rng, lo, hi);
  return Td::from(shape, std::move(v), true);
}

Td signed_away_from_zero(const Shape& shape, std::mt19937_64& rng) {
  auto t = random(shape, rng, 0.2, 1.5);
  for (auto& x : t.mutable_values()) {
    if (uniform_index(rng, 2)) x = -x;
  }
  return t;
}

// Moves x_s [B, m, d] at least `margin` away from the RPN mean of x_g
// [B, m, k, d] (per group and channel, or per cloud for a global mean). The
// local RPN scale sqrt(|x_s - mu_g| + eps) is too curved near x_s == mu_g
// for central differences.
void separate_from_rpn_mean(Td& x_s, const Td& x_g, Scope scope, double margin) {
  const std::size_t m = x_g.dim(1);
  const std::size_t k = x_g.dim(2);
  const std::size_t d = x_g.dim(3);
  auto xs = x_s.mutable_values();
  const auto xg = x_g.values();
  for (std::size_t b = 0; b < x_g.dim(0); ++b) {
    double cloud_mu = 0;
    for (std::size_t i = 0; i < m * k * d; ++i) cloud_mu += xg[b * m * k * d + i];
    cloud_mu /= static_cast<double>(m * k * d);
    for (std::size_t g = 0; g < m; ++g) {
      const std::size_t row = b * m + g;
      for (std::size_t c = 0; c < d; ++c) {
        double mu = cloud_mu;
        if (scope == Scope::Local) {
          mu = 0;
          for (std::size_t j = 0; j < k; ++j) mu += xg[(row * k + j) * d + c];
          mu /= static_cast<double>(k);
        }
        const double gap = xs[row * d + c] - mu;
        if (std::abs(gap) < margin) xs[row * d + c] = mu + (gap < 0 ? -margin : margin);
      }
    }
  }
}

// sum(w * y) with fixed weights, so every output entry gets a distinct
// upstream gradient.
Td weighted(const Td& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<double> w(y.numel());
  for (auto& x : w) x = uniform(rng, 0.5, 1.5);
  return sum(mul(y, Td::from(y.shape(), std::move(w))));
}

using Builder = std::function<Td(const std::vector<Td>&)>;

GradCheckReport check(std::vector<Td> inputs, Builder build, std::uint64_t seed, GradCheckOptions options = {}) {
  auto f = [&]() { return weighted(build(inputs), seed); };
  return grad_check<double>(std::function<Td()>(f), inputs, options);
}

CheckCase make_case(std::string name, std::function<GradCheckReport(std::mt19937_64&, std::uint64_t)> body) {
  return {std::move(name), [body = std::move(body)](std::uint64_t seed) {
            std::mt19937_64 rng(seed);
            return body(rng, seed);
          }};
}

}  // namespace

std::vector<CheckCase> op_check_cases() {
  std::vector<CheckCase> cases;
  cases.push_back(make_case("add", [](auto& rng, auto seed) {
    return check({random({2, 3, 4}, rng), random({3, 1}, rng)}, [](auto& in) { return add(in[0], in[1]); }, seed);
  }));
  cases.push_back(make_case("sub", [](auto& rng, auto seed) {
    return check({random({2, 3, 4}, rng), random({4}, rng)}, [](auto& in) { return sub(in[0], in[1]); }, seed);
  }));
  cases.push_back(make_case("mul", [](auto& rng, auto seed) {
    return check({random({2, 1, 4}, rng), random({3, 4}, rng)}, [](auto& in) { return mul(in[0], in[1]); }, seed);
  }));
  cases.push_back(make_case("div", [](auto& rng, auto seed) {
    return check({random({2, 3, 4}, rng), signed_away_from_zero({2, 1, 4}, rng)},
                 [](auto& in) { return div(in[0], in[1]); }, seed);
  }));
  cases.push_back(make_case("add_scalar", [](auto& rng, auto seed) {
    return check({random({5}, rng)}, [](auto& in) { return add_scalar(in[0], 0.7); }, seed);
  }));
  cases.push_back(make_case("mul_scalar", [](auto& rng, auto seed) {
    return check({random({5}, rng)}, [](auto& in) { return mul_scalar(in[0], -1.3); }, seed);
  }));
  cases.push_back(make_case("neg", [](auto& rng, auto seed) {
    return check({random({5}, rng)}, [](auto& in) { return neg(in[0]); }, seed);
  }));
  cases.push_back(make_case("square", [](auto& rng, auto seed) {
    return check({random({2, 3}, rng)}, [](auto& in) { return square(in[0]); }, seed);
  }));
  cases.push_back(make_case("sqrt", [](auto& rng, auto seed) {
    return check({random({2, 3}, rng, 0.2, 2.0)}, [](auto& in) { return sqrt(in[0]); }, seed);
  }));
  cases.push_back(make_case("abs", [](auto& rng, auto seed) {
    return check({signed_away_from_zero({2, 3}, rng)}, [](auto& in) { return abs(in[0]); }, seed);
  }));
  cases.push_back(make_case("relu", [](auto& rng, auto seed) {
    return check({signed_away_from_zero({2, 3}, rng)}, [](auto& in) { return relu(in[0]); }, seed);
  }));
  cases.push_back(make_case("sum", [](auto& rng, auto seed) {
    return check({random({2, 3}, rng)}, [](auto& in) { return mul(sum(in[0]), sum(in[0])); }, seed);
  }));
  cases.push_back(make_case("mean", [](auto& rng, auto seed) {
    return check({random({2, 3}, rng)}, [](auto& in) { return square(mean(in[0])); }, seed);
  }));
  cases.push_back(make_case("reduce_sum", [](auto& rng, auto seed) {
    return check({random({2, 3, 4}, rng)}, [](auto& in) { return square(reduce_sum(in[0], {0, 2})); }, seed);
  }));
  cases.push_back(make_case("reduce_mean", [](auto& rng, auto seed) {
    return check({random({2, 3, 4}, rng)}, [](auto& in) { return square(reduce_mean(in[0], {1}, false)); }, seed);
  }));
  cases.push_back(make_case("reduce_rms", [](auto& rng, auto seed) {
    return check({random({2, 3, 4}, rng)}, [](auto& in) { return reduce_rms(in[0], {1, 2}); }, seed);
  }));
  cases.push_back(make_case("reduce_mean_std", [](auto& rng, auto seed) {
    return check({random({2, 3, 4}, rng)},
                 [](auto& in) {
                   auto ms = reduce_mean_std(in[0], {0, 2}, true);
                   return concat<double>({ms.mean, ms.std}, 0);
                 },
                 seed);
  }));
  cases.push_back(make_case("reshape", [](auto& rng, auto seed) {
    return check({random({2, 6}, rng)}, [](auto& in) { return square(reshape(in[0], {3, 4})); }, seed);
  }));
  cases.push_back(make_case("broadcast_to", [](auto& rng, auto seed) {
    return check({random({2, 1, 3}, rng)}, [](auto& in) { return square(broadcast_to(in[0], {2, 4, 3})); }, seed);
  }));
  cases.push_back(make_case("concat", [](auto& rng, auto seed) {
    return check({random({2, 3, 2}, rng), random({2, 3, 4}, rng)},
                 [](auto& in) { return square(concat<double>({in[0], in[1]}, 2)); }, seed);
  }));
  cases.push_back(make_case("gather_rows", [](auto& rng, auto seed) {
    std::vector<std::size_t> idx(2 * 3 * 2);
    for (auto& v : idx) v = uniform_index(rng, 5);
    idx[1] = idx[0];  // guaranteed duplicate
    return check({random({2, 5, 3}, rng)},
                 [idx](auto& in) { return square(gather_rows<double>(in[0], idx, {2, 3, 2})); }, seed);
  }));
  cases.push_back(make_case("fully_connected", [](auto& rng, auto seed) {
    return check({random({2, 3, 4}, rng), random({4, 5}, rng), random({5}, rng)},
                 [](auto& in) { return fully_connected(in[0], in[1], in[2]); }, seed);
  }));
  cases.push_back(make_case("channel_affine", [](auto& rng, auto seed) {
    return check({random({2, 3, 4}, rng), random({4}, rng), random({4}, rng), random({1}, rng), random({1}, rng)},
                 [](auto& in) {
                   return add(square(channel_affine(in[0], in[1], in[2])), channel_affine(in[0], in[3], in[4]));
                 },
                 seed);
  }));
  cases.push_back(make_case("batch_norm", [](auto& rng, auto seed) {
    auto running_mean = Td::full({4}, 0.0);
    auto running_var = Td::full({4}, 1.0);
    return check({random({3, 5, 4}, rng), random({4}, rng, 0.5, 1.5), random({4}, rng)},
                 [running_mean, running_var](auto& in) mutable {
                   return batch_norm(in[0], in[1], in[2], running_mean, running_var, {true, 0.1, 1e-5});
                 },
                 seed);
  }));
  cases.push_back(make_case("batch_norm_eval", [](auto& rng, auto seed) {
    auto running_mean = random({4}, rng);
    auto running_var = random({4}, rng, 0.5, 2.0);
    return check({random({3, 5, 4}, rng), random({4}, rng, 0.5, 1.5), random({4}, rng)},
                 [running_mean, running_var](auto& in) mutable {
                   return batch_norm(in[0], in[1], in[2], running_mean, running_var, {false, 0.1, 1e-5});
                 },
                 seed);
  }));
  cases.push_back(make_case("max_pool_axis", [](auto& rng, auto seed) {
    return check({random({2, 5, 3}, rng)}, [](auto& in) { return max_pool_axis(in[0], 1); }, seed);
  }));
  cases.push_back(make_case("dropout", [](auto& rng, auto seed) {
    return check({random({4, 6}, rng)},
                 [seed](auto& in) {
                   std::mt19937_64 mask_rng(seed);
                   return dropout(in[0], 0.3, true, mask_rng);
                 },
                 seed);
  }));
  cases.push_back(make_case("label_smoothed_ce", [](auto& rng, auto seed) {
    std::vector<std::int64_t> labels(3);
    for (auto& l : labels) l = static_cast<std::int64_t>(uniform_index(rng, 5));
    return check({random({3, 5}, rng, -2.0, 2.0)},
                 [labels](auto& in) { return label_smoothed_ce<double>(in[0], labels, 0.2); }, seed);
  }));
  return cases;
}

std::vector<CheckCase> dualnorm_check_cases() {
  std::vector<CheckCase> cases;
  for (const StatsMode mode : {kLMGS, kLMLS, kGMLS, kGMGS}) {
    for (const bool scalar : {false, true}) {
      const std::string suffix = "[" + mode.name() + (scalar ? ",scalar" : "") + "]";
      const std::size_t d = 3;
      const std::size_t a = scalar ? 1 : d;
      cases.push_back(make_case("point_normalize" + suffix, [=](auto& rng, auto seed) {
        return check({random({2, 3, 4, d}, rng), random({2, 3, d}, rng), random({a}, rng, 0.5, 1.5), random({a}, rng)},
                     [mode](auto& in) {
                       NormAffine<double> affine{in[2], in[3], kNormEps};
                       return point_normalize(in[0], in[1], affine, mode);
                     },
                     seed);
      }));
      cases.push_back(make_case("reverse_point_normalize" + suffix, [=](auto& rng, auto seed) {
        auto x_s = random({2, 3, d}, rng);
        auto x_g = random({2, 3, 4, d}, rng);
        separate_from_rpn_mean(x_s, x_g, mode.mean, 0.1);
        return check({x_s, x_g, random({a}, rng, 0.5, 1.5), random({a}, rng)},
                     [mode](auto& in) {
                       NormAffine<double> affine{in[2], in[3], kNormEps};
                       return reverse_point_normalize(in[0], in[1], affine, mode);
                     },
                     seed);
      }));
      cases.push_back(make_case("dualnorm_apply" + suffix, [=](auto& rng, auto seed) {
        auto x_s = random({2, 3, d}, rng);
        auto x_g = random({2, 3, 4, d}, rng);
        separate_from_rpn_mean(x_s, x_g, mode.mean, 0.1);
        return check({x_s, x_g, random({a}, rng, 0.5, 1.5), random({a}, rng),
                      random({a}, rng, 0.5, 1.5), random({a}, rng)},
                     [mode](auto& in) {
                       DualNormParams<double> params;
                       params.pn = NormAffine<double>{in[2], in[3], kNormEps};
                       params.rpn = NormAffine<double>{in[4], in[5], kNormEps};
                       return dualnorm_apply(in[0], in[1], params, mode);
                     },
                     seed);
      }));
    }
  }
  return cases;
}

CheckCase micro_model_check() {
  return {"micro_model", [](std::uint64_t seed) {
            ModelConfig config;
            config.name = "micro";
            config.input_points = 8;
            config.embed_dim = 4;
            config.num_classes = 2;
            config.head_widths = {6};
            config.dropout = 0.0;
            config.stages = {{4, 4, 4, 6, 1, 1}, {2, 2, 6, 8, 1, 1}};
            PointNormModel<double> model(config, seed);
            std::mt19937_64 rng(seed);
            auto coords = random({3, 8, 3}, rng);
            const auto plan = model.plan(coords);
            const std::vector<std::int64_t> labels{0, 1, 1};
            std::vector<Td> inputs{coords};
            for (auto& p : model.parameters()) inputs.push_back(p.tensor);
            auto f = [&]() {
              ForwardContext ctx;
              ctx.training = true;
              return label_smoothed_ce<double>(model.forward(coords, plan, ctx), labels, 0.2);
            };
            GradCheckOptions options;
            options.tolerance = 1e-3;
            return grad_check<double>(std::function<Td()>(f), inputs, options);
          }};
}

}  // namespace pointnorm
