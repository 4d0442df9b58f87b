#include <gtest/gtest.h>

#include <thread>

#include "pointnorm/gradcheck.hpp"
#include "pointnorm/ops.hpp"
#include "test_util.hpp"

using namespace pointnorm;

TEST(Tensor, FromChecksSize) {
  EXPECT_THROW(Tensor<double>::from({2, 2}, {1, 2, 3}), DimensionError);
  auto t = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(t.numel(), 4u);
  EXPECT_EQ(t.at({1, 0}), 3.0);
}

TEST(Backward, ScalarIdentity) {
  auto x = Tensor<double>::scalar(3.0, true);
  auto y = mul_scalar(x, 1.0);
  backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
}

TEST(Backward, LeafLossGetsUnitGrad) {
  auto x = Tensor<double>::scalar(3.0, true);
  backward(x);
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
}

TEST(Backward, SumOfSquares) {
  auto x = Tensor<double>::from({2}, {1, 2}, true);
  backward(sum(mul(x, x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
}

TEST(Backward, FanOutAccumulates) {
  auto x = Tensor<double>::from({3}, {1, -2, 5}, true);
  backward(sum(add(x, x)));
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 2.0);
}

TEST(Backward, NonScalarLossThrows) {
  auto x = Tensor<double>::from({2}, {1, 2}, true);
  EXPECT_THROW(backward(mul_scalar(x, 2.0)), ContractError);
}

TEST(Backward, SharedSubexpressionMatchesExpandedTree) {
  std::mt19937_64 rng(7);
  auto base = testutil::uniform(6, rng);
  auto x1 = Tensor<double>::from({2, 3}, base, true);
  auto s = relu(mul(x1, add_scalar(x1, 0.5)));
  backward(sum(mul(add(s, square(s)), s)));

  auto x2 = Tensor<double>::from({2, 3}, base, true);
  auto s1 = relu(mul(x2, add_scalar(x2, 0.5)));
  auto s2 = relu(mul(x2, add_scalar(x2, 0.5)));
  auto s3 = relu(mul(x2, add_scalar(x2, 0.5)));
  auto s4 = relu(mul(x2, add_scalar(x2, 0.5)));
  backward(sum(mul(add(s1, mul(s2, s3)), s4)));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(x1.grad()[i], x2.grad()[i], 1e-14);
}

TEST(Backward, TopologicalOrderVisitsEachNodeOnce) {
  auto x = Tensor<double>::from({2}, {1, 2}, true);
  auto a = mul(x, x);
  auto b = add(a, a);
  auto loss = sum(add(b, a));
  auto order = topological_order(loss);
  EXPECT_EQ(order.size(), 5u);
  EXPECT_EQ(order.front(), x.node());
  EXPECT_EQ(order.back(), loss.node());
  for (std::size_t i = 0; i < order.size(); ++i) {
    for (const auto& in : order[i]->inputs) {
      auto pos = std::find(order.begin(), order.end(), in.get()) - order.begin();
      EXPECT_LT(static_cast<std::size_t>(pos), i);
    }
  }
}

TEST(Backward, ReleaseGraphKeepsLeafGradients) {
  auto x = Tensor<double>::from({3}, {1, 2, 3}, true);
  auto mid = mul(x, x);
  auto loss = sum(mid);
  backward(loss, {true});
  EXPECT_DOUBLE_EQ(x.grad()[2], 6.0);
  EXPECT_TRUE(mid.node()->inputs.empty());
}

TEST(NoGrad, DisablesRecordingOnThisThreadOnly) {
  auto x = Tensor<double>::from({2}, {1, 2}, true);
  bool other_thread_records = false;
  {
    NoGradGuard guard;
    EXPECT_FALSE(mul(x, x).requires_grad());
    std::thread t([&] { other_thread_records = mul(x, x).requires_grad(); });
    t.join();
  }
  EXPECT_TRUE(other_thread_records);
  EXPECT_TRUE(mul(x, x).requires_grad());
}

TEST(NoGrad, ConcurrentGraphsAreIndependent) {
  std::vector<double> grads(4, 0.0);
  std::vector<std::thread> pool;
  for (int t = 0; t < 4; ++t) {
    pool.emplace_back([&grads, t] {
      auto x = Tensor<double>::scalar(static_cast<double>(t + 1), true);
      for (int rep = 0; rep < 200; ++rep) {
        x.zero_grad();
        backward(mul(x, x));
      }
      grads[t] = x.grad()[0];
    });
  }
  for (auto& th : pool) th.join();
  for (int t = 0; t < 4; ++t) EXPECT_DOUBLE_EQ(grads[t], 2.0 * (t + 1));
}

TEST(GradCheck, SumIsExact) {
  std::mt19937_64 rng(1);
  auto x = testutil::random_tensor({3, 4}, rng);
  auto report = grad_check<double>([](const Tensor<double>& v) { return sum(v); }, x);
  EXPECT_TRUE(report.passed);
  EXPECT_LT(report.max_rel_error, 1e-10);
  EXPECT_EQ(report.checked, 12u);
}

TEST(GradCheck, MaxTieIsSkipped) {
  auto x = Tensor<double>::from({2, 2}, {1, 5, 1, 2}, true);
  auto report = grad_check<double>([](const Tensor<double>& v) { return sum(max_pool_axis(v, 0)); }, x);
  EXPECT_TRUE(report.passed);
  ASSERT_EQ(report.skipped.size(), 2u);
  EXPECT_EQ(report.skipped[0].index, 0u);
  EXPECT_EQ(report.skipped[1].index, 2u);
}

TEST(GradCheck, DetectsWrongGradient) {
  // relu evaluated at the kink from the right side only would look fine;
  // here an op with a deliberately broken backward must fail.
  auto x = Tensor<double>::from({2}, {0.3, -0.7}, true);
  auto broken = [](const Tensor<double>& v) {
    auto detached = v.detach();
    auto doubled = make_result<double>(v.shape(), std::vector<double>(v.values().begin(), v.values().end()), {v},
                                       "broken", [](TensorNode<double>& self) {
                                         auto g = self.inputs[0]->ensure_grad();
                                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * self.grad[i];
                                       });
    return sum(doubled);
  };
  auto report = grad_check<double>(broken, x);
  EXPECT_FALSE(report.passed);
  EXPECT_NEAR(report.max_rel_error, 0.5, 1e-8);
}

TEST(GradCheck, NonFiniteThrowsWithCoordinate) {
  auto x = Tensor<double>::from({3}, {1.0, 2.0, 1e-5}, true);
  auto f = [](const Tensor<double>& v) { return sum(sqrt(v)); };
  try {
    grad_check<double>(f, x, {1e-3, 1e-4, 1e-3});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("coordinate 2"), std::string::npos) << e.what();
  }
}
