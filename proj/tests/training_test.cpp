#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pointnorm/checkpoint.hpp"
#include "pointnorm/kernels.hpp"
#include "pointnorm/training.hpp"
#include "test_util.hpp"

using namespace pointnorm;

namespace {

ModelConfig small_config(std::size_t classes, std::size_t points = 32, double dropout = 0.0) {
  ModelConfig c;
  c.name = "small";
  c.input_points = points;
  c.embed_dim = 8;
  c.num_classes = classes;
  c.head_widths = {16};
  c.dropout = dropout;
  c.stages = {{points / 2, 8, 8, 16, 1, 1}, {points / 4, 4, 16, 16, 1, 1}};
  return c;
}

// Class 0: flat disks in the xz plane. Class 1: vertical rods.
Dataset disks_and_rods(std::size_t per_class, std::size_t points, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  Dataset d;
  d.num_classes = 2;
  d.class_names = {"disk", "rod"};
  d.points = points;
  for (std::size_t i = 0; i < 2 * per_class; ++i) {
    PointCloud c;
    c.label = static_cast<std::int64_t>(i % 2);
    for (std::size_t p = 0; p < points; ++p) {
      if (c.label == 0) {
        c.coords.insert(c.coords.end(), {u(rng), 0.02f * u(rng), u(rng)});
      } else {
        c.coords.insert(c.coords.end(), {0.05f * u(rng), u(rng), 0.05f * u(rng)});
      }
    }
    d.clouds.push_back(std::move(c));
  }
  return d;
}

TrainConfig quiet_config(std::size_t epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 8;
  t.lr_init = 1e-3;
  t.lr_final = 1e-5;
  t.seed = 3;
  return t;
}

// Adam as published, in long double.
struct AdamOracle {
  long double m = 0, v = 0;
  long double step(long double p, long double g, std::size_t t, long double lr, long double b1, long double b2,
                   long double eps, long double wd) {
    p -= lr * wd * p;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const long double mhat = m / (1 - std::pow(b1, static_cast<long double>(t)));
    const long double vhat = v / (1 - std::pow(b2, static_cast<long double>(t)));
    return p - lr * mhat / (std::sqrt(vhat) + eps);
  }
};

}  // namespace

TEST(CosineLr, Endpoints) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 200, 0.01, 1e-4), 0.01);
  EXPECT_NEAR(cosine_lr(200, 200, 0.01, 1e-4), 1e-4, 1e-18);
  EXPECT_NEAR(cosine_lr(100, 200, 0.01, 1e-4), (0.01 + 1e-4) / 2, 1e-15);
}

TEST(CosineLr, MonotoneNonIncreasing) {
  double prev = INFINITY;
  for (int t = 0; t <= 50; ++t) {
    const double lr = cosine_lr(t, 50, 0.01, 1e-4);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
}

TEST(AdamW, ZeroGradientShrinks) {
  std::vector<double> p{2.0, -3.0}, g{0.0, 0.0}, m(2), v(2);
  adamw_update<double>(p, g, m, v, 1, {0.01, 0.9, 0.999, 1e-8, 0.05}, "w");
  EXPECT_DOUBLE_EQ(p[0], 2.0 * (1 - 0.01 * 0.05));
  EXPECT_DOUBLE_EQ(p[1], -3.0 * (1 - 0.01 * 0.05));
}

TEST(AdamW, FirstStepHandComputed) {
  std::vector<double> p{0.5}, g{0.2}, m{0}, v{0};
  adamw_update<double>(p, g, m, v, 1, {0.01, 0.9, 0.999, 1e-8, 0.1}, "w");
  // m = 0.02, v = 4e-5; mhat = 0.2, vhat = 0.04.
  EXPECT_NEAR(m[0], 0.02, 1e-15);
  EXPECT_NEAR(v[0], 4e-5, 1e-18);
  const double expected = 0.5 * (1 - 0.001) - 0.01 * 0.2 / (0.2 + 1e-8);
  EXPECT_NEAR(p[0], expected, 1e-12);
}

TEST(AdamW, ConstantGradientFirstStepIsSignStep) {
  for (double g0 : {3.0, -0.25, 1e-3}) {
    std::vector<double> p{1.0}, g{g0}, m{0}, v{0};
    adamw_update<double>(p, g, m, v, 1, {0.01, 0.9, 0.999, 1e-8, 0.0}, "w");
    EXPECT_NEAR(p[0], 1.0 - 0.01 * g0 / (std::abs(g0) + 1e-8), 1e-12);
  }
}

TEST(AdamW, MatchesPublishedUpdateOverManySteps) {
  std::mt19937_64 rng(8);
  for (double wd : {0.0, 0.05}) {
    std::vector<double> p{0.7}, m{0}, v{0};
    AdamOracle oracle;
    long double ref = 0.7L;
    for (std::size_t t = 1; t <= 50; ++t) {
      const double g = testutil::uniform(1, rng)[0];
      std::vector<double> grad{g};
      adamw_update<double>(p, grad, m, v, t, {0.003, 0.9, 0.999, 1e-8, wd}, "w");
      ref = oracle.step(ref, g, t, 0.003L, 0.9L, 0.999L, 1e-8L, wd);
      ASSERT_NEAR(p[0], static_cast<double>(ref), 1e-12) << t;
    }
  }
}

TEST(AdamW, NonFiniteGradientNamesParameter) {
  std::vector<double> p{1.0, 2.0}, g{0.0, NAN}, m(2), v(2);
  try {
    adamw_update<double>(p, g, m, v, 1, {}, "stage0.lift.fc.weight");
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("stage0.lift.fc.weight"), std::string::npos);
  }
  EXPECT_EQ(p, (std::vector<double>{1.0, 2.0}));
}

TEST(AdamW, OptimizerStepsAllParameters) {
  PointNormModel<double> model(small_config(3), 1);
  AdamW<double> opt(model.parameters(), {0.01, 0.9, 0.999, 1e-8, 0.0});
  std::vector<std::vector<double>> before;
  for (const auto& p : model.parameters()) before.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  for (auto& p : model.parameters()) std::fill(p.tensor.mutable_grad().begin(), p.tensor.mutable_grad().end(), 1.0);
  opt.step(0.01);
  EXPECT_EQ(opt.steps(), 1u);
  for (std::size_t i = 0; i < before.size(); ++i) {
    const auto now = model.parameters()[i].tensor.values();
    for (std::size_t j = 0; j < now.size(); ++j) EXPECT_NEAR(now[j], before[i][j] - 0.01, 1e-9);
  }
}

TEST(Augment, ZeroAngleZeroOffsetIsIdentity) {
  std::mt19937_64 rng(1);
  PointCloud c;
  c.coords = testutil::random_cloud(20, rng);
  c.label = 5;
  const double zero[3] = {0, 0, 0};
  const auto out = rigid_transform(c, 0.0, zero);
  EXPECT_EQ(out.coords, c.coords);
  EXPECT_EQ(out.label, 5);
}

TEST(Augment, PreservesPairwiseDistances) {
  std::mt19937_64 rng(2);
  PointCloud c;
  c.coords = testutil::random_cloud(30, rng);
  for (int trial = 0; trial < 20; ++trial) {
    const auto out = augment(c, rng, 0.2);
    for (std::size_t i = 0; i < 30; ++i) {
      for (std::size_t j = i + 1; j < 30; ++j) {
        const auto d = [](const std::vector<float>& v, std::size_t a, std::size_t b) {
          return std::hypot(double(v[3 * a]) - v[3 * b], double(v[3 * a + 1]) - v[3 * b + 1],
                            double(v[3 * a + 2]) - v[3 * b + 2]);
        };
        ASSERT_NEAR(d(out.coords, i, j), d(c.coords, i, j), 1e-6);
      }
    }
  }
}

TEST(Augment, RotatesAboutUpAxisAndTranslatesWithinRange) {
  std::mt19937_64 rng(3);
  PointCloud c;
  c.coords = testutil::random_cloud(16, rng);
  for (int trial = 0; trial < 50; ++trial) {
    const auto out = augment(c, rng, 0.2);
    const double dy = double(out.coords[1]) - c.coords[1];
    EXPECT_LE(std::abs(dy), 0.2 + 1e-6);
    for (std::size_t i = 1; i < 16; ++i) {
      EXPECT_NEAR(double(out.coords[3 * i + 1]) - c.coords[3 * i + 1], dy, 1e-6);
    }
  }
}

TEST(Augment, FixedSeedIsBitIdentical) {
  std::mt19937_64 rng(4);
  PointCloud c;
  c.coords = testutil::random_cloud(16, rng);
  std::mt19937_64 a(99), b(99);
  EXPECT_EQ(augment(c, a).coords, augment(c, b).coords);
}

TEST(Metrics, AllCorrect) {
  std::vector<std::int64_t> labels{0, 1, 2, 2};
  const auto m = classification_metrics(labels, labels, 3);
  EXPECT_EQ(m.overall_accuracy, 1.0);
  EXPECT_EQ(m.mean_class_accuracy, 1.0);
}

TEST(Metrics, HandExample) {
  std::vector<std::int64_t> labels(12, 0), pred(12, 0);
  labels[10] = labels[11] = 1;
  const auto m = classification_metrics(pred, labels, 2);
  EXPECT_DOUBLE_EQ(m.overall_accuracy, 10.0 / 12.0);
  EXPECT_DOUBLE_EQ(m.mean_class_accuracy, 0.5);
}

TEST(Metrics, SingleClassAndAbsentClasses) {
  std::vector<std::int64_t> labels{2, 2, 2}, pred{2, 0, 2};
  const auto m = classification_metrics(pred, labels, 4);
  EXPECT_DOUBLE_EQ(m.mean_class_accuracy, m.overall_accuracy);
  EXPECT_TRUE(std::isnan(m.per_class[0]));
  EXPECT_DOUBLE_EQ(m.per_class[2], 2.0 / 3.0);
  EXPECT_THROW(classification_metrics({}, {}, 2), ArgumentError);
}

TEST(Metrics, OrderAndRelabelingInvariance) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t classes = 5;
    std::vector<std::int64_t> labels(40), pred(40);
    for (std::size_t i = 0; i < 40; ++i) {
      labels[i] = static_cast<std::int64_t>(rng() % classes);
      pred[i] = rng() % 3 == 0 ? static_cast<std::int64_t>(rng() % classes) : labels[i];
    }
    const auto base = classification_metrics(pred, labels, classes);
    std::vector<std::size_t> order(40);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::int64_t> l2, p2;
    for (auto i : order) {
      l2.push_back(labels[i]);
      p2.push_back(pred[i]);
    }
    EXPECT_DOUBLE_EQ(classification_metrics(p2, l2, classes).overall_accuracy, base.overall_accuracy);
    std::vector<std::int64_t> relabel(classes);
    std::iota(relabel.begin(), relabel.end(), 0);
    std::shuffle(relabel.begin(), relabel.end(), rng);
    for (auto& v : l2) v = relabel[static_cast<std::size_t>(v)];
    for (auto& v : p2) v = relabel[static_cast<std::size_t>(v)];
    EXPECT_NEAR(classification_metrics(p2, l2, classes).mean_class_accuracy, base.mean_class_accuracy, 1e-12);
  }
}

TEST(EpochBatches, CoverEverySampleOnce) {
  const auto batches = epoch_batches(70, 32, 1, 0);
  ASSERT_EQ(batches.size(), 3u);
  std::vector<std::size_t> all;
  for (const auto& b : batches) all.insert(all.end(), b.begin(), b.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < 70; ++i) EXPECT_EQ(all[i], i);
  EXPECT_EQ(epoch_batches(70, 32, 1, 0), batches);
  EXPECT_NE(epoch_batches(70, 32, 1, 1), batches);
}

TEST(EpochBatches, DropsTrailingSingleton) {
  const auto batches = epoch_batches(65, 32, 1, 0);
  ASSERT_EQ(batches.size(), 2u);
  EXPECT_EQ(batches[1].size(), 32u);
}

TEST(TrainConfig, Validation) {
  TrainConfig t;
  EXPECT_NO_THROW(t.validate());
  t.lr_final = t.lr_init;
  EXPECT_THROW(t.validate(), ConfigError);
  t = TrainConfig{};
  t.label_smoothing = 1.0;
  EXPECT_THROW(t.validate(), ConfigError);
  t = TrainConfig{};
  t.batch_size = 1;
  EXPECT_THROW(t.validate(), ConfigError);
  EXPECT_EQ(parse_precision("float64"), Precision::Float64);
  EXPECT_THROW(parse_precision("half"), ConfigError);
}

TEST(TrainEpoch, ZeroLearningRateLeavesParameters) {
  const auto data = disks_and_rods(8, 32, 1);
  PointNormModel<float> model(small_config(2), 1);
  const auto before = encode_checkpoint(capture(model));
  AdamW<float> opt(model.parameters(), {0.0, 0.9, 0.999, 1e-8, 0.05});
  const auto m = train_epoch(model, data, opt, quiet_config(1), 0, 0.0);
  EXPECT_EQ(m.samples, 16u);
  EXPECT_GE(m.overall_accuracy, 0.0);
  EXPECT_TRUE(std::isfinite(m.loss));
  const auto after = capture(model);
  const auto ref = decode_checkpoint(before);
  for (const auto& p : model.parameters()) EXPECT_EQ(after.find(p.name)->values, ref.find(p.name)->values) << p.name;
}

TEST(TrainEpoch, LossDecreasesOnSeparableToySet) {
  const auto data = disks_and_rods(8, 32, 2);
  PointNormModel<double> model(small_config(2), 2);
  auto cfg = quiet_config(10);
  cfg.batch_size = 16;
  cfg.augment = false;
  AdamW<double> opt(model.parameters(), {1e-3, 0.9, 0.999, 1e-8, 0.0});
  double prev = INFINITY;
  for (std::size_t e = 0; e < 10; ++e) {
    const auto m = train_epoch(model, data, opt, cfg, e, 1e-3);
    EXPECT_LT(m.loss, prev) << "epoch " << e;
    prev = m.loss;
  }
}

TEST(TrainEpoch, NonFiniteLossAbortsWithPosition) {
  const auto data = disks_and_rods(8, 32, 3);
  PointNormModel<float> model(small_config(2), 1);
  auto& w = model.parameters().back().tensor;
  w.mutable_values()[0] = NAN;
  AdamW<float> opt(model.parameters(), {});
  try {
    train_epoch(model, data, opt, quiet_config(1), 4, 1e-3);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 4, batch 0"), std::string::npos) << e.what();
  }
}

TEST(Evaluate, EmptyDatasetThrows) {
  PointNormModel<float> model(small_config(2), 1);
  Dataset empty;
  empty.num_classes = 2;
  EXPECT_THROW(evaluate(model, empty), ArgumentError);
}

TEST(Evaluate, BatchSizeDoesNotChangePredictions) {
  const auto data = disks_and_rods(6, 32, 4);
  PointNormModel<double> model(small_config(2), 3);
  std::vector<std::int64_t> a, b;
  const auto ma = evaluate(model, data, 4, 0.0, &a);
  const auto mb = evaluate(model, data, 12, 0.0, &b);
  EXPECT_EQ(a, b);
  EXPECT_EQ(ma.overall_accuracy, mb.overall_accuracy);
}

TEST(Fit, SameSeedGivesIdenticalTrajectoryAndCheckpoint) {
  const auto train = disks_and_rods(10, 32, 5);
  const auto test = disks_and_rods(4, 32, 6);
  auto cfg = quiet_config(3);
  cfg.deterministic = true;
  std::vector<std::string> bytes;
  std::vector<std::vector<double>> losses;
  for (int run = 0; run < 2; ++run) {
    PointNormModel<float> model(small_config(2, 32, 0.5), 7);
    const auto result = fit(model, train, test, cfg);
    std::vector<double> l;
    for (const auto& e : result.epochs) l.push_back(e.train.loss);
    losses.push_back(l);
    bytes.push_back(encode_checkpoint(capture(model)));
  }
  EXPECT_EQ(losses[0], losses[1]);
  EXPECT_EQ(bytes[0], bytes[1]);
}

TEST(Fit, ThreadCountDoesNotChangeResult) {
  const auto train = disks_and_rods(10, 32, 5);
  const auto test = disks_and_rods(4, 32, 6);
  auto cfg = quiet_config(2);
  std::vector<std::string> bytes;
  for (int threads : {1, 3}) {
    ThreadLimit limit(threads);
    PointNormModel<float> model(small_config(2, 32, 0.5), 7);
    fit(model, train, test, cfg);
    bytes.push_back(encode_checkpoint(capture(model)));
  }
  EXPECT_EQ(bytes[0], bytes[1]);
}

TEST(Fit, CallbackStopsEarly) {
  const auto train = disks_and_rods(6, 32, 7);
  const auto test = disks_and_rods(3, 32, 8);
  PointNormModel<float> model(small_config(2), 1);
  std::size_t calls = 0;
  const auto result = fit(model, train, test, quiet_config(5), [&](const EpochResult& r) {
    EXPECT_EQ(r.test.epoch, calls);
    return ++calls < 2;
  });
  EXPECT_EQ(result.epochs.size(), 2u);
  EXPECT_TRUE(result.stopped_early);
}

TEST(Fit, RejectsClassCountMismatch) {
  const auto train = disks_and_rods(4, 32, 9);
  PointNormModel<float> model(small_config(3), 1);
  EXPECT_THROW(fit(model, train, train, quiet_config(1)), ConfigError);
}
