#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pointnorm/gradcheck_suite.hpp"
#include "pointnorm/network.hpp"
#include "pointnorm/ops.hpp"
#include "test_util.hpp"

using namespace pointnorm;
using Td = Tensor<double>;

namespace {

ModelConfig small_config(std::size_t points = 64) {
  ModelConfig c;
  c.name = "small";
  c.input_points = points;
  c.embed_dim = 8;
  c.num_classes = 3;
  c.head_widths = {16, 8};
  c.stages = {{points / 4, 8, 8, 12, 1, 1}, {points / 8, 4, 12, 16, 1, 1}};
  return c;
}

NamedTensor<double>& param(PointNormModel<double>& m, const std::string& name) {
  for (auto& p : m.parameters())
    if (p.name == name) return p;
  throw std::runtime_error("no parameter " + name);
}

Td cloud_batch(std::size_t batch, std::size_t n, std::mt19937_64& rng) {
  return Td::from({batch, n, 3}, testutil::uniform(batch * n * 3, rng));
}

}  // namespace

TEST(BlockConfig, HiddenWidths) {
  EXPECT_EQ((BlockConfig{64, 1.0, BlockKind::CRes}.hidden()), 64u);
  EXPECT_EQ((BlockConfig{32, 0.25, BlockKind::CRes}.hidden()), 8u);
  EXPECT_EQ((BlockConfig{64, 2.0, BlockKind::InvRes}.hidden()), 128u);
  EXPECT_THROW((BlockConfig{8, 0.01, BlockKind::CRes}.hidden()), ConfigError);
}

TEST(BlockKind, Parse) {
  EXPECT_EQ(parse_block_kind("cres"), BlockKind::CRes);
  EXPECT_EQ(parse_block_kind("InvRes"), BlockKind::InvRes);
  EXPECT_THROW(parse_block_kind("conv"), ConfigError);
}

TEST(Blocks, ZeroWeightsPassResidualThrough) {
  for (auto kind : {BlockKind::CRes, BlockKind::InvRes}) {
    auto config = small_config();
    config.block_kind = kind;
    PointNormModel<double> model(config, 1);
    auto& block = model.block(0, true, 0);
    for (auto& l : block.layers) {
      std::fill(l.weight.mutable_values().begin(), l.weight.mutable_values().end(), 0.0);
      std::fill(l.bias.mutable_values().begin(), l.bias.mutable_values().end(), 0.0);
    }
    std::mt19937_64 rng(2);
    auto x = Td::from({2, 5, 12}, testutil::uniform(120, rng));
    auto y = block.forward(x, false);
    ASSERT_EQ(y.shape(), x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.values()[i], std::max(0.0, x.values()[i]));
    EXPECT_EQ(kind == BlockKind::CRes ? c_resblock(x, block, false).shape() : inv_resblock(x, block, false).shape(),
              x.shape());
  }
}

TEST(Blocks, WrongKindOrWidthRejected) {
  PointNormModel<double> model(small_config(), 1);
  auto& block = model.block(0, false, 0);
  EXPECT_THROW(inv_resblock(Td::zeros({2, 12}), block, false), ConfigError);
  EXPECT_THROW(block.forward(Td::zeros({2, 11}), false), DimensionError);
}

TEST(Blocks, InvResHasMoreParameters) {
  for (double r : {1.0, 2.0, 4.0}) {
    auto c = pointnorm_config(15);
    c.bottleneck_ratio = r;
    auto inv = c;
    inv.block_kind = BlockKind::InvRes;
    EXPECT_GT(count_params_flops(inv).params, count_params_flops(c).params) << r;
  }
}

TEST(Embedding, ZeroWeightsGiveActivatedBias) {
  PointNormModel<double> model(small_config(), 3);
  auto& w = param(model, "embed.fc.weight").tensor;
  std::fill(w.mutable_values().begin(), w.mutable_values().end(), 0.0);
  const auto bias = param(model, "embed.fc.bias").tensor.values();
  std::mt19937_64 rng(4);
  auto out = model.embed(cloud_batch(2, 64, rng), false);
  ASSERT_EQ(out.shape(), (Shape{2, 64, 8}));
  for (std::size_t i = 0; i < out.numel(); ++i) {
    EXPECT_NEAR(out.values()[i], std::max(0.0, bias[i % 8]) / std::sqrt(1.0 + 1e-5), 1e-15);
  }
}

TEST(Stage, ShapeAndNeighborOrderInvariance) {
  PointNormModel<double> model(small_config(), 5);
  std::mt19937_64 rng(6);
  auto coords = cloud_batch(2, 64, rng);
  auto plan = model.plan(coords);
  ASSERT_EQ(plan.stages.size(), 2u);
  ForwardContext ctx;
  auto feats = model.embed(coords, false);
  auto out = model.stage_forward(0, feats, plan.stages[0], ctx);
  EXPECT_EQ(out.shape(), (Shape{2, 16, 12}));

  auto shuffled = plan.stages[0];
  for (std::size_t g = 0; g < 2 * 16; ++g) {
    std::shuffle(shuffled.neighbors.begin() + g * 8, shuffled.neighbors.begin() + (g + 1) * 8, rng);
  }
  auto again = model.stage_forward(0, feats, shuffled, ctx);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out.values()[i], again.values()[i], 1e-12);
}

TEST(Plan, StagesFollowSampledCoordinates) {
  PointNormModel<double> model(small_config(), 5);
  std::mt19937_64 rng(7);
  auto coords = cloud_batch(1, 64, rng);
  auto plan = model.plan(coords);
  std::vector<double> d0(coords.values().begin(), coords.values().end());
  EXPECT_EQ(plan.stages[0].samples, farthest_point_sample<double>(d0, 16));
  std::vector<double> d1;
  for (auto i : plan.stages[0].samples) d1.insert(d1.end(), d0.begin() + 3 * i, d0.begin() + 3 * i + 3);
  EXPECT_EQ(plan.stages[1].samples, farthest_point_sample<double>(d1, 8));
  EXPECT_EQ(plan.stages[1].neighbors, knn_group<double>(d1, plan.stages[1].samples, 4));
}

TEST(Classify, ShapesAndPointOrder) {
  PointNormModel<double> model(small_config(), 8);
  std::mt19937_64 rng(9);
  ForwardContext ctx;
  auto f = Td::from({2, 5, 16}, testutil::uniform(160, rng));
  auto logits = model.classify(f, ctx);
  EXPECT_EQ(logits.shape(), (Shape{2, 3}));
  std::vector<std::size_t> perm{4, 2, 0, 1, 3};
  std::vector<double> p(160);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t c = 0; c < 16; ++c) p[(b * 5 + i) * 16 + c] = f.values()[(b * 5 + perm[i]) * 16 + c];
  auto permuted = model.classify(Td::from({2, 5, 16}, p), ctx);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(logits.values()[i], permuted.values()[i]);

  auto single = Td::from({1, 1, 16}, testutil::uniform(16, rng));
  auto flat = Td::from({1, 16}, std::vector<double>(single.values().begin(), single.values().end()));
  auto a = model.classify(single, ctx);
  // pooling a single point is the identity, so the head sees the raw vector
  EXPECT_EQ(a.shape(), (Shape{1, 3}));
  EXPECT_EQ(max_pool_axis(single, 1).shape(), flat.shape());
}

TEST(Model, PermutationInvariantLogits) {
  auto config = small_config(64);
  PointNormModel<double> model(config, 10);
  std::mt19937_64 rng(11);
  auto coords = cloud_batch(1, 64, rng);
  ForwardContext ctx;
  auto base = model.forward(coords, ctx);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<std::size_t> perm(64);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> p(64 * 3);
    for (std::size_t i = 0; i < 64; ++i)
      for (int a = 0; a < 3; ++a) p[3 * i + a] = coords.values()[3 * perm[i] + a];
    auto logits = model.forward(Td::from({1, 64, 3}, p), ctx);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(logits.values()[i], base.values()[i], 1e-12);
  }
}

TEST(Model, WrongPointCountRejected) {
  PointNormModel<double> model(small_config(64), 1);
  ForwardContext ctx;
  EXPECT_THROW(model.forward(Td::zeros({1, 32, 3}), ctx), DimensionError);
}

TEST(Model, TrainingDropoutNeedsRng) {
  PointNormModel<double> model(small_config(64), 1);
  std::mt19937_64 rng(1);
  ForwardContext ctx;
  ctx.training = true;
  EXPECT_THROW(model.forward(cloud_batch(2, 64, rng), ctx), ContractError);
}

TEST(Model, MicroModelGradient) {
  const auto report = micro_model_check().run(1);
  EXPECT_TRUE(report.passed) << report.max_rel_error;
  EXPECT_GT(report.checked, 500u);
}

TEST(LayerCount, TableVariants) {
  EXPECT_EQ(pointnorm_config(15, 1024, 24).layer_count(), 24u);
  EXPECT_EQ(pointnorm_config(15, 1024, 40).layer_count(), 40u);
  EXPECT_EQ(pointnorm_config(15, 1024, 56).layer_count(), 56u);
  EXPECT_THROW(pointnorm_config(15, 1024, 32), ConfigError);
}

TEST(Cost, ClosedFormMatchesBuiltModel) {
  std::vector<ModelConfig> configs{pointnorm_config(15), pointnorm_tiny_config(15), pointnorm_config(8, 256, 24),
                                   small_config()};
  auto inv = pointnorm_tiny_config(40);
  inv.block_kind = BlockKind::InvRes;
  inv.bottleneck_ratio = 2.0;
  configs.push_back(inv);
  auto ablated = small_config();
  ablated.disable_pn = true;
  ablated.scalar_affine = true;
  configs.push_back(ablated);
  auto flat = small_config();
  flat.stages.clear();
  configs.push_back(flat);
  for (const auto& c : configs) {
    PointNormModel<float> model(c, 1);
    EXPECT_EQ(count_params_flops(c, c.input_points).params, model.parameter_count()) << c.to_json();
  }
}

TEST(Cost, ZeroStageIsEmbeddingPlusHead) {
  auto c = small_config();
  c.stages.clear();
  const std::uint64_t embed = 3 * 8 + 8 + 2 * 8;
  const std::uint64_t head = (8 * 16 + 16 + 2 * 16) + (16 * 8 + 8 + 2 * 8) + (8 * 3 + 3);
  EXPECT_EQ(count_params_flops(c, 64).params, embed + head);
}

TEST(Cost, TargetsAndMonotonicity) {
  const auto full = count_params_flops(pointnorm_config(15));
  const auto tiny = count_params_flops(pointnorm_tiny_config(15));
  EXPECT_NEAR(full.params / 12.63e6, 1.0, 0.10);
  EXPECT_NEAR(full.flops / 14.59e9, 1.0, 0.10);
  EXPECT_NEAR(tiny.params / 0.68e6, 1.0, 0.15);
  EXPECT_LT(tiny.params, full.params);
  std::uint64_t last = 0;
  for (double r : {0.25, 0.5, 1.0, 2.0}) {
    auto c = pointnorm_config(15);
    c.bottleneck_ratio = r;
    const auto p = count_params_flops(c).params;
    EXPECT_GT(p, last);
    last = p;
  }
  last = 0;
  for (std::size_t e : {16u, 32u, 64u}) {
    auto c = small_config();
    c.embed_dim = e;
    c.stages[0].channels_in = e;
    const auto p = count_params_flops(c, 64).params;
    EXPECT_GT(p, last);
    last = p;
  }
}

TEST(Cost, StatsModeDoesNotChangeCost) {
  const auto a = pointnorm_config(15);
  for (const auto mode : {kLMLS, kGMLS, kGMGS}) {
    auto b = a;
    b.stats_mode = mode;
    EXPECT_EQ(count_params_flops(a).params, count_params_flops(b).params);
    EXPECT_EQ(count_params_flops(a).flops, count_params_flops(b).flops);
  }
}

TEST(Config, ValidateNamesStage) {
  auto c = small_config();
  c.stages[1].channels_in = 7;
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("stage 1"), std::string::npos) << e.what();
  }
  c = small_config();
  c.stages[0].points_out = 65;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.stages[0].post_blocks = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.disable_pn = c.disable_rpn = true;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, JsonRoundTripAndDigest) {
  auto c = pointnorm_tiny_config(8, 256);
  c.stats_mode = kGMLS;
  c.block_kind = BlockKind::InvRes;
  c.seed_rule = SeedRule::Index;
  c.disable_rpn = true;
  auto back = ModelConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.digest(), c.digest());
  back.bottleneck_ratio = 0.5;
  EXPECT_NE(back.digest(), c.digest());
  EXPECT_THROW(ModelConfig::from_json("{\"name\": 1}"), ConfigError);
}

TEST(Config, DeskScaleClampsK) {
  auto c = pointnorm_config(8, 256);
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.stages.back().points_out, 8u);
  EXPECT_EQ(c.stages.back().k, 16u);
}
