#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "pointnorm/dualnorm.hpp"
#include "pointnorm/geometry.hpp"
#include "pointnorm/tensor.hpp"

namespace pointnorm {

enum class BlockKind { CRes, InvRes };

std::string_view block_kind_name(BlockKind kind);
BlockKind parse_block_kind(std::string_view name);

struct BlockConfig {
  std::size_t channels = 0;
  double ratio = 1.0;
  BlockKind kind = BlockKind::CRes;

  // round(ratio * channels); throws ConfigError when < 1.
  std::size_t hidden() const;
  // Learnable layers inside the block (2 for C-Res, 3 for InvRes).
  std::size_t layers() const { return kind == BlockKind::CRes ? 2 : 3; }
};

struct StageConfig {
  std::size_t points_out = 0;
  std::size_t k = 24;
  std::size_t channels_in = 0;
  std::size_t channels_out = 0;
  std::size_t pre_blocks = 2;
  std::size_t post_blocks = 2;
};

struct ModelConfig {
  std::string name = "pointnorm";
  std::size_t input_points = 1024;
  std::size_t embed_dim = 64;
  std::vector<StageConfig> stages;
  StatsMode stats_mode = kLMGS;
  double bottleneck_ratio = 1.0;
  BlockKind block_kind = BlockKind::CRes;
  std::size_t num_classes = 15;
  bool disable_pn = false;
  bool disable_rpn = false;
  bool scalar_affine = false;
  SeedRule seed_rule = SeedRule::FarthestFromCentroid;
  std::vector<std::size_t> head_widths{512, 256};
  double dropout = 0.5;

  // Throws ConfigError naming the offending stage.
  void validate() const;
  // Learnable layers excluding normalization and activations:
  // embedding + sum_stages(lift + layers_per_block * (pre + post)) + head.
  std::size_t layer_count() const;

  std::string to_json() const;
  static ModelConfig from_json(std::string_view text);
  // FNV-1a 64 over to_json().
  std::uint64_t digest() const;
};

// Full model. `layers` selects 24/40/56 (1/2/3 pre- and post-blocks per
// stage). Stage sizes follow a 4/2/2/2 point reduction from `input_points`
// and double the channel width per stage from the 64-wide embedding; k is
// 24 capped at the incoming point count.
ModelConfig pointnorm_config(std::size_t num_classes, std::size_t input_points = 1024, std::size_t layers = 40);
// Tiny: embedding 32, ratio 0.25, one pre- and one post-block per stage,
// last stage keeps its input width.
ModelConfig pointnorm_tiny_config(std::size_t num_classes, std::size_t input_points = 1024);

struct CostReport {
  std::uint64_t params = 0;
  std::uint64_t flops = 0;  // 2 per multiply-add plus elementwise work
  std::uint64_t macs = 0;   // multiply-adds in linear layers
};

// Closed-form parameter and FLOP counts for one forward pass over a cloud of
// `n_points` points, using the config's stage sizes.
CostReport count_params_flops(const ModelConfig& config, std::size_t n_points = 1024);

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]
  bool depthwise = false;  // weight/bias are [channels]; y = x * w + b

  Tensor<T> forward(const Tensor<T>& x) const;
};

template <typename T>
struct BatchNorm {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;

  Tensor<T> forward(const Tensor<T>& x, bool training);
};

// Linear -> BN -> ReLU.
template <typename T>
struct LinearBnRelu {
  Linear<T> linear;
  BatchNorm<T> norm;

  Tensor<T> forward(const Tensor<T>& x, bool training);
};

// C-Res: relu(BN(FC(relu(BN(FC(x))))) + x) with hidden width round(r d).
// InvRes: expand FC, depthwise transform, squeeze FC, each with BN; ReLU
// after the first two; residual then ReLU.
template <typename T>
struct ResidualBlock {
  BlockConfig config;
  std::vector<Linear<T>> layers;
  std::vector<BatchNorm<T>> norms;

  Tensor<T> forward(const Tensor<T>& x, bool training);
};

template <typename T>
Tensor<T> c_resblock(const Tensor<T>& x, ResidualBlock<T>& block, bool training);
template <typename T>
Tensor<T> inv_resblock(const Tensor<T>& x, ResidualBlock<T>& block, bool training);

// Neighborhoods for every stage, computed from coordinates only.
struct StagePlan {
  std::size_t points_in = 0;
  std::size_t points_out = 0;
  std::size_t k = 0;
  std::vector<std::size_t> samples;    // [B, m]
  std::vector<std::size_t> neighbors;  // [B, m, k]
};

struct SamplingPlan {
  std::size_t batch = 0;
  std::vector<StagePlan> stages;
};

struct ForwardContext {
  bool training = false;
  std::mt19937_64* rng = nullptr;  // required for dropout in training
  std::vector<DualNormTrace>* traces = nullptr;
};

template <typename T>
class PointNormModel {
 public:
  PointNormModel(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  // coords: [B, N, 3] values; FPS then KNN per stage, per cloud.
  SamplingPlan plan(const Tensor<T>& coords) const;

  // Logits [B, num_classes].
  Tensor<T> forward(const Tensor<T>& coords, ForwardContext& ctx);
  // With precomputed neighborhoods (held fixed, e.g. for gradient checks
  // wrt the coordinates).
  Tensor<T> forward(const Tensor<T>& coords, const SamplingPlan& plan, ForwardContext& ctx);

  // [B, N, 3] -> [B, N, embed_dim].
  Tensor<T> embed(const Tensor<T>& coords, bool training);
  // One sampling-grouping / DualNorm / mapping stage. Returns the stage
  // features [B, m, channels_out].
  Tensor<T> stage_forward(std::size_t stage, const Tensor<T>& features, const StagePlan& plan, ForwardContext& ctx);
  // [B, m, d] -> logits.
  Tensor<T> classify(const Tensor<T>& features, ForwardContext& ctx);

  std::vector<NamedTensor<T>>& parameters() { return parameters_; }
  const std::vector<NamedTensor<T>>& parameters() const { return parameters_; }
  // Non-trainable state (BN running statistics).
  std::vector<NamedTensor<T>>& buffers() { return buffers_; }
  const std::vector<NamedTensor<T>>& buffers() const { return buffers_; }
  std::size_t parameter_count() const;
  void zero_grad();

  ResidualBlock<T>& block(std::size_t stage, bool pre, std::size_t index);

 private:
  struct Stage {
    DualNormParams<T> dualnorm;
    LinearBnRelu<T> lift;
    std::vector<ResidualBlock<T>> pre;
    std::vector<ResidualBlock<T>> post;
  };

  Linear<T> make_linear(const std::string& name, std::size_t in, std::size_t out, bool depthwise = false);
  BatchNorm<T> make_norm(const std::string& name, std::size_t channels);
  ResidualBlock<T> make_block(const std::string& name, BlockConfig config);
  Tensor<T> add_parameter(const std::string& name, Tensor<T> tensor);

  ModelConfig config_;
  std::mt19937_64 init_rng_;
  LinearBnRelu<T> embedding_;
  std::vector<Stage> stages_;
  std::vector<LinearBnRelu<T>> head_hidden_;
  Linear<T> head_out_;
  std::vector<NamedTensor<T>> parameters_;
  std::vector<NamedTensor<T>> buffers_;
};

extern template class PointNormModel<float>;
extern template class PointNormModel<double>;

}  // namespace pointnorm
