#include "pointnorm/network.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "json.hpp"
#include "pointnorm/ops.hpp"

namespace pointnorm {

namespace {

constexpr std::size_t kStageReduction[] = {4, 2, 2, 2};
constexpr std::size_t kDefaultNeighbors = 24;

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

std::vector<StageConfig> build_stages(std::size_t input_points, std::size_t embed_dim,
                                      const std::vector<std::size_t>& widths, std::size_t blocks) {
  std::vector<StageConfig> stages;
  std::size_t points = input_points;
  std::size_t channels = embed_dim;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    StageConfig s;
    s.points_out = std::max<std::size_t>(1, points / kStageReduction[i]);
    s.k = std::min(kDefaultNeighbors, points);
    s.channels_in = channels;
    s.channels_out = widths[i];
    s.pre_blocks = blocks;
    s.post_blocks = blocks;
    stages.push_back(s);
    points = s.points_out;
    channels = s.channels_out;
  }
  return stages;
}

// Per-layer cost helpers; `rows` is the number of vectors the layer maps.
struct Tally {
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  std::uint64_t macs = 0;

  void linear(std::uint64_t rows, std::uint64_t in, std::uint64_t out) {
    params += in * out + out;
    macs += rows * in * out;
    flops += 2 * rows * in * out + rows * out;
  }
  void depthwise(std::uint64_t rows, std::uint64_t channels) {
    params += 2 * channels;
    flops += 2 * rows * channels;
  }
  void norm(std::uint64_t rows, std::uint64_t channels) {
    params += 2 * channels;
    flops += 2 * rows * channels;
  }
  void elementwise(std::uint64_t count) { flops += count; }

  void block(std::uint64_t rows, const BlockConfig& cfg) {
    const std::uint64_t c = cfg.channels;
    const std::uint64_t h = cfg.hidden();
    linear(rows, c, h);
    norm(rows, h);
    elementwise(rows * h);
    if (cfg.kind == BlockKind::InvRes) {
      depthwise(rows, h);
      norm(rows, h);
      elementwise(rows * h);
    }
    linear(rows, h, c);
    norm(rows, c);
    elementwise(2 * rows * c);  // residual add + ReLU
  }
};

}  // namespace

std::string_view block_kind_name(BlockKind kind) { return kind == BlockKind::CRes ? "cres" : "invres"; }

BlockKind parse_block_kind(std::string_view name) {
  const auto key = lower(name);
  if (key == "cres" || key == "c-res" || key == "c-resblock") return BlockKind::CRes;
  if (key == "invres" || key == "inv-res" || key == "invresblock") return BlockKind::InvRes;
  throw ConfigError("unknown block kind '" + std::string(name) + "' (expected cres or invres)");
}

std::size_t BlockConfig::hidden() const {
  const double width = std::round(ratio * static_cast<double>(channels));
  if (!(ratio > 0.0) || width < 1.0) {
    throw ConfigError("block hidden width round(" + std::to_string(ratio) + " * " + std::to_string(channels) +
                      ") is below 1");
  }
  return static_cast<std::size_t>(width);
}

void ModelConfig::validate() const {
  if (embed_dim < 3) throw ConfigError("embed_dim must be >= 3");
  if (input_points < 1) throw ConfigError("input_points must be >= 1");
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
  if (!(bottleneck_ratio > 0.0)) throw ConfigError("bottleneck_ratio must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
  if (disable_pn && disable_rpn) throw ConfigError("disable_pn and disable_rpn cannot both be set");
  if (head_widths.empty()) throw ConfigError("classifier needs at least one hidden layer");
  std::size_t points = input_points;
  std::size_t channels = embed_dim;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    const std::string where = "stage " + std::to_string(i) + ": ";
    if (s.channels_in != channels) {
      throw ConfigError(where + "channels_in " + std::to_string(s.channels_in) + " does not match incoming " +
                        std::to_string(channels));
    }
    if (s.points_out < 1 || s.points_out > points) {
      throw ConfigError(where + "points_out " + std::to_string(s.points_out) + " exceeds incoming " +
                        std::to_string(points));
    }
    if (s.k < 1 || s.k > points) {
      throw ConfigError(where + "k " + std::to_string(s.k) + " exceeds incoming point count " + std::to_string(points));
    }
    if (s.channels_out < 1) throw ConfigError(where + "channels_out must be >= 1");
    if (s.pre_blocks < 1 || s.post_blocks < 1) throw ConfigError(where + "needs at least one pre- and one post-block");
    BlockConfig{s.channels_out, bottleneck_ratio, block_kind}.hidden();
    points = s.points_out;
    channels = s.channels_out;
  }
}

std::size_t ModelConfig::layer_count() const {
  const std::size_t per_block = BlockConfig{1, 1.0, block_kind}.layers();
  std::size_t layers = 1;
  for (const auto& s : stages) layers += 1 + per_block * (s.pre_blocks + s.post_blocks);
  return layers + head_widths.size() + 1;
}

std::string ModelConfig::to_json() const {
  nlohmann::json j;
  j["name"] = name;
  j["input_points"] = input_points;
  j["embed_dim"] = embed_dim;
  nlohmann::json st = nlohmann::json::array();
  for (const auto& s : stages) {
    st.push_back({{"points_out", s.points_out},
                  {"k", s.k},
                  {"channels_in", s.channels_in},
                  {"channels_out", s.channels_out},
                  {"pre_blocks", s.pre_blocks},
                  {"post_blocks", s.post_blocks}});
  }
  j["stages"] = st;
  j["stats_mode"] = stats_mode.name();
  j["bottleneck_ratio"] = bottleneck_ratio;
  j["block_kind"] = block_kind_name(block_kind);
  j["num_classes"] = num_classes;
  j["disable_pn"] = disable_pn;
  j["disable_rpn"] = disable_rpn;
  j["scalar_affine"] = scalar_affine;
  j["seed_rule"] = seed_rule == SeedRule::Index ? "index" : "farthest-from-centroid";
  j["head_widths"] = head_widths;
  j["dropout"] = dropout;
  return j.dump();
}

ModelConfig ModelConfig::from_json(std::string_view text) {
  ModelConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    c.name = j.at("name").get<std::string>();
    c.input_points = j.at("input_points").get<std::size_t>();
    c.embed_dim = j.at("embed_dim").get<std::size_t>();
    c.stages.clear();
    for (const auto& s : j.at("stages")) {
      c.stages.push_back({s.at("points_out").get<std::size_t>(), s.at("k").get<std::size_t>(),
                          s.at("channels_in").get<std::size_t>(), s.at("channels_out").get<std::size_t>(),
                          s.at("pre_blocks").get<std::size_t>(), s.at("post_blocks").get<std::size_t>()});
    }
    c.stats_mode = StatsMode::parse(j.at("stats_mode").get<std::string>());
    c.bottleneck_ratio = j.at("bottleneck_ratio").get<double>();
    c.block_kind = parse_block_kind(j.at("block_kind").get<std::string>());
    c.num_classes = j.at("num_classes").get<std::size_t>();
    c.disable_pn = j.at("disable_pn").get<bool>();
    c.disable_rpn = j.at("disable_rpn").get<bool>();
    c.scalar_affine = j.at("scalar_affine").get<bool>();
    c.seed_rule = j.at("seed_rule").get<std::string>() == "index" ? SeedRule::Index : SeedRule::FarthestFromCentroid;
    c.head_widths = j.at("head_widths").get<std::vector<std::size_t>>();
    c.dropout = j.at("dropout").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config JSON: ") + e.what());
  }
  return c;
}

std::uint64_t ModelConfig::digest() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : to_json()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

ModelConfig pointnorm_config(std::size_t num_classes, std::size_t input_points, std::size_t layers) {
  std::size_t blocks = 0;
  switch (layers) {
    case 24:
      blocks = 1;
      break;
    case 40:
      blocks = 2;
      break;
    case 56:
      blocks = 3;
      break;
    default:
      throw ConfigError("layer number must be 24, 40 or 56, got " + std::to_string(layers));
  }
  ModelConfig c;
  c.name = "pointnorm";
  c.input_points = input_points;
  c.embed_dim = 64;
  c.num_classes = num_classes;
  c.bottleneck_ratio = 1.0;
  c.stages = build_stages(input_points, c.embed_dim, {128, 256, 512, 1024}, blocks);
  return c;
}

ModelConfig pointnorm_tiny_config(std::size_t num_classes, std::size_t input_points) {
  ModelConfig c;
  c.name = "pointnorm-tiny";
  c.input_points = input_points;
  c.embed_dim = 32;
  c.num_classes = num_classes;
  c.bottleneck_ratio = 0.25;
  c.stages = build_stages(input_points, c.embed_dim, {64, 128, 256, 256}, 1);
  return c;
}

CostReport count_params_flops(const ModelConfig& config, std::size_t n_points) {
  config.validate();
  Tally t;
  const std::uint64_t n = n_points;
  t.linear(n, 3, config.embed_dim);
  t.norm(n, config.embed_dim);
  t.elementwise(n * config.embed_dim);
  std::uint64_t points = n;
  for (const auto& s : config.stages) {
    const std::uint64_t m = s.points_out;
    const std::uint64_t k = s.k;
    const std::uint64_t d = s.channels_in;
    const std::uint64_t c = s.channels_out;
    const std::uint64_t affine = config.scalar_affine ? 1 : d;
    t.elementwise(2 * 8 * points * m);  // FPS and KNN distance sweeps
    if (!config.disable_pn) {
      t.params += 2 * affine;
      t.elementwise(6 * m * k * d);
    }
    if (!config.disable_rpn) {
      t.params += 2 * affine;
      t.elementwise(m * k * d + 7 * m * d);
    }
    t.linear(m * k, 2 * d, c);
    t.norm(m * k, c);
    t.elementwise(m * k * c);
    const BlockConfig block{c, config.bottleneck_ratio, config.block_kind};
    for (std::size_t i = 0; i < s.pre_blocks; ++i) t.block(m * k, block);
    t.elementwise(m * k * c);  // max over neighbors
    for (std::size_t i = 0; i < s.post_blocks; ++i) t.block(m, block);
    points = m;
  }
  std::uint64_t width = config.stages.empty() ? config.embed_dim : config.stages.back().channels_out;
  t.elementwise(points * width);  // global max pool
  for (std::size_t w : config.head_widths) {
    t.linear(1, width, w);
    t.norm(1, w);
    t.elementwise(w);
    width = w;
  }
  t.linear(1, width, config.num_classes);
  return {t.params, t.flops, t.macs};
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) const {
  return depthwise ? channel_affine(x, weight, bias) : fully_connected(x, weight, bias);
}

template <typename T>
Tensor<T> BatchNorm<T>::forward(const Tensor<T>& x, bool training) {
  BatchNormOptions options;
  options.training = training;
  return batch_norm(x, gamma, beta, running_mean, running_var, options);
}

template <typename T>
Tensor<T> LinearBnRelu<T>::forward(const Tensor<T>& x, bool training) {
  return relu(norm.forward(linear.forward(x), training));
}

template <typename T>
Tensor<T> ResidualBlock<T>::forward(const Tensor<T>& x, bool training) {
  if (x.rank() == 0 || x.shape().back() != config.channels) {
    throw DimensionError("residual block expects last extent " + std::to_string(config.channels) + ", got " +
                         to_string(x.shape()));
  }
  Tensor<T> h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = norms[i].forward(layers[i].forward(h), training);
    if (i + 1 < layers.size()) h = relu(h);
  }
  return relu(add(h, x));
}

template <typename T>
Tensor<T> c_resblock(const Tensor<T>& x, ResidualBlock<T>& block, bool training) {
  if (block.config.kind != BlockKind::CRes) throw ConfigError("c_resblock called with an InvRes block");
  return block.forward(x, training);
}

template <typename T>
Tensor<T> inv_resblock(const Tensor<T>& x, ResidualBlock<T>& block, bool training) {
  if (block.config.kind != BlockKind::InvRes) throw ConfigError("inv_resblock called with a C-Res block");
  return block.forward(x, training);
}

template <typename T>
PointNormModel<T>::PointNormModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)), init_rng_(seed) {
  config_.validate();
  embedding_ = {make_linear("embed.fc", 3, config_.embed_dim), make_norm("embed.bn", config_.embed_dim)};
  for (std::size_t i = 0; i < config_.stages.size(); ++i) {
    const auto& s = config_.stages[i];
    const std::string prefix = "stage" + std::to_string(i) + ".";
    Stage stage;
    if (!config_.disable_pn) {
      auto affine = NormAffine<T>::create(s.channels_in, config_.scalar_affine);
      affine.alpha = add_parameter(prefix + "pn.alpha", affine.alpha);
      affine.beta = add_parameter(prefix + "pn.beta", affine.beta);
      stage.dualnorm.pn = affine;
    }
    if (!config_.disable_rpn) {
      auto affine = NormAffine<T>::create(s.channels_in, config_.scalar_affine);
      affine.alpha = add_parameter(prefix + "rpn.alpha", affine.alpha);
      affine.beta = add_parameter(prefix + "rpn.beta", affine.beta);
      stage.dualnorm.rpn = affine;
    }
    stage.lift = {make_linear(prefix + "lift.fc", 2 * s.channels_in, s.channels_out),
                  make_norm(prefix + "lift.bn", s.channels_out)};
    const BlockConfig block{s.channels_out, config_.bottleneck_ratio, config_.block_kind};
    for (std::size_t b = 0; b < s.pre_blocks; ++b) {
      stage.pre.push_back(make_block(prefix + "pre" + std::to_string(b), block));
    }
    for (std::size_t b = 0; b < s.post_blocks; ++b) {
      stage.post.push_back(make_block(prefix + "post" + std::to_string(b), block));
    }
    stages_.push_back(std::move(stage));
  }
  std::size_t width = config_.stages.empty() ? config_.embed_dim : config_.stages.back().channels_out;
  for (std::size_t i = 0; i < config_.head_widths.size(); ++i) {
    const std::string prefix = "head.hidden" + std::to_string(i);
    head_hidden_.push_back(
        {make_linear(prefix + ".fc", width, config_.head_widths[i]), make_norm(prefix + ".bn", config_.head_widths[i])});
    width = config_.head_widths[i];
  }
  head_out_ = make_linear("head.out", width, config_.num_classes);
}

template <typename T>
Tensor<T> PointNormModel<T>::add_parameter(const std::string& name, Tensor<T> tensor) {
  tensor.set_requires_grad(true);
  parameters_.push_back({name, tensor});
  return tensor;
}

template <typename T>
Linear<T> PointNormModel<T>::make_linear(const std::string& name, std::size_t in, std::size_t out, bool depthwise) {
  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias.
  const double bound = 1.0 / std::sqrt(static_cast<double>(depthwise ? 1 : in));
  auto draw = [&] {
    const double u = static_cast<double>(init_rng_() >> 11) * 0x1.0p-53;
    return static_cast<T>((2.0 * u - 1.0) * bound);
  };
  const Shape wshape = depthwise ? Shape{out} : Shape{in, out};
  std::vector<T> w(numel(wshape));
  for (auto& v : w) v = draw();
  std::vector<T> b(out);
  for (auto& v : b) v = draw();
  Linear<T> layer;
  layer.depthwise = depthwise;
  layer.weight = add_parameter(name + ".weight", Tensor<T>::from(wshape, std::move(w)));
  layer.bias = add_parameter(name + ".bias", Tensor<T>::from({out}, std::move(b)));
  return layer;
}

template <typename T>
BatchNorm<T> PointNormModel<T>::make_norm(const std::string& name, std::size_t channels) {
  BatchNorm<T> norm;
  norm.gamma = add_parameter(name + ".gamma", Tensor<T>::full({channels}, T(1)));
  norm.beta = add_parameter(name + ".beta", Tensor<T>::full({channels}, T(0)));
  norm.running_mean = Tensor<T>::full({channels}, T(0));
  norm.running_var = Tensor<T>::full({channels}, T(1));
  buffers_.push_back({name + ".running_mean", norm.running_mean});
  buffers_.push_back({name + ".running_var", norm.running_var});
  return norm;
}

template <typename T>
ResidualBlock<T> PointNormModel<T>::make_block(const std::string& name, BlockConfig config) {
  ResidualBlock<T> block;
  block.config = config;
  const std::size_t c = config.channels;
  const std::size_t h = config.hidden();
  block.layers.push_back(make_linear(name + ".fc0", c, h));
  block.norms.push_back(make_norm(name + ".bn0", h));
  if (config.kind == BlockKind::InvRes) {
    block.layers.push_back(make_linear(name + ".dw", h, h, true));
    block.norms.push_back(make_norm(name + ".bn_dw", h));
  }
  block.layers.push_back(make_linear(name + ".fc1", h, c));
  block.norms.push_back(make_norm(name + ".bn1", c));
  return block;
}

template <typename T>
SamplingPlan PointNormModel<T>::plan(const Tensor<T>& coords) const {
  if (coords.rank() != 3 || coords.dim(2) != 3) {
    throw DimensionError("plan: coords must be [B, N, 3], got " + to_string(coords.shape()));
  }
  if (coords.dim(1) != config_.input_points) {
    throw DimensionError("plan: model built for " + std::to_string(config_.input_points) + " points, got " +
                         std::to_string(coords.dim(1)));
  }
  const std::size_t batch = coords.dim(0);
  SamplingPlan out;
  out.batch = batch;
  std::vector<T> current(coords.values().begin(), coords.values().end());
  std::size_t points = coords.dim(1);
  for (const auto& s : config_.stages) {
    StagePlan sp;
    sp.points_in = points;
    sp.points_out = s.points_out;
    sp.k = s.k;
    sp.samples.resize(batch * s.points_out);
    sp.neighbors.resize(batch * s.points_out * s.k);
    std::vector<T> next(batch * s.points_out * 3);
#pragma omp parallel for schedule(dynamic, 1) if (batch > 1)
    for (std::size_t b = 0; b < batch; ++b) {
      std::span<const T> cloud(current.data() + b * points * 3, points * 3);
      const auto picked = farthest_point_sample<T>(cloud, s.points_out, config_.seed_rule);
      const auto groups = knn_group<T>(cloud, picked, s.k);
      std::copy(picked.begin(), picked.end(), sp.samples.begin() + static_cast<std::ptrdiff_t>(b * s.points_out));
      std::copy(groups.begin(), groups.end(),
                sp.neighbors.begin() + static_cast<std::ptrdiff_t>(b * s.points_out * s.k));
      for (std::size_t i = 0; i < s.points_out; ++i) {
        for (std::size_t c = 0; c < 3; ++c) next[(b * s.points_out + i) * 3 + c] = cloud[picked[i] * 3 + c];
      }
    }
    out.stages.push_back(std::move(sp));
    current = std::move(next);
    points = s.points_out;
  }
  return out;
}

template <typename T>
Tensor<T> PointNormModel<T>::embed(const Tensor<T>& coords, bool training) {
  return embedding_.forward(coords, training);
}

template <typename T>
Tensor<T> PointNormModel<T>::stage_forward(std::size_t index, const Tensor<T>& features, const StagePlan& plan,
                                           ForwardContext& ctx) {
  auto& stage = stages_.at(index);
  const std::size_t batch = features.dim(0);
  const std::size_t m = plan.points_out;
  const std::size_t k = plan.k;
  const auto x_s = gather_rows(features, plan.samples, {batch, m});
  const auto x_g = gather_rows(features, plan.neighbors, {batch, m, k});
  DualNormTrace trace;
  auto h = dualnorm_apply(x_s, x_g, stage.dualnorm, config_.stats_mode, ctx.traces ? &trace : nullptr);
  if (ctx.traces) ctx.traces->push_back(trace);
  h = stage.lift.forward(h, ctx.training);
  for (auto& block : stage.pre) h = block.forward(h, ctx.training);
  h = max_pool_axis(h, 2);
  for (auto& block : stage.post) h = block.forward(h, ctx.training);
  return h;
}

template <typename T>
Tensor<T> PointNormModel<T>::classify(const Tensor<T>& features, ForwardContext& ctx) {
  if (ctx.training && config_.dropout > 0.0 && !ctx.rng) throw ContractError("classify: training dropout needs an rng");
  auto h = max_pool_axis(features, 1);
  for (auto& layer : head_hidden_) {
    h = layer.forward(h, ctx.training);
    if (ctx.training && config_.dropout > 0.0) h = dropout(h, config_.dropout, true, *ctx.rng);
  }
  return head_out_.forward(h);
}

template <typename T>
Tensor<T> PointNormModel<T>::forward(const Tensor<T>& coords, ForwardContext& ctx) {
  const auto sampling = plan(coords);
  return forward(coords, sampling, ctx);
}

template <typename T>
Tensor<T> PointNormModel<T>::forward(const Tensor<T>& coords, const SamplingPlan& sampling, ForwardContext& ctx) {
  if (sampling.stages.size() != stages_.size() || sampling.batch != coords.dim(0)) {
    throw DimensionError("forward: sampling plan does not match model/batch");
  }
  auto h = embed(coords, ctx.training);
  for (std::size_t i = 0; i < stages_.size(); ++i) h = stage_forward(i, h, sampling.stages[i], ctx);
  return classify(h, ctx);
}

template <typename T>
std::size_t PointNormModel<T>::parameter_count() const {
  std::size_t total = 0;
  for (const auto& p : parameters_) total += p.tensor.numel();
  return total;
}

template <typename T>
void PointNormModel<T>::zero_grad() {
  for (auto& p : parameters_) p.tensor.zero_grad();
}

template <typename T>
ResidualBlock<T>& PointNormModel<T>::block(std::size_t stage, bool pre, std::size_t index) {
  auto& s = stages_.at(stage);
  return pre ? s.pre.at(index) : s.post.at(index);
}

template struct Linear<float>;
template struct Linear<double>;
template struct BatchNorm<float>;
template struct BatchNorm<double>;
template struct LinearBnRelu<float>;
template struct LinearBnRelu<double>;
template struct ResidualBlock<float>;
template struct ResidualBlock<double>;
template Tensor<float> c_resblock<float>(const Tensor<float>&, ResidualBlock<float>&, bool);
template Tensor<double> c_resblock<double>(const Tensor<double>&, ResidualBlock<double>&, bool);
template Tensor<float> inv_resblock<float>(const Tensor<float>&, ResidualBlock<float>&, bool);
template Tensor<double> inv_resblock<double>(const Tensor<double>&, ResidualBlock<double>&, bool);
template class PointNormModel<float>;
template class PointNormModel<double>;

}  // namespace pointnorm
