#include "pointnorm/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>

#include "json.hpp"
#include "pointnorm/errors.hpp"
#include "pointnorm/kernels.hpp"
#include "pointnorm/ops.hpp"
#include "pointnorm/random.hpp"

namespace pointnorm {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

template <typename T>
std::vector<std::int64_t> argmax_rows(const Tensor<T>& logits) {
  const std::size_t rows = logits.dim(0);
  const std::size_t cols = logits.dim(1);
  std::vector<std::int64_t> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* z = logits.values().data() + r * cols;
    out[r] = static_cast<std::int64_t>(std::max_element(z, z + cols) - z);
  }
  return out;
}

}  // namespace

Precision parse_precision(std::string_view name) {
  if (name == "float32" || name == "f32" || name == "float") return Precision::Float32;
  if (name == "float64" || name == "f64" || name == "double") return Precision::Float64;
  throw ConfigError("unknown precision '" + std::string(name) + "' (expected float32 or float64)");
}

std::string_view precision_name(Precision p) { return p == Precision::Float32 ? "float32" : "float64"; }

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("train: epochs must be positive");
  if (batch_size < 2) throw ConfigError("train: batch_size must be at least 2");
  if (!(lr_init > 0.0)) throw ConfigError("train: lr_init must be positive");
  if (!(lr_final >= 0.0 && lr_final < lr_init)) throw ConfigError("train: need 0 <= lr_final < lr_init");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw ConfigError("train: label_smoothing must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train: betas must be in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("train: adam_eps must be positive");
  if (!(max_translation >= 0.0)) throw ConfigError("train: max_translation must be >= 0");
}

std::string TrainConfig::to_json() const {
  nlohmann::json j{{"epochs", epochs},
                   {"batch_size", batch_size},
                   {"lr_init", lr_init},
                   {"lr_final", lr_final},
                   {"weight_decay", weight_decay},
                   {"label_smoothing", label_smoothing},
                   {"beta1", beta1},
                   {"beta2", beta2},
                   {"adam_eps", adam_eps},
                   {"seed", seed},
                   {"precision", precision_name(precision)},
                   {"deterministic", deterministic},
                   {"augment", augment},
                   {"max_translation", max_translation}};
  return j.dump();
}

MetricsRecord classification_metrics(std::span<const std::int64_t> predicted, std::span<const std::int64_t> labels,
                                     std::size_t num_classes) {
  if (labels.empty()) throw ArgumentError("metrics: empty dataset");
  if (predicted.size() != labels.size()) throw DimensionError("metrics: predictions and labels differ in length");
  std::vector<std::size_t> hits(num_classes), totals(num_classes);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw IndexError("metrics: label " + std::to_string(labels[i]) + " out of range");
    }
    const auto c = static_cast<std::size_t>(labels[i]);
    ++totals[c];
    if (predicted[i] == labels[i]) {
      ++hits[c];
      ++correct;
    }
  }
  MetricsRecord m;
  m.samples = labels.size();
  m.overall_accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  m.per_class.assign(num_classes, std::nan(""));
  double sum = 0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (totals[c] == 0) continue;
    m.per_class[c] = static_cast<double>(hits[c]) / static_cast<double>(totals[c]);
    sum += m.per_class[c];
    ++present;
  }
  m.mean_class_accuracy = sum / static_cast<double>(present);
  return m;
}

double cosine_lr(double t, double total, double lr_init, double lr_final) {
  if (total <= 0) return lr_final;
  const double f = std::clamp(t / total, 0.0, 1.0);
  return lr_final + (lr_init - lr_final) * (1.0 + std::cos(std::numbers::pi * f)) / 2.0;
}

template <typename T>
void adamw_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v, std::size_t t,
                  const AdamWHyper& hyper, std::string_view name) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    throw DimensionError("adamw: state for '" + std::string(name) + "' does not match the parameter");
  }
  if (t == 0) throw ArgumentError("adamw: step count starts at 1");
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!std::isfinite(grad[i])) {
      throw NumericError("adamw: non-finite gradient in '" + std::string(name) + "' at index " + std::to_string(i));
    }
  }
  const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(t));
  const double shrink = 1.0 - hyper.lr * hyper.weight_decay;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double mi = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
    const double vi = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double p = param[i] * shrink;
    param[i] = static_cast<T>(p - hyper.lr * (mi / c1) / (std::sqrt(vi / c2) + hyper.eps));
  }
}

template <typename T>
AdamW<T>::AdamW(std::vector<NamedTensor<T>>& params, AdamWHyper hyper) : params_(&params), hyper_(hyper) {
  for (const auto& p : params) {
    m_.emplace_back(p.tensor.numel(), T(0));
    v_.emplace_back(p.tensor.numel(), T(0));
  }
}

template <typename T>
void AdamW<T>::step(double lr) {
  ++step_;
  AdamWHyper h = hyper_;
  h.lr = lr;
  auto& params = *params_;
  if (params.size() != m_.size()) throw ContractError("adamw: parameter list changed size");
  std::vector<T> zeros;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = params[i].tensor;
    std::span<const T> g = t.grad();
    if (!t.has_grad()) {
      zeros.assign(t.numel(), T(0));
      g = zeros;
    }
    adamw_update<T>(t.mutable_values(), g, m_[i], v_[i], step_, h, params[i].name);
  }
}

PointCloud rigid_transform(const PointCloud& cloud, double angle, const double (&offset)[3]) {
  PointCloud out = cloud;
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const double x = cloud.coords[3 * i];
    const double y = cloud.coords[3 * i + 1];
    const double z = cloud.coords[3 * i + 2];
    out.coords[3 * i] = static_cast<float>(c * x + s * z + offset[0]);
    out.coords[3 * i + 1] = static_cast<float>(y + offset[1]);
    out.coords[3 * i + 2] = static_cast<float>(-s * x + c * z + offset[2]);
  }
  return out;
}

PointCloud augment(const PointCloud& cloud, std::mt19937_64& rng, double max_translation) {
  const double angle = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  double offset[3];
  for (double& o : offset) o = uniform(rng, -max_translation, max_translation);
  return rigid_transform(cloud, angle, offset);
}

template <typename T>
Tensor<T> batch_coords(const std::vector<const PointCloud*>& clouds) {
  if (clouds.empty()) throw ArgumentError("batch_coords: empty batch");
  const std::size_t n = clouds.front()->size();
  std::vector<T> values;
  values.reserve(clouds.size() * n * 3);
  for (const auto* c : clouds) {
    if (c->size() != n) throw DimensionError("batch_coords: clouds differ in point count");
    values.insert(values.end(), c->coords.begin(), c->coords.end());
  }
  return Tensor<T>::from({clouds.size(), n, 3}, std::move(values));
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                    std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(derive_seed(seed, {epoch, 0x5f}));
  shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    if (end - start < 2 && !batches.empty()) break;
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

template <typename T>
MetricsRecord train_epoch(PointNormModel<T>& model, const Dataset& data, AdamW<T>& optimizer,
                          const TrainConfig& config, std::size_t epoch, double lr) {
  if (data.empty()) throw ArgumentError("train_epoch: empty dataset");
  const auto start = Clock::now();
  const auto batches = epoch_batches(data.size(), config.batch_size, config.seed, epoch);
  std::vector<std::int64_t> predicted, labels;
  double loss_sum = 0;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    const auto& idx = batches[b];
    std::vector<PointCloud> augmented(idx.size());
    std::vector<const PointCloud*> clouds(idx.size());
    std::vector<std::int64_t> batch_labels(idx.size());
    if (config.augment) {
#pragma omp parallel for schedule(static)
      for (std::size_t i = 0; i < idx.size(); ++i) {
        std::mt19937_64 rng(derive_seed(config.seed, {epoch, idx[i], 0xa9}));
        augmented[i] = augment(data.clouds[idx[i]], rng, config.max_translation);
      }
    }
    for (std::size_t i = 0; i < idx.size(); ++i) {
      clouds[i] = config.augment ? &augmented[i] : &data.clouds[idx[i]];
      batch_labels[i] = data.clouds[idx[i]].label;
    }
    const auto coords = batch_coords<T>(clouds);
    model.zero_grad();
    std::mt19937_64 dropout_rng(derive_seed(config.seed, {epoch, b, 0xd7}));
    ForwardContext ctx;
    ctx.training = true;
    ctx.rng = &dropout_rng;
    const auto logits = model.forward(coords, ctx);
    const auto loss = label_smoothed_ce(logits, batch_labels, config.label_smoothing);
    if (!std::isfinite(loss.item())) {
      throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b));
    }
    backward(loss, BackwardOptions{true});
    optimizer.step(lr);
    loss_sum += static_cast<double>(loss.item()) * static_cast<double>(idx.size());
    const auto pred = argmax_rows(logits);
    predicted.insert(predicted.end(), pred.begin(), pred.end());
    labels.insert(labels.end(), batch_labels.begin(), batch_labels.end());
  }
  auto m = classification_metrics(predicted, labels, data.num_classes);
  m.epoch = epoch;
  m.loss = loss_sum / static_cast<double>(labels.size());
  m.lr = lr;
  m.wall_seconds = seconds_since(start);
  return m;
}

template <typename T>
MetricsRecord evaluate(PointNormModel<T>& model, const Dataset& data, std::size_t batch_size, double smoothing,
                       std::vector<std::int64_t>* predictions) {
  if (data.empty()) throw ArgumentError("evaluate: empty dataset");
  if (batch_size == 0) throw ArgumentError("evaluate: batch_size must be positive");
  const auto start = Clock::now();
  NoGradGuard no_grad;
  std::vector<std::int64_t> predicted, labels;
  double loss_sum = 0;
  for (std::size_t s = 0; s < data.size(); s += batch_size) {
    const std::size_t e = std::min(data.size(), s + batch_size);
    std::vector<const PointCloud*> clouds;
    std::vector<std::int64_t> batch_labels;
    for (std::size_t i = s; i < e; ++i) {
      clouds.push_back(&data.clouds[i]);
      batch_labels.push_back(data.clouds[i].label);
    }
    ForwardContext ctx;
    const auto logits = model.forward(batch_coords<T>(clouds), ctx);
    loss_sum += static_cast<double>(label_smoothed_ce(logits, batch_labels, smoothing).item()) *
                static_cast<double>(e - s);
    const auto pred = argmax_rows(logits);
    predicted.insert(predicted.end(), pred.begin(), pred.end());
    labels.insert(labels.end(), batch_labels.begin(), batch_labels.end());
  }
  auto m = classification_metrics(predicted, labels, data.num_classes);
  m.loss = loss_sum / static_cast<double>(labels.size());
  m.wall_seconds = seconds_since(start);
  if (predictions) *predictions = std::move(predicted);
  return m;
}

template <typename T>
FitResult fit(PointNormModel<T>& model, const Dataset& train, const Dataset& test, const TrainConfig& config,
              const EpochCallback& on_epoch) {
  config.validate();
  if (train.empty() || test.empty()) throw ArgumentError("fit: train and test sets must be nonempty");
  if (train.num_classes != model.config().num_classes) {
    throw ConfigError("fit: dataset has " + std::to_string(train.num_classes) + " classes, model " +
                      std::to_string(model.config().num_classes));
  }
  ThreadLimit threads(config.deterministic ? 1 : kernels::max_threads());
  const auto start = Clock::now();
  AdamW<T> optimizer(model.parameters(),
                     AdamWHyper{config.lr_init, config.beta1, config.beta2, config.adam_eps, config.weight_decay});
  FitResult result;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = cosine_lr(static_cast<double>(epoch), static_cast<double>(config.epochs), config.lr_init,
                                config.lr_final);
    EpochResult r;
    r.train = train_epoch(model, train, optimizer, config, epoch, lr);
    r.test = evaluate(model, test, config.batch_size);
    r.test.epoch = epoch;
    r.test.lr = lr;
    result.epochs.push_back(r);
    if (on_epoch && !on_epoch(r)) {
      result.stopped_early = epoch + 1 < config.epochs;
      break;
    }
  }
  result.seconds = seconds_since(start);
  return result;
}

ThreadLimit::ThreadLimit(int threads) : previous_(kernels::max_threads()) { kernels::set_num_threads(threads); }
ThreadLimit::~ThreadLimit() { kernels::set_num_threads(previous_); }

template void adamw_update<float>(std::span<float>, std::span<const float>, std::span<float>, std::span<float>,
                                  std::size_t, const AdamWHyper&, std::string_view);
template void adamw_update<double>(std::span<double>, std::span<const double>, std::span<double>, std::span<double>,
                                   std::size_t, const AdamWHyper&, std::string_view);
template class AdamW<float>;
template class AdamW<double>;
template Tensor<float> batch_coords<float>(const std::vector<const PointCloud*>&);
template Tensor<double> batch_coords<double>(const std::vector<const PointCloud*>&);
template MetricsRecord train_epoch<float>(PointNormModel<float>&, const Dataset&, AdamW<float>&, const TrainConfig&,
                                          std::size_t, double);
template MetricsRecord train_epoch<double>(PointNormModel<double>&, const Dataset&, AdamW<double>&,
                                           const TrainConfig&, std::size_t, double);
template MetricsRecord evaluate<float>(PointNormModel<float>&, const Dataset&, std::size_t, double,
                                       std::vector<std::int64_t>*);
template MetricsRecord evaluate<double>(PointNormModel<double>&, const Dataset&, std::size_t, double,
                                        std::vector<std::int64_t>*);
template FitResult fit<float>(PointNormModel<float>&, const Dataset&, const Dataset&, const TrainConfig&,
                              const EpochCallback&);
template FitResult fit<double>(PointNormModel<double>&, const Dataset&, const Dataset&, const TrainConfig&,
                               const EpochCallback&);

}  // namespace pointnorm
