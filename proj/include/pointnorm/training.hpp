#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pointnorm/data_io.hpp"
#include "pointnorm/network.hpp"

namespace pointnorm {

enum class Precision { Float32, Float64 };

Precision parse_precision(std::string_view name);
std::string_view precision_name(Precision p);

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 32;
  double lr_init = 0.01;
  double lr_final = 1e-4;
  double weight_decay = 0.05;
  double label_smoothing = 0.2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1;
  Precision precision = Precision::Float32;
  bool deterministic = false;
  bool augment = true;
  double max_translation = 0.2;

  // Throws ConfigError.
  void validate() const;
  std::string to_json() const;
};

struct MetricsRecord {
  std::size_t epoch = 0;
  double overall_accuracy = 0;
  double mean_class_accuracy = 0;
  double loss = 0;
  double lr = 0;
  double wall_seconds = 0;
  std::size_t samples = 0;
  // Recall per class; NaN for classes absent from the set.
  std::vector<double> per_class;
};

// OA, mAcc and per-class recall from predictions. Absent classes are left
// out of mAcc. ArgumentError on empty input.
MetricsRecord classification_metrics(std::span<const std::int64_t> predicted, std::span<const std::int64_t> labels,
                                     std::size_t num_classes);

// lr_final + (lr_init - lr_final) * (1 + cos(pi t / T)) / 2.
double cosine_lr(double t, double total, double lr_init, double lr_final);

struct AdamWHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0;
};

// One decoupled AdamW update of a flat parameter at step t >= 1: first
// p -= lr * wd * p, then the bias-corrected Adam step. NumericError naming
// `name` on a non-finite gradient (nothing is modified in that case).
template <typename T>
void adamw_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v, std::size_t t,
                  const AdamWHyper& hyper, std::string_view name);

template <typename T>
class AdamW {
 public:
  AdamW(std::vector<NamedTensor<T>>& params, AdamWHyper hyper);

  // Applies one update with the current grads (absent grads count as zero).
  void step(double lr);
  std::size_t steps() const { return step_; }
  const AdamWHyper& hyper() const { return hyper_; }

 private:
  std::vector<NamedTensor<T>>* params_;
  AdamWHyper hyper_;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
  std::size_t step_ = 0;
};

// Rotation by `angle` about y, then translation by `offset`.
PointCloud rigid_transform(const PointCloud& cloud, double angle, const double (&offset)[3]);
// Angle uniform in [0, 2 pi), per-axis offset uniform in [-max_translation, max_translation].
PointCloud augment(const PointCloud& cloud, std::mt19937_64& rng, double max_translation = 0.2);

// [B, N, 3] tensor from dataset entries.
template <typename T>
Tensor<T> batch_coords(const std::vector<const PointCloud*>& clouds);

// Batch indices for one epoch: seeded shuffle, a trailing batch of a single
// sample is dropped (batch statistics need two samples).
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                    std::size_t epoch);

// One pass over `data` with the given lr. Metrics are computed from the
// training-mode predictions. NumericError with epoch and batch index on a
// non-finite loss.
template <typename T>
MetricsRecord train_epoch(PointNormModel<T>& model, const Dataset& data, AdamW<T>& optimizer,
                          const TrainConfig& config, std::size_t epoch, double lr);

// Eval-mode pass; loss is the label-smoothed cross-entropy with `smoothing`.
template <typename T>
MetricsRecord evaluate(PointNormModel<T>& model, const Dataset& data, std::size_t batch_size = 32,
                       double smoothing = 0.0, std::vector<std::int64_t>* predictions = nullptr);

struct EpochResult {
  MetricsRecord train;
  MetricsRecord test;
};

// Returns false to stop training after this epoch.
using EpochCallback = std::function<bool(const EpochResult&)>;

struct FitResult {
  std::vector<EpochResult> epochs;
  bool stopped_early = false;
  double seconds = 0;
};

// Per-epoch cosine schedule over config.epochs; evaluates on `test` after
// every epoch. With config.deterministic the run uses one thread.
template <typename T>
FitResult fit(PointNormModel<T>& model, const Dataset& train, const Dataset& test, const TrainConfig& config,
              const EpochCallback& on_epoch = {});

// Sets the OpenMP thread count for the lifetime of the guard.
class ThreadLimit {
 public:
  explicit ThreadLimit(int threads);
  ~ThreadLimit();
  ThreadLimit(const ThreadLimit&) = delete;
  ThreadLimit& operator=(const ThreadLimit&) = delete;

 private:
  int previous_;
};

}  // namespace pointnorm
