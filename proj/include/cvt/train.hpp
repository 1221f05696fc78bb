#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cvt/model.hpp"

CVT_BEGIN_NAMESPACE

// ---------------------------------------------------------------------------
// Optimizer: Adam moments with decoupled weight decay.

struct OptimConfig {
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

struct OptimState {
  struct Moments {
    std::vector<Real> first;
    std::vector<Real> second;
  };
  std::map<std::string, Moments> moments;  // keyed by parameter name
  std::int64_t step = 0;
  OptimConfig config;
};

/// One update with learning rate `lr`:
///   p <- p * (1 - lr * wd)            (decay-eligible tensors only)
///   p <- p - lr * m_hat / (sqrt(v_hat) + eps)
/// Tensors without a grad are treated as having a zero grad.
void optimizer_step(const ParamList& params, OptimState& state, double lr);

/// Linear warmup to base_lr, then half-cosine decay to zero at total_steps.
double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr, std::int64_t warmup_steps);

// ---------------------------------------------------------------------------
// Synthetic classification task: K fixed random templates plus Gaussian noise.

struct DatasetConfig {
  int num_classes = 4;
  int image_size = 32;
  int channels = 3;
  double noise = 1.0;
  double min_margin = 1.0;  // required min pairwise L2 distance of templates
  std::uint64_t seed = 0;
};

struct Batch {
  Tensor images;  // [B x C x S x S]
  std::vector<int> labels;
};

class SyntheticDataset {
 public:
  explicit SyntheticDataset(DatasetConfig config);

  const DatasetConfig& config() const { return config_; }
  /// Sample `index` is deterministic in (seed, index); label = index mod K.
  Batch batch(std::span<const std::uint64_t> indices) const;
  double min_pairwise_distance() const;
  const std::vector<std::vector<Real>>& templates() const { return templates_; }

 private:
  DatasetConfig config_;
  std::vector<std::vector<Real>> templates_;
};

// ---------------------------------------------------------------------------

struct TrainOptions {
  int steps = 300;
  int batch_size = 32;
  OptimConfig optim;
  double warmup_frac = 0.1;
  std::uint64_t seed = 0;
  bool shuffle_labels = false;  // no-signal control: permute labels within every batch
};

struct LogRecord {
  int step = 0;
  double lr = 0;
  double loss = 0;
  double grad_norm = 0;
};

struct TrainingLog {
  std::vector<LogRecord> records;
  /// Header line then one tab-separated record per step.
  std::string to_lines() const;
};

/// Runs `options.steps` optimizer steps in train mode. Throws NumericError
/// carrying the step index if the loss stops being finite.
TrainingLog train(CvtModel& model, const SyntheticDataset& dataset, const TrainOptions& options);

struct EvalResult {
  double accuracy = 0;
  double mean_loss = 0;
  std::int64_t samples = 0;
};

using Classifier = std::function<Tensor(const Tensor& images)>;

/// Scores `num_samples` held-out samples selected by `seed`.
EvalResult evaluate(const Classifier& classify, const SyntheticDataset& dataset, std::int64_t num_samples,
                    std::uint64_t seed, int batch_size = 64);
/// Eval-mode, no-grad evaluation of a model; restores its previous mode.
EvalResult evaluate(CvtModel& model, const SyntheticDataset& dataset, std::int64_t num_samples,
                    std::uint64_t seed, int batch_size = 64);

CVT_END_NAMESPACE
