#include "cvt/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

CVT_BEGIN_NAMESPACE

void optimizer_step(const ParamList& params, OptimState& state, double lr) {
  if (lr < 0) throw ConfigError("lr", "must be >= 0");
  const auto& hp = state.config;
  state.step += 1;
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
  for (const auto& p : params) {
    Tensor t = p.tensor;
    auto data = t.mutable_data();
    auto grad = t.grad();
    auto& mom = state.moments[p.name];
    if (mom.first.empty()) {
      mom.first.assign(data.size(), Real(0));
      mom.second.assign(data.size(), Real(0));
    }
    const double decay = p.decay ? 1.0 - lr * hp.weight_decay : 1.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
      const double m = hp.beta1 * mom.first[i] + (1.0 - hp.beta1) * g;
      const double v = hp.beta2 * mom.second[i] + (1.0 - hp.beta2) * g * g;
      mom.first[i] = static_cast<Real>(m);
      mom.second[i] = static_cast<Real>(v);
      const double update = (m / bc1) / (std::sqrt(v / bc2) + hp.eps);
      data[i] = static_cast<Real>(static_cast<double>(data[i]) * decay - lr * update);
    }
  }
}

double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr, std::int64_t warmup_steps) {
  if (total_steps < 1 || step < 0 || step > total_steps) {
    throw ContractError("cosine_lr: step " + std::to_string(step) + " outside [0, " +
                        std::to_string(total_steps) + "]");
  }
  if (warmup_steps < 0 || warmup_steps > total_steps) {
    throw ContractError("cosine_lr: warmup_steps must lie in [0, total_steps]");
  }
  if (step == total_steps) return 0.0;
  if (step < warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const double progress =
      static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

SyntheticDataset::SyntheticDataset(DatasetConfig config) : config_(config) {
  if (config_.num_classes < 2) throw ConfigError("num_classes", "need at least 2 classes");
  if (config_.image_size < 1 || config_.channels < 1) throw ConfigError("image_size", "must be >= 1");
  const std::size_t n = static_cast<std::size_t>(config_.channels) * config_.image_size * config_.image_size;
  std::mt19937_64 rng(mix(config_.seed));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int k = 0; k < config_.num_classes; ++k) {
    std::vector<Real> t(n);
    for (auto& v : t) v = static_cast<Real>(normal(rng));
    templates_.push_back(std::move(t));
  }
  if (min_pairwise_distance() <= config_.min_margin) {
    throw ConfigError("min_margin", "templates closer than the declared margin");
  }
}

double SyntheticDataset::min_pairwise_distance() const {
  double best = INFINITY;
  for (std::size_t a = 0; a < templates_.size(); ++a) {
    for (std::size_t b = a + 1; b < templates_.size(); ++b) {
      double d = 0;
      for (std::size_t i = 0; i < templates_[a].size(); ++i) {
        const double diff = templates_[a][i] - templates_[b][i];
        d += diff * diff;
      }
      best = std::min(best, std::sqrt(d));
    }
  }
  return best;
}

Batch SyntheticDataset::batch(std::span<const std::uint64_t> indices) const {
  const std::int64_t B = static_cast<std::int64_t>(indices.size()), S = config_.image_size;
  const std::size_t per = templates_[0].size();
  std::vector<Real> pixels(per * indices.size());
  Batch out;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int label = static_cast<int>(indices[i] % static_cast<std::uint64_t>(config_.num_classes));
    std::mt19937_64 rng(mix(mix(config_.seed) ^ indices[i]));
    std::normal_distribution<double> normal(0.0, config_.noise);
    const auto& t = templates_[static_cast<std::size_t>(label)];
    for (std::size_t j = 0; j < per; ++j) pixels[i * per + j] = t[j] + static_cast<Real>(normal(rng));
    out.labels.push_back(label);
  }
  out.images = Tensor::from_data({B, config_.channels, S, S}, std::move(pixels));
  return out;
}

// ---------------------------------------------------------------------------

std::string TrainingLog::to_lines() const {
  std::ostringstream os;
  os.precision(9);
  os << "step\tlr\tloss\tgrad_norm\n";
  for (const auto& r : records) os << r.step << '\t' << r.lr << '\t' << r.loss << '\t' << r.grad_norm << '\n';
  return os.str();
}

TrainingLog train(CvtModel& model, const SyntheticDataset& dataset, const TrainOptions& options) {
  if (options.steps < 1) throw ConfigError("steps", "must be >= 1");
  if (options.batch_size < 1) throw ConfigError("batch_size", "must be >= 1");
  if (options.optim.lr < 0) throw ConfigError("lr", "must be >= 0");
  if (options.warmup_frac < 0 || options.warmup_frac > 1) throw ConfigError("warmup_frac", "must lie in [0, 1]");

  model.set_mode(Mode::train);
  const ParamList params = model.parameters();
  OptimState state;
  state.config = options.optim;
  const auto warmup = static_cast<std::int64_t>(std::llround(options.warmup_frac * options.steps));
  // Training indices keep the top bit clear; evaluation sets it.
  std::mt19937_64 rng(mix(options.seed ^ 0x7472616eULL));
  TrainingLog log;
  std::vector<std::uint64_t> indices(static_cast<std::size_t>(options.batch_size));

  for (int step = 0; step < options.steps; ++step) {
    for (auto& idx : indices) idx = rng() >> 1;
    Batch batch = dataset.batch(indices);
    if (options.shuffle_labels) std::shuffle(batch.labels.begin(), batch.labels.end(), rng);

    model.zero_grad();
    Tensor loss = cross_entropy(model.forward(batch.images), batch.labels);
    const double loss_value = loss.item();
    if (!std::isfinite(loss_value)) {
      throw NumericError("non-finite loss at step " + std::to_string(step), step);
    }
    loss.backward();

    double sq = 0;
    for (const auto& p : params) {
      for (Real g : p.tensor.grad()) sq += static_cast<double>(g) * g;
    }
    const double lr = cosine_lr(step, options.steps, options.optim.lr, warmup);
    optimizer_step(params, state, lr);
    log.records.push_back({step, lr, loss_value, std::sqrt(sq)});
  }
  return log;
}

EvalResult evaluate(const Classifier& classify, const SyntheticDataset& dataset, std::int64_t num_samples,
                    std::uint64_t seed, int batch_size) {
  if (num_samples < 1 || batch_size < 1) throw ConfigError("samples", "must be >= 1");
  NoGradGuard no_grad;
  const std::uint64_t base = mix(seed ^ 0x6576616cULL) | (1ULL << 63);
  EvalResult result;
  double loss_sum = 0;
  std::int64_t correct = 0;
  std::vector<std::uint64_t> indices;
  for (std::int64_t start = 0; start < num_samples; start += batch_size) {
    const std::int64_t n = std::min<std::int64_t>(batch_size, num_samples - start);
    indices.clear();
    // Consecutive indices keep the classes balanced (label = index mod K).
    for (std::int64_t i = 0; i < n; ++i) indices.push_back(base + static_cast<std::uint64_t>(start + i));
    Batch batch = dataset.batch(indices);
    Tensor logits = classify(batch.images);
    loss_sum += cross_entropy(logits, batch.labels).item() * static_cast<double>(n);
    const std::int64_t K = logits.dim(1);
    auto z = logits.data();
    for (std::int64_t b = 0; b < n; ++b) {
      const Real* row = z.data() + b * K;
      const auto pred = std::max_element(row, row + K) - row;
      if (pred == batch.labels[static_cast<std::size_t>(b)]) ++correct;
    }
  }
  result.samples = num_samples;
  result.accuracy = static_cast<double>(correct) / static_cast<double>(num_samples);
  result.mean_loss = loss_sum / static_cast<double>(num_samples);
  return result;
}

EvalResult evaluate(CvtModel& model, const SyntheticDataset& dataset, std::int64_t num_samples, std::uint64_t seed,
                    int batch_size) {
  const Mode previous = model.mode();
  model.set_mode(Mode::eval);
  try {
    auto r = evaluate([&](const Tensor& x) { return model.forward(x); }, dataset, num_samples, seed, batch_size);
    model.set_mode(previous);
    return r;
  } catch (...) {
    model.set_mode(previous);
    throw;
  }
}

CVT_END_NAMESPACE
