#include "ambient/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ambient/errors.hpp"
#include "ambient/rng.hpp"

namespace ambient {

namespace {
constexpr std::uint64_t kTrainStream = 0x7472616e;  // "tran"
constexpr std::uint64_t kEvalStream = 0x6576616c;   // "eval"
constexpr std::size_t kEvalChunk = 64;
}  // namespace

void SyntheticTaskSpec::validate() const {
  if (num_classes < 2) throw ConfigError("task: num_classes must be at least 2");
  if (feature_dim == 0 || frames == 0) throw ConfigError("task: frames and feature_dim must be positive");
  if (!(noise_std >= 0.0)) throw ConfigError("task: noise_std must be non-negative");
  if (time_shift_max >= frames) throw ConfigError("task: time_shift_max must be below frames");
}

std::span<const double> Dataset::example(std::size_t i) const {
  const std::size_t len = frames_ * feature_dim_;
  return std::span<const double>(features_).subspan(i * len, len);
}

void Dataset::push_back(std::span<const double> features, int label) {
  if (features.size() != frames_ * feature_dim_) throw ShapeError("dataset: example has the wrong size");
  features_.insert(features_.end(), features.begin(), features.end());
  labels_.push_back(label);
}

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  const std::size_t len = frames_ * feature_dim_;
  std::vector<double> data;
  data.reserve(indices.size() * len);
  for (std::size_t i : indices) {
    const auto ex = example(i);
    data.insert(data.end(), ex.begin(), ex.end());
  }
  return Tensor({indices.size(), frames_, feature_dim_}, std::move(data));
}

std::vector<int> Dataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(labels_.at(i));
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out(frames_, feature_dim_);
  for (std::size_t i : indices) out.push_back(example(i), labels_.at(i));
  return out;
}

Tensor orthogonal_matrix(std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  // Columns of a Gaussian matrix, orthonormalised by modified Gram-Schmidt.
  std::vector<std::vector<double>> cols(dim, std::vector<double>(dim));
  for (auto& c : cols)
    for (double& v : c) v = rng.normal();
  for (std::size_t j = 0; j < dim; ++j) {
    for (std::size_t i = 0; i < j; ++i) {
      double dot = 0.0;
      for (std::size_t r = 0; r < dim; ++r) dot += cols[j][r] * cols[i][r];
      for (std::size_t r = 0; r < dim; ++r) cols[j][r] -= dot * cols[i][r];
    }
    double norm = 0.0;
    for (double v : cols[j]) norm += v * v;
    norm = std::sqrt(norm);
    for (double& v : cols[j]) v /= norm;
  }
  Tensor m = Tensor::zeros({dim, dim});
  for (std::size_t r = 0; r < dim; ++r)
    for (std::size_t c = 0; c < dim; ++c) m.at(r, c) = cols[c][r];
  return m;
}

Dataset make_dataset(const SyntheticTaskSpec& spec, Split split, std::size_t n, std::uint64_t seed) {
  spec.validate();
  if (n == 0) throw ConfigError("make_dataset: n must be at least 1");
  const std::size_t t_len = spec.frames, f = spec.feature_dim;

  std::vector<std::vector<double>> templates(spec.num_classes);
  for (std::size_t k = 0; k < spec.num_classes; ++k) {
    Rng rng(mix_seeds(spec.template_seed, k));
    templates[k].resize(t_len * f);
    for (double& v : templates[k]) v = rng.normal();
  }
  std::optional<Tensor> transform;
  if (spec.domain_transform_seed) transform = orthogonal_matrix(f, *spec.domain_transform_seed);

  Rng rng(mix_seeds(seed, split == Split::train ? kTrainStream : kEvalStream));
  Dataset out(t_len, f);
  std::vector<double> ex(t_len * f), mapped(t_len * f);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % spec.num_classes;
    const std::size_t shift = spec.time_shift_max ? static_cast<std::size_t>(rng.below(spec.time_shift_max + 1)) : 0;
    const auto& tmpl = templates[label];
    for (std::size_t t = 0; t < t_len; ++t) {
      const std::size_t src = (t + t_len - shift) % t_len;
      for (std::size_t c = 0; c < f; ++c) ex[t * f + c] = tmpl[src * f + c] + spec.noise_std * rng.normal();
    }
    if (transform) {
      for (std::size_t t = 0; t < t_len; ++t)
        for (std::size_t c = 0; c < f; ++c) {
          double s = 0.0;
          for (std::size_t r = 0; r < f; ++r) s += ex[t * f + r] * transform->at(r, c);
          mapped[t * f + c] = s;
        }
      out.push_back(mapped, static_cast<int>(label));
    } else {
      out.push_back(ex, static_cast<int>(label));
    }
  }
  return out;
}

void TrainConfig::validate() const {
  if (!(lr >= 0.0)) throw ConfigError("train: lr must be non-negative");
  if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train: Adam betas must be in [0, 1)");
  }
  for (std::size_t s : snapshot_steps) {
    if (s > total_steps) throw ConfigError("train: snapshot step " + std::to_string(s) + " beyond total_steps");
  }
}

namespace {

class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed) : rng_(seed), order_(n), batch_(std::min(batch, n)) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    reshuffle();
  }

  std::vector<std::size_t> next() {
    if (cursor_ + batch_ > order_.size()) reshuffle();
    std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + batch_));
    cursor_ += batch_;
    return out;
  }

 private:
  void reshuffle() {
    rng_.shuffle(order_);
    cursor_ = 0;
  }

  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t cursor_ = 0;
};

struct AdamMoments {
  Tensor m;
  Tensor v;
};

}  // namespace

TrainResult train(const ParamStore& params, const Dataset& data, const TrainConfig& config) {
  config.validate();
  if (data.empty()) throw ConfigError("train: dataset is empty");

  TrainResult result;
  result.final_params = params;
  ParamStore& current = result.final_params;
  result.snapshots.emplace(0, current);

  std::map<std::string, AdamMoments> moments;
  std::map<std::string, ParamKey> keys_by_name;
  for (const auto& [key, entry] : current.entries()) {
    if (!entry.trainable) continue;
    keys_by_name.emplace(key.name(), key);
    if (config.optimizer == OptimizerKind::adam) {
      moments.emplace(key.name(), AdamMoments{Tensor::zeros(entry.value.shape()), Tensor::zeros(entry.value.shape())});
    }
  }

  BatchSampler sampler(data.size(), config.batch_size, config.seed);
  double beta1_pow = 1.0, beta2_pow = 1.0;
  for (std::size_t step = 1; step <= config.total_steps; ++step) {
    const std::vector<std::size_t> idx = sampler.next();
    const Tensor batch = data.batch(idx);
    const std::vector<int> labels = data.batch_labels(idx);

    GradientMap grads;
    BufferUpdates buffers;
    double loss_value = 0.0;
    try {
      Graph graph(true);
      Var logits = forward(current, batch, NormMode::train, graph, &buffers);
      Var loss = ops::cross_entropy(logits, labels);
      loss_value = loss.value().item();
      grads = graph.backward(loss);
    } catch (const NumericError&) {
      throw TrainingDiverged(static_cast<std::int64_t>(step));
    }
    if (!std::isfinite(loss_value)) throw TrainingDiverged(static_cast<std::int64_t>(step));
    result.losses.push_back(loss_value);

    beta1_pow *= config.beta1;
    beta2_pow *= config.beta2;
    for (auto& [name, grad] : grads) {
      Tensor& p = current.at(keys_by_name.at(name)).value;
      if (config.optimizer == OptimizerKind::sgd) {
        for (std::size_t i = 0; i < p.size(); ++i) p[i] -= config.lr * grad[i];
        continue;
      }
      AdamMoments& mom = moments.at(name);
      const double c1 = 1.0 - beta1_pow, c2 = 1.0 - beta2_pow;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double g = grad[i];
        mom.m[i] = config.beta1 * mom.m[i] + (1.0 - config.beta1) * g;
        mom.v[i] = config.beta2 * mom.v[i] + (1.0 - config.beta2) * g * g;
        const double mhat = mom.m[i] / c1, vhat = mom.v[i] / c2;
        p[i] -= config.lr * mhat / (std::sqrt(vhat) + config.adam_eps);
      }
    }
    for (auto& [key, value] : buffers) current.at(key).value = std::move(value);

    if (std::find(config.snapshot_steps.begin(), config.snapshot_steps.end(), step) != config.snapshot_steps.end()) {
      result.snapshots.emplace(step, current);
    }
  }
  return result;
}

EvalReport evaluate(const ParamStore& params, const Dataset& data) {
  if (data.empty()) throw ConfigError("evaluate: dataset is empty");
  std::size_t wrong = 0;
  double loss_sum = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += kEvalChunk) {
    const std::size_t end = std::min(start + kEvalChunk, data.size());
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor logits = predict_logits(params, data.batch(idx));
    const std::vector<int> labels = data.batch_labels(idx);
    const std::vector<double> losses = per_row_cross_entropy(logits, labels);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < logits.cols(); ++c)
        if (logits.at(r, c) > logits.at(r, best)) best = c;
      if (static_cast<int>(best) != labels[r]) ++wrong;
      loss_sum += losses[r];
    }
  }
  EvalReport report;
  report.num_examples = data.size();
  report.error_rate = static_cast<double>(wrong) / static_cast<double>(data.size());
  report.mean_loss = loss_sum / static_cast<double>(data.size());
  return report;
}

}  // namespace ambient
