#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "ambient/model.hpp"
#include "ambient/tensor.hpp"

namespace ambient {

/// Synthetic whole-sequence classification task. Every class has a fixed
/// Gaussian template [frames x feature_dim]; examples add noise and a random
/// circular time shift. An optional domain transform (a seeded orthogonal map
/// on the feature axis) defines a second domain over the same classes.
struct SyntheticTaskSpec {
  std::size_t num_classes = 8;
  std::size_t feature_dim = 12;
  std::size_t frames = 12;
  std::uint64_t template_seed = 1;
  double noise_std = 1.0;
  std::size_t time_shift_max = 2;
  std::optional<std::uint64_t> domain_transform_seed;

  void validate() const;
  friend bool operator==(const SyntheticTaskSpec&, const SyntheticTaskSpec&) = default;
};

enum class Split { train, eval };

/// Examples stored contiguously as [n x frames x feature_dim].
class Dataset {
 public:
  Dataset() = default;
  Dataset(std::size_t frames, std::size_t feature_dim) : frames_(frames), feature_dim_(feature_dim) {}

  std::size_t size() const noexcept { return labels_.size(); }
  bool empty() const noexcept { return labels_.empty(); }
  std::size_t frames() const noexcept { return frames_; }
  std::size_t feature_dim() const noexcept { return feature_dim_; }
  std::span<const int> labels() const noexcept { return labels_; }
  std::span<const double> example(std::size_t i) const;

  void push_back(std::span<const double> features, int label);
  /// Gathers examples into a batch tensor [B x frames x feature_dim].
  Tensor batch(std::span<const std::size_t> indices) const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
  Dataset subset(std::span<const std::size_t> indices) const;

  friend bool operator==(const Dataset&, const Dataset&) = default;

 private:
  std::size_t frames_ = 0;
  std::size_t feature_dim_ = 0;
  std::vector<double> features_;
  std::vector<int> labels_;
};

/// Class labels are assigned round-robin, so every class count is within one
/// of n / K. Train and eval splits draw noise from disjoint seed streams.
Dataset make_dataset(const SyntheticTaskSpec& spec, Split split, std::size_t n, std::uint64_t seed);

/// Seeded orthogonal [F x F] matrix used as the domain transform.
Tensor orthogonal_matrix(std::size_t dim, std::uint64_t seed);

enum class OptimizerKind { adam, sgd };

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 16;
  std::size_t total_steps = 1000;
  /// Step 0 is always snapshotted in addition to these.
  std::vector<std::size_t> snapshot_steps;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainResult {
  ParamStore final_params;
  /// step -> parameters after that many updates; always contains 0.
  std::map<std::size_t, ParamStore> snapshots;
  std::vector<double> losses;
};

/// Minibatch training on mean cross-entropy. Batches are drawn by walking a
/// seeded permutation of the dataset, reshuffled whenever fewer than
/// batch_size examples remain. Throws TrainingDiverged on a non-finite loss.
TrainResult train(const ParamStore& params, const Dataset& data, const TrainConfig& config);

struct EvalReport {
  double error_rate = 0.0;
  double mean_loss = 0.0;
  std::size_t num_examples = 0;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

/// Eval-mode error rate (argmax, ties to the lowest class) and mean loss.
EvalReport evaluate(const ParamStore& params, const Dataset& data);

}  // namespace ambient
