#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ambient/ablation.hpp"
#include "ambient/flsim.hpp"
#include "ambient/model.hpp"
#include "ambient/train.hpp"

namespace ambient {

/// Everything one experiment run needs. Text form is one "key=value" per
/// line with dotted section prefixes; '#' starts a comment; unknown keys
/// are rejected. Every seed used by a run is derived from `seed`.
struct ExperimentConfig {
  std::uint64_t seed = 1;
  /// Class count, feature dim and frames are taken from the task section.
  ModelConfig model = ModelConfig::preset(SizePreset::toyL);
  /// Shared by both domains apart from the transform seeds.
  SyntheticTaskSpec task;
  std::optional<std::uint64_t> domain_a_transform;
  std::optional<std::uint64_t> domain_b_transform = 7;
  std::size_t train_examples = 512;
  std::size_t eval_examples = 512;
  std::size_t transfer_train_examples = 256;
  std::size_t transfer_eval_examples = 512;

  OptimizerKind optimizer = OptimizerKind::adam;
  double lr = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 16;
  std::size_t total_steps = 1000;
  std::vector<std::size_t> snapshot_steps;

  ResetMode ablation_mode = ResetMode::rerand;
  double epsilon = 0.1;
  std::vector<std::uint64_t> ablation_seeds{101, 102, 103};

  /// Snapshot compared against step 0; defaults to total_steps.
  std::optional<std::size_t> churn_step;

  FLConfig fl;
  std::vector<DropoutSchedule> schedules;

  static ExperimentConfig parse(std::string_view text);
  static ExperimentConfig load(const std::filesystem::path& path);
  /// Canonical text form; parse(serialize()) reproduces the config.
  std::string serialize() const;
  void validate() const;

  /// Model config with task dimensions filled in.
  ModelConfig model_config() const;
  SyntheticTaskSpec domain(Domain d) const;
  TrainConfig train_config() const;
  TransferSetup transfer_setup() const;
  Dataset dataset(Domain d, Split split) const;
};

}  // namespace ambient
