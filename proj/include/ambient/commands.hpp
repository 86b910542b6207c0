#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ambient/ablation.hpp"
#include "ambient/churn.hpp"
#include "ambient/config.hpp"
#include "ambient/flsim.hpp"

namespace ambient {

/// Run directory layout: config.txt, checkpoints/step_<t>.ambp, csv/<name>.csv.
struct RunDir {
  std::filesystem::path root;

  std::filesystem::path config_file() const { return root / "config.txt"; }
  std::filesystem::path checkpoints() const { return root / "checkpoints"; }
  std::filesystem::path checkpoint(std::size_t step) const;
  std::filesystem::path csv(std::string_view name) const { return root / "csv" / (std::string(name) + ".csv"); }
  /// Creates the directories and writes the config copy.
  void prepare(const ExperimentConfig& config) const;
};

struct TrainSummary {
  std::vector<std::filesystem::path> checkpoints;
  std::optional<EvalReport> train_eval;
  std::optional<EvalReport> eval;
};

TrainSummary cmd_train(const ExperimentConfig& config, const std::filesystem::path& out);

/// Ablates the checkpoint at `checkpoint`. Initial values come from `initial`
/// when given, otherwise they are regenerated from the checkpoint's root seed
/// and rounded to f32 as a saved step-0 checkpoint would be.
AblationResult cmd_ablate(const ExperimentConfig& config, const std::filesystem::path& checkpoint,
                          const std::filesystem::path& out,
                          const std::optional<std::filesystem::path>& initial = std::nullopt);

ChurnTable cmd_churn(const ExperimentConfig& config, const std::filesystem::path& checkpoint,
                     const std::filesystem::path& out,
                     const std::optional<std::filesystem::path>& initial = std::nullopt);

/// Domain transfer; starts from `checkpoint` when given, otherwise pretrains.
TransferResult cmd_fl(const ExperimentConfig& config, const std::optional<std::filesystem::path>& checkpoint,
                      const std::filesystem::path& out);

struct StabilityRow {
  std::string layer;
  double min = 0.0;
  double mean = 0.0;
  double max = 0.0;
};

/// Aggregates csv/ablation.csv of every run under `dir` (the directory itself
/// and its immediate subdirectories) into csv/stability.csv under `out`.
std::vector<StabilityRow> cmd_report(const std::filesystem::path& dir, const std::filesystem::path& out);

std::string format_ablation_csv(const AblationResult& result);
std::string format_fl_csv(const std::vector<TransferRow>& rows);
std::string format_stability_csv(const std::vector<StabilityRow>& rows);

struct PresetBundle {
  std::string name;
  /// (run name, config) pairs; configs differ only in the studied variable.
  std::vector<std::pair<std::string, ExperimentConfig>> runs;
  /// Runs differ only in seed, so a stability report over them is meaningful.
  bool seed_sweep = false;
};

std::vector<std::string> preset_names();
PresetBundle preset_experiments(std::string_view name, const ExperimentConfig& base = {});
/// Writes <out>/<run>/config.txt for each run.
void write_preset(const PresetBundle& bundle, const std::filesystem::path& out);
/// Runs train, ablate, churn and (when schedules are set) fl for every run,
/// then writes the stability report over the bundle if it is a seed sweep.
void run_preset(const PresetBundle& bundle, const std::filesystem::path& out);

}  // namespace ambient
