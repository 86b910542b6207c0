#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "ambient/model.hpp"
#include "ambient/train.hpp"

namespace ambient {

enum class ResetMode { reinit, rerand };

std::string_view to_string(ResetMode mode);
ResetMode parse_reset_mode(std::string_view text);

/// Copies every trainable tensor of encoder layer `layer` from `initial` into
/// a copy of `trained`. Batch-norm running statistics keep their trained
/// values. Neither input is modified.
ParamStore reinit_layer(const ParamStore& trained, const ParamStore& initial, std::size_t layer);

/// Redraws every trainable tensor of encoder layer `layer` from its InitSpec
/// rooted at `fresh_seed`; running statistics are kept. With the store's original root seed this reproduces the
/// initial values exactly.
ParamStore rerand_layer(const ParamStore& trained, std::size_t layer, std::uint64_t fresh_seed);

struct AblationResult {
  ResetMode mode = ResetMode::rerand;
  EvalReport baseline;
  /// One report per encoder layer. For rerand with several seeds, error rate
  /// and loss are means over the seeds.
  std::vector<EvalReport> per_layer;
  /// Per layer, per seed error rates (a single column for reinit).
  std::vector<std::vector<double>> per_seed_error;
  std::vector<std::uint64_t> seeds;
};

/// Evaluates the baseline, then each layer reset independently from a fresh
/// copy of `trained`. `initial` is only read in reinit mode.
AblationResult ablation_sweep(const ParamStore& trained, const ParamStore& initial, const Dataset& eval_data,
                              ResetMode mode, std::span<const std::uint64_t> seeds);

struct LayerClassification {
  /// Layers by ascending post-reset error (most ambient first), ties to the
  /// lower index.
  std::vector<std::size_t> ranking;
  std::vector<std::size_t> ambient;
  std::vector<std::size_t> critical;
  double epsilon = 0.1;
};

/// Layer d is ambient when error_d <= baseline * (1 + epsilon).
LayerClassification classify_layers(const AblationResult& result, double epsilon = 0.1);

}  // namespace ambient
