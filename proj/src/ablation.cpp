#include "ambient/ablation.hpp"

#include <algorithm>
#include <numeric>

#include "ambient/errors.hpp"

namespace ambient {

std::string_view to_string(ResetMode mode) { return mode == ResetMode::reinit ? "reinit" : "rerand"; }

ResetMode parse_reset_mode(std::string_view text) {
  if (text == "reinit") return ResetMode::reinit;
  if (text == "rerand") return ResetMode::rerand;
  throw ConfigError("unknown ablation mode '" + std::string(text) + "' (expected reinit|rerand)");
}

namespace {

void require_layer(const ParamStore& params, std::size_t layer) {
  const std::size_t depth = params.config().num_layers;
  if (layer >= depth) {
    throw KeyError("layer " + std::to_string(layer) + " out of range [0, " + std::to_string(depth) + ")");
  }
}

}  // namespace

ParamStore reinit_layer(const ParamStore& trained, const ParamStore& initial, std::size_t layer) {
  trained.require_compatible(initial, "reinit_layer");
  require_layer(trained, layer);
  ParamStore out = trained;
  for (const ParamKey& key : out.layer_keys(static_cast<int>(layer)))
    if (out.at(key).trainable) out.at(key) = initial.at(key);
  return out;
}

ParamStore rerand_layer(const ParamStore& trained, std::size_t layer, std::uint64_t fresh_seed) {
  require_layer(trained, layer);
  ParamStore out = trained;
  for (const ParamKey& key : out.layer_keys(static_cast<int>(layer))) {
    ParamEntry& e = out.at(key);
    if (!e.trainable) continue;
    e.init = e.init.with_root_seed(fresh_seed);
    e.value = e.init.draw(e.value.shape());
  }
  return out;
}

AblationResult ablation_sweep(const ParamStore& trained, const ParamStore& initial, const Dataset& eval_data,
                              ResetMode mode, std::span<const std::uint64_t> seeds) {
  if (mode == ResetMode::reinit) trained.require_compatible(initial, "ablation_sweep");
  if (mode == ResetMode::rerand && seeds.empty()) throw ConfigError("ablation_sweep: rerand needs at least one seed");

  AblationResult result;
  result.mode = mode;
  result.seeds.assign(seeds.begin(), seeds.end());
  result.baseline = evaluate(trained, eval_data);
  const std::size_t depth = trained.config().num_layers;
  for (std::size_t d = 0; d < depth; ++d) {
    if (mode == ResetMode::reinit) {
      const EvalReport r = evaluate(reinit_layer(trained, initial, d), eval_data);
      result.per_layer.push_back(r);
      result.per_seed_error.push_back({r.error_rate});
      continue;
    }
    EvalReport mean;
    std::vector<double> errors;
    for (std::uint64_t seed : seeds) {
      const EvalReport r = evaluate(rerand_layer(trained, d, seed), eval_data);
      errors.push_back(r.error_rate);
      mean.error_rate += r.error_rate;
      mean.mean_loss += r.mean_loss;
      mean.num_examples = r.num_examples;
    }
    mean.error_rate /= static_cast<double>(seeds.size());
    mean.mean_loss /= static_cast<double>(seeds.size());
    result.per_layer.push_back(mean);
    result.per_seed_error.push_back(std::move(errors));
  }
  return result;
}

LayerClassification classify_layers(const AblationResult& result, double epsilon) {
  if (!(epsilon >= 0.0)) throw ConfigError("classify_layers: epsilon must be non-negative");
  LayerClassification c;
  c.epsilon = epsilon;
  const std::size_t depth = result.per_layer.size();
  c.ranking.resize(depth);
  std::iota(c.ranking.begin(), c.ranking.end(), std::size_t{0});
  std::stable_sort(c.ranking.begin(), c.ranking.end(), [&](std::size_t a, std::size_t b) {
    return result.per_layer[a].error_rate < result.per_layer[b].error_rate;
  });
  const double threshold = result.baseline.error_rate * (1.0 + epsilon);
  for (std::size_t d = 0; d < depth; ++d) {
    (result.per_layer[d].error_rate <= threshold ? c.ambient : c.critical).push_back(d);
  }
  return c;
}

}  // namespace ambient
