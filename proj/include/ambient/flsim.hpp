#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ambient/ablation.hpp"
#include "ambient/model.hpp"
#include "ambient/train.hpp"

namespace ambient {

struct FLConfig {
  std::size_t num_clients = 8;
  std::size_t clients_per_round = 4;
  std::size_t num_rounds = 10;
  std::size_t client_steps = 5;
  /// Clients run plain SGD.
  double client_lr = 0.05;
  std::size_t client_batch_size = 16;
  std::uint64_t seed = 0;
  /// Evaluate the server model after every round, not only at the end.
  bool eval_every_round = false;

  void validate() const;
};

enum class DropoutScheme { none, flat, ambient_n, critical_n };

/// Text form: "none", "flat@P", "amb-N@R", "crit-N@R" with rates in [0, 1).
struct DropoutSchedule {
  DropoutScheme scheme = DropoutScheme::none;
  std::size_t n = 0;
  double rate = 0.0;

  static DropoutSchedule none() { return {}; }
  static DropoutSchedule flat(double p) { return {DropoutScheme::flat, 0, p}; }
  static DropoutSchedule ambient(std::size_t n, double r) { return {DropoutScheme::ambient_n, n, r}; }
  static DropoutSchedule critical(std::size_t n, double r) { return {DropoutScheme::critical_n, n, r}; }
  static DropoutSchedule parse(std::string_view text);

  std::string token() const;
  /// Throws ConfigError when the rate is outside [0, 1) or n exceeds the depth.
  void validate(std::size_t num_layers) const;
  /// Per-layer dropout rates. Amb-n takes the first n layers of the ranking,
  /// Crit-n the last n.
  std::vector<double> layer_rates(const LayerClassification& classification, std::size_t num_layers) const;

  friend bool operator==(const DropoutSchedule&, const DropoutSchedule&) = default;
};

/// Keep flags (1 = kept) over the droppable units of one encoder layer.
struct LayerMask {
  std::vector<std::uint8_t> ffn_start;
  std::vector<std::uint8_t> ffn_end;
  std::vector<std::uint8_t> heads;
  /// Conv channels are dropped in blocks of ModelConfig::conv_unit_size().
  std::vector<std::uint8_t> conv_units;

  friend bool operator==(const LayerMask&, const LayerMask&) = default;
};

struct SubmodelMask {
  std::vector<LayerMask> layers;
  std::vector<double> rates;
  std::uint64_t round_seed = 0;

  bool all_keep() const;
  friend bool operator==(const SubmodelMask&, const SubmodelMask&) = default;
};

SubmodelMask full_mask(const ModelConfig& config);

/// Drops floor(rate * units) units of every droppable dimension in each
/// layer, chosen by a shuffle seeded from round_seed.
SubmodelMask build_mask(const DropoutSchedule& schedule, const LayerClassification& classification,
                        const ModelConfig& config, std::uint64_t round_seed);

/// Kept indices along each axis of one tensor; nullopt keeps the whole axis.
/// Rank-1 tensors use `cols`.
struct TensorSlice {
  std::optional<std::vector<std::size_t>> rows;
  std::optional<std::vector<std::size_t>> cols;
};

TensorSlice tensor_slice(const ParamKey& key, const SubmodelMask& mask, const ModelConfig& config);

/// Trainable encoder scalars removed by the mask.
std::size_t params_dropped(const SubmodelMask& mask, const ModelConfig& config);
/// params_dropped over the trainable encoder parameter count.
double params_dropped_fraction(const SubmodelMask& mask, const ModelConfig& config);

/// Dense submodel holding only the kept coordinates.
ParamStore extract_submodel(const ParamStore& params, const SubmodelMask& mask);
/// Scatters a submodel-shaped delta into a full-shaped delta, zero elsewhere.
ParamStore embed_update(const ParamStore& full, const SubmodelMask& mask, const ParamStore& sub_delta);
/// Copy of `full` with the kept coordinates replaced by the submodel values.
ParamStore embed_values(const ParamStore& full, const SubmodelMask& mask, const ParamStore& sub);
/// Copy of `params` with every dropped trainable coordinate set to zero.
ParamStore zero_dropped(const ParamStore& params, const SubmodelMask& mask);

struct ClientContribution {
  std::size_t client_id = 0;
  /// Usually the client's example count.
  double weight = 0.0;
  /// Full-shaped tensors; only coordinates kept by `mask` are read.
  ParamStore values;
  SubmodelMask mask;
};

/// Per-coordinate weighted mean over the clients whose mask kept that
/// coordinate, summed in client-id order. Coordinates no client kept are 0.
ParamStore aggregate(std::vector<ClientContribution> deltas);

/// Same mean taken over client models; coordinates no client kept keep the
/// server value. With one client the result equals that client's model.
ParamStore aggregate_models(const ParamStore& server, std::vector<ClientContribution> models);

/// Disjoint shards covering the dataset, sizes differing by at most one.
/// Examples keep their original relative order within a shard.
std::vector<Dataset> shard_clients(const Dataset& data, std::size_t num_clients, std::uint64_t seed);

std::vector<std::size_t> sample_clients(const FLConfig& config, std::size_t round);
std::uint64_t client_train_seed(const FLConfig& config, std::size_t round, std::size_t client);
std::uint64_t client_mask_seed(const FLConfig& config, std::size_t round, std::size_t client);

struct RoundReport {
  std::size_t round = 0;
  std::vector<std::size_t> clients;
  double mean_client_loss = 0.0;
  std::optional<double> eval_error;
  double params_dropped_fraction = 0.0;
};

struct FLResult {
  ParamStore final_params;
  std::vector<RoundReport> rounds;
  std::optional<EvalReport> final_eval;
};

/// FedAvg with Federated Dropout: per round, sample clients, slice a
/// submodel per client, run local SGD, and average the client models.
FLResult fl_train(const ParamStore& server, const std::vector<Dataset>& shards, const FLConfig& config,
                  const DropoutSchedule& schedule, const LayerClassification& classification,
                  const Dataset* eval_data = nullptr);

struct TransferSetup {
  ModelConfig model;
  SyntheticTaskSpec domain_a;
  SyntheticTaskSpec domain_b;
  std::size_t train_examples_a = 512;
  std::size_t eval_examples_a = 256;
  std::size_t train_examples_b = 256;
  std::size_t eval_examples_b = 256;
  TrainConfig pretrain;
  ResetMode ablation_mode = ResetMode::rerand;
  std::vector<std::uint64_t> ablation_seeds{101};
  double epsilon = 0.1;
  FLConfig fl;
  std::vector<DropoutSchedule> schedules;
  std::uint64_t seed = 0;

  void validate() const;
};

enum class Domain { a, b };

/// The dataset domain_transfer_experiment uses for (domain, split); sizes and
/// seeds come from the setup.
Dataset transfer_dataset(const TransferSetup& setup, Domain domain, Split split);

struct TransferRow {
  std::string schedule;
  double params_dropped = 0.0;
  double eval_error = 0.0;
  std::uint64_t seed = 0;
};

struct TransferResult {
  ParamStore pretrained;
  AblationResult ablation;
  LayerClassification classification;
  /// A no-dropout "none" row first (unless listed), then one per schedule.
  std::vector<TransferRow> rows;
};

/// Pretrains on domain A (or starts from `pretrained`), classifies layers by
/// ablation on domain A, then runs one fl_train per schedule on domain B.
TransferResult domain_transfer_experiment(const TransferSetup& setup,
                                          const std::optional<ParamStore>& pretrained = std::nullopt);

}  // namespace ambient
