#include "ambient/flsim.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>

#include "ambient/errors.hpp"
#include "ambient/rng.hpp"

namespace ambient {

namespace {
constexpr std::uint64_t kSampleStream = 0x73616d70;  // "samp"
constexpr std::uint64_t kTrainStream = 0x7472616e;   // "tran"
constexpr std::uint64_t kMaskStream = 0x6d61736b;    // "mask"
constexpr std::uint64_t kShardStream = 0x73686172;   // "shar"
constexpr std::uint64_t kDomainA = 0x646f6d41;
constexpr std::uint64_t kDomainB = 0x646f6d42;
}  // namespace

void FLConfig::validate() const {
  if (num_clients == 0 || clients_per_round == 0 || num_rounds == 0 || client_steps == 0 || client_batch_size == 0) {
    throw ConfigError("fl: clients, rounds, steps and batch size must all be at least 1");
  }
  if (clients_per_round > num_clients) throw ConfigError("fl: clients_per_round exceeds num_clients");
  if (!(client_lr >= 0.0)) throw ConfigError("fl: client_lr must be non-negative");
}

// ---------------------------------------------------------------- schedules

namespace {

double parse_number(std::string_view text, std::string_view whole) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw ConfigError("bad dropout schedule '" + std::string(whole) + "'");
  }
  return v;
}

}  // namespace

DropoutSchedule DropoutSchedule::parse(std::string_view text) {
  if (text == "none") return none();
  const auto at = text.find('@');
  if (at == std::string_view::npos) {
    throw ConfigError("bad dropout schedule '" + std::string(text) + "' (expected none|flat@P|amb-N@R|crit-N@R)");
  }
  const std::string_view head = text.substr(0, at);
  const double rate = parse_number(text.substr(at + 1), text);
  if (head == "flat") return flat(rate);
  for (auto [prefix, scheme] : {std::pair{std::string_view("amb-"), DropoutScheme::ambient_n},
                                std::pair{std::string_view("crit-"), DropoutScheme::critical_n}}) {
    if (head.starts_with(prefix)) {
      const double n = parse_number(head.substr(prefix.size()), text);
      if (n < 0 || n != std::floor(n)) throw ConfigError("bad layer count in '" + std::string(text) + "'");
      return {scheme, static_cast<std::size_t>(n), rate};
    }
  }
  throw ConfigError("bad dropout schedule '" + std::string(text) + "'");
}

std::string DropoutSchedule::token() const {
  char rate_text[32];
  std::snprintf(rate_text, sizeof rate_text, "%g", rate);
  switch (scheme) {
    case DropoutScheme::none: return "none";
    case DropoutScheme::flat: return std::string("flat@") + rate_text;
    case DropoutScheme::ambient_n: return "amb-" + std::to_string(n) + "@" + rate_text;
    case DropoutScheme::critical_n: return "crit-" + std::to_string(n) + "@" + rate_text;
  }
  return "none";
}

void DropoutSchedule::validate(std::size_t num_layers) const {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must be in [0, 1), got " + token());
  if ((scheme == DropoutScheme::ambient_n || scheme == DropoutScheme::critical_n) && n > num_layers) {
    throw ConfigError("dropout schedule " + token() + " targets more layers than the model has (" +
                      std::to_string(num_layers) + ")");
  }
}

std::vector<double> DropoutSchedule::layer_rates(const LayerClassification& classification,
                                                 std::size_t num_layers) const {
  validate(num_layers);
  std::vector<double> rates(num_layers, 0.0);
  switch (scheme) {
    case DropoutScheme::none: break;
    case DropoutScheme::flat: std::fill(rates.begin(), rates.end(), rate); break;
    case DropoutScheme::ambient_n:
    case DropoutScheme::critical_n: {
      if (classification.ranking.size() != num_layers) {
        throw ConfigError("layer classification covers " + std::to_string(classification.ranking.size()) +
                          " layers, model has " + std::to_string(num_layers));
      }
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t pos = scheme == DropoutScheme::ambient_n ? i : num_layers - 1 - i;
        rates.at(classification.ranking[pos]) = rate;
      }
      break;
    }
  }
  return rates;
}

// ---------------------------------------------------------------- masks

bool SubmodelMask::all_keep() const {
  const auto kept = [](const std::vector<std::uint8_t>& v) {
    return std::all_of(v.begin(), v.end(), [](std::uint8_t k) { return k != 0; });
  };
  return std::all_of(layers.begin(), layers.end(), [&](const LayerMask& m) {
    return kept(m.ffn_start) && kept(m.ffn_end) && kept(m.heads) && kept(m.conv_units);
  });
}

SubmodelMask full_mask(const ModelConfig& config) {
  config.validate();
  SubmodelMask mask;
  LayerMask layer{std::vector<std::uint8_t>(config.ffn_hidden(), 1), std::vector<std::uint8_t>(config.ffn_hidden(), 1),
                  std::vector<std::uint8_t>(config.num_heads, 1), std::vector<std::uint8_t>(config.conv_units(), 1)};
  mask.layers.assign(config.num_layers, layer);
  mask.rates.assign(config.num_layers, 0.0);
  return mask;
}

namespace {

void drop_units(std::vector<std::uint8_t>& keep, double rate, Rng rng) {
  const auto drop = static_cast<std::size_t>(std::floor(rate * static_cast<double>(keep.size())));
  std::vector<std::size_t> order(keep.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  for (std::size_t i = 0; i < drop; ++i) keep[order[i]] = 0;
}

}  // namespace

SubmodelMask build_mask(const DropoutSchedule& schedule, const LayerClassification& classification,
                        const ModelConfig& config, std::uint64_t round_seed) {
  SubmodelMask mask = full_mask(config);
  mask.round_seed = round_seed;
  mask.rates = schedule.layer_rates(classification, config.num_layers);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    const double r = mask.rates[l];
    if (r == 0.0) continue;
    LayerMask& m = mask.layers[l];
    drop_units(m.ffn_start, r, Rng(mix_seeds(round_seed, l, 0)));
    drop_units(m.ffn_end, r, Rng(mix_seeds(round_seed, l, 1)));
    drop_units(m.heads, r, Rng(mix_seeds(round_seed, l, 2)));
    drop_units(m.conv_units, r, Rng(mix_seeds(round_seed, l, 3)));
  }
  return mask;
}

namespace {

std::vector<std::size_t> expand(const std::vector<std::uint8_t>& keep, std::size_t block, std::size_t offset = 0) {
  std::vector<std::size_t> out;
  for (std::size_t u = 0; u < keep.size(); ++u)
    if (keep[u])
      for (std::size_t j = 0; j < block; ++j) out.push_back(offset + u * block + j);
  return out;
}

void require_mask_matches(const SubmodelMask& mask, const ModelConfig& config) {
  bool ok = mask.layers.size() == config.num_layers;
  for (const LayerMask& m : mask.layers) {
    ok = ok && m.ffn_start.size() == config.ffn_hidden() && m.ffn_end.size() == config.ffn_hidden() &&
         m.heads.size() == config.num_heads && m.conv_units.size() == config.conv_units();
  }
  if (!ok) throw ConfigError("submodel mask does not match the model config");
}

}  // namespace

TensorSlice tensor_slice(const ParamKey& key, const SubmodelMask& mask, const ModelConfig& config) {
  TensorSlice s;
  if (key.layer < 0) return s;
  const LayerMask& m = mask.layers.at(static_cast<std::size_t>(key.layer));
  const auto label = parse_module_label(key.module);
  if (!label) return s;
  const bool is_weight = key.tensor == names::weight || key.tensor == names::w_in || key.tensor == names::w_out;
  const auto conv_channels = [&] { return expand(m.conv_units, config.conv_unit_size()); };
  switch (*label) {
    case ModuleLabel::ffn_start:
    case ModuleLabel::ffn_end: {
      auto hidden = expand(*label == ModuleLabel::ffn_start ? m.ffn_start : m.ffn_end, 1);
      if (key.tensor == names::w_in || key.tensor == names::b_in) s.cols = std::move(hidden);
      if (key.tensor == names::w_out) s.rows = std::move(hidden);
      break;
    }
    case ModuleLabel::mhsa_query:
    case ModuleLabel::mhsa_key:
    case ModuleLabel::mhsa_value: s.cols = expand(m.heads, config.head_dim()); break;
    case ModuleLabel::mhsa_post:
      if (is_weight) s.rows = expand(m.heads, config.head_dim());
      break;
    case ModuleLabel::conv_pointwise_in: {
      auto cols = conv_channels();
      auto gate = expand(m.conv_units, config.conv_unit_size(), config.conv_channels());
      cols.insert(cols.end(), gate.begin(), gate.end());
      s.cols = std::move(cols);
      break;
    }
    case ModuleLabel::conv_depthwise: s.cols = conv_channels(); break;
    case ModuleLabel::conv_pointwise_out:
      if (is_weight) s.rows = conv_channels();
      break;
    case ModuleLabel::norm_params:
      if (key.tensor.starts_with("conv_norm.")) s.cols = conv_channels();
      break;
  }
  return s;
}

namespace {

std::size_t kept_numel(const TensorSlice& s, const Shape& shape) {
  if (shape.size() == 1) return s.cols ? s.cols->size() : shape[0];
  const std::size_t r = s.rows ? s.rows->size() : shape[0];
  const std::size_t c = s.cols ? s.cols->size() : shape[1];
  return r * c;
}

std::vector<std::size_t> axis(const std::optional<std::vector<std::size_t>>& sel, std::size_t n) {
  if (sel) return *sel;
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  return all;
}

/// Flat indices into the full tensor of every kept coordinate, in submodel
/// row-major order.
std::vector<std::size_t> kept_flat_indices(const TensorSlice& s, const Shape& shape) {
  std::vector<std::size_t> out;
  if (shape.size() == 1) return axis(s.cols, shape[0]);
  if (shape.size() != 2) throw ShapeError("federated dropout only slices rank-1 and rank-2 tensors");
  const auto rows = axis(s.rows, shape[0]);
  const auto cols = axis(s.cols, shape[1]);
  out.reserve(rows.size() * cols.size());
  for (std::size_t r : rows)
    for (std::size_t c : cols) out.push_back(r * shape[1] + c);
  return out;
}

Shape sliced_shape(const TensorSlice& s, const Shape& shape) {
  if (shape.size() == 1) return {s.cols ? s.cols->size() : shape[0]};
  return {s.rows ? s.rows->size() : shape[0], s.cols ? s.cols->size() : shape[1]};
}

bool is_full(const TensorSlice& s) { return !s.rows && !s.cols; }

}  // namespace

std::size_t params_dropped(const SubmodelMask& mask, const ModelConfig& config) {
  require_mask_matches(mask, config);
  std::size_t dropped = 0;
  for (const TensorLayout& t : model_layout(config)) {
    if (!t.trainable || !t.key.is_encoder()) continue;
    dropped += shape_numel(t.shape) - kept_numel(tensor_slice(t.key, mask, config), t.shape);
  }
  return dropped;
}

double params_dropped_fraction(const SubmodelMask& mask, const ModelConfig& config) {
  return static_cast<double>(params_dropped(mask, config)) /
         static_cast<double>(count_params(config).encoder);
}

ParamStore extract_submodel(const ParamStore& params, const SubmodelMask& mask) {
  const ModelConfig& config = params.config();
  require_mask_matches(mask, config);
  ParamStore sub = params;
  for (auto& [key, entry] : sub.entries()) {
    const TensorSlice s = tensor_slice(key, mask, config);
    if (is_full(s)) continue;
    const Tensor& full = entry.value;
    const auto idx = kept_flat_indices(s, full.shape());
    std::vector<double> values(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) values[i] = full[idx[i]];
    entry.value = Tensor(sliced_shape(s, full.shape()), std::move(values));
  }
  return sub;
}

namespace {

ParamStore scatter(const ParamStore& base, const SubmodelMask& mask, const ParamStore& sub, bool zero_base) {
  const ModelConfig& config = base.config();
  require_mask_matches(mask, config);
  ParamStore out = base;
  for (auto& [key, entry] : out.entries()) {
    const Tensor& src = sub.tensor(key);
    const TensorSlice s = tensor_slice(key, mask, config);
    if (src.shape() != sliced_shape(s, entry.value.shape())) {
      throw ShapeError("embed: '" + key.name() + "' has shape " + shape_string(src.shape()) +
                       ", mask expects " + shape_string(sliced_shape(s, entry.value.shape())));
    }
    if (zero_base) entry.value = Tensor::zeros(entry.value.shape());
    const auto idx = kept_flat_indices(s, entry.value.shape());
    for (std::size_t i = 0; i < idx.size(); ++i) entry.value[idx[i]] = src[i];
  }
  return out;
}

}  // namespace

ParamStore embed_update(const ParamStore& full, const SubmodelMask& mask, const ParamStore& sub_delta) {
  return scatter(full, mask, sub_delta, true);
}

ParamStore embed_values(const ParamStore& full, const SubmodelMask& mask, const ParamStore& sub) {
  return scatter(full, mask, sub, false);
}

ParamStore zero_dropped(const ParamStore& params, const SubmodelMask& mask) {
  ParamStore zeroed = params;
  for (auto& [key, entry] : zeroed.entries())
    if (entry.trainable) entry.value = Tensor::zeros(entry.value.shape());
  ParamStore out = embed_values(zeroed, mask, extract_submodel(params, mask));
  for (auto& [key, entry] : out.entries())
    if (!entry.trainable) entry.value = params.tensor(key);
  return out;
}

// ---------------------------------------------------------------- aggregation

namespace {

/// Weighted mean per coordinate over participating clients. `fallback`
/// supplies values for coordinates no client kept (nullptr means zero).
ParamStore combine(const ParamStore& shape_source, std::vector<ClientContribution> items, const ParamStore* fallback) {
  if (items.empty()) throw ConfigError("aggregate: no client contributions");
  std::stable_sort(items.begin(), items.end(),
                   [](const ClientContribution& a, const ClientContribution& b) { return a.client_id < b.client_id; });
  double total = 0.0;
  for (const auto& c : items) {
    if (!(c.weight >= 0.0) || !std::isfinite(c.weight)) throw NumericError("aggregate: weights must be finite and non-negative");
    c.values.require_compatible(shape_source, "aggregate");
    total += c.weight;
  }
  if (total == 0.0) throw NumericError("aggregate: client weights sum to zero");

  const bool has_config = shape_source.has_config();
  ParamStore out = shape_source;
  for (auto& [key, entry] : out.entries()) {
    const std::size_t n = entry.value.size();
    // keep[c][i] for client c, coordinate i.
    std::vector<std::vector<std::uint8_t>> keep(items.size());
    std::vector<double> weight_sum(n, 0.0);
    for (std::size_t c = 0; c < items.size(); ++c) {
      const bool full =
          !has_config || items[c].mask.layers.empty() || is_full(tensor_slice(key, items[c].mask, shape_source.config()));
      keep[c].assign(n, full ? 1 : 0);
      if (!full) {
        for (std::size_t i : kept_flat_indices(tensor_slice(key, items[c].mask, shape_source.config()), entry.value.shape()))
          keep[c][i] = 1;
      }
      for (std::size_t i = 0; i < n; ++i)
        if (keep[c][i]) weight_sum[i] += items[c].weight;
    }
    Tensor& dst = entry.value;
    for (std::size_t i = 0; i < n; ++i) {
      if (weight_sum[i] == 0.0) {
        dst[i] = fallback ? fallback->tensor(key)[i] : 0.0;
        continue;
      }
      bool first = true;
      double acc = 0.0;
      for (std::size_t c = 0; c < items.size(); ++c) {
        if (!keep[c][i]) continue;
        const double term = (items[c].weight / weight_sum[i]) * items[c].values.tensor(key)[i];
        acc = first ? term : acc + term;
        first = false;
      }
      dst[i] = acc;
    }
  }
  return out;
}

}  // namespace

ParamStore aggregate(std::vector<ClientContribution> deltas) {
  if (deltas.empty()) throw ConfigError("aggregate: no client contributions");
  const ParamStore shape_source = deltas.front().values;
  return combine(shape_source, std::move(deltas), nullptr);
}

ParamStore aggregate_models(const ParamStore& server, std::vector<ClientContribution> models) {
  return combine(server, std::move(models), &server);
}

// ---------------------------------------------------------------- simulation

std::vector<Dataset> shard_clients(const Dataset& data, std::size_t num_clients, std::uint64_t seed) {
  if (num_clients == 0) throw ConfigError("shard_clients: num_clients must be at least 1");
  if (data.size() < num_clients) {
    throw ConfigError("shard_clients: " + std::to_string(data.size()) + " examples cannot fill " +
                      std::to_string(num_clients) + " clients");
  }
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seeds(seed, kShardStream));
  rng.shuffle(order);
  std::vector<Dataset> shards;
  const std::size_t base = data.size() / num_clients, extra = data.size() % num_clients;
  std::size_t pos = 0;
  for (std::size_t c = 0; c < num_clients; ++c) {
    const std::size_t len = base + (c < extra ? 1 : 0);
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(pos),
                                 order.begin() + static_cast<std::ptrdiff_t>(pos + len));
    std::sort(idx.begin(), idx.end());
    shards.push_back(data.subset(idx));
    pos += len;
  }
  return shards;
}

std::vector<std::size_t> sample_clients(const FLConfig& config, std::size_t round) {
  std::vector<std::size_t> ids(config.num_clients);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  Rng rng(mix_seeds(config.seed, round, kSampleStream));
  rng.shuffle(ids);
  ids.resize(config.clients_per_round);
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::uint64_t client_train_seed(const FLConfig& config, std::size_t round, std::size_t client) {
  return mix_seeds(mix_seeds(config.seed, kTrainStream), round, client);
}

std::uint64_t client_mask_seed(const FLConfig& config, std::size_t round, std::size_t client) {
  return mix_seeds(mix_seeds(config.seed, kMaskStream), round, client);
}

FLResult fl_train(const ParamStore& server, const std::vector<Dataset>& shards, const FLConfig& config,
                  const DropoutSchedule& schedule, const LayerClassification& classification,
                  const Dataset* eval_data) {
  config.validate();
  if (shards.size() != config.num_clients) {
    throw ConfigError("fl_train: " + std::to_string(shards.size()) + " shards for " +
                      std::to_string(config.num_clients) + " clients");
  }
  const ModelConfig& model = server.config();
  schedule.validate(model.num_layers);

  FLResult result;
  result.final_params = server;
  ParamStore& current = result.final_params;
  for (std::size_t round = 0; round < config.num_rounds; ++round) {
    RoundReport report;
    report.round = round;
    report.clients = sample_clients(config, round);
    std::vector<ClientContribution> models;
    double loss_sum = 0.0;
    for (std::size_t client : report.clients) {
      const Dataset& shard = shards[client];
      SubmodelMask mask = build_mask(schedule, classification, model, client_mask_seed(config, round, client));
      report.params_dropped_fraction = params_dropped_fraction(mask, model);

      TrainConfig local;
      local.optimizer = OptimizerKind::sgd;
      local.lr = config.client_lr;
      local.batch_size = config.client_batch_size;
      local.total_steps = config.client_steps;
      local.seed = client_train_seed(config, round, client);
      TrainResult trained = train(extract_submodel(current, mask), shard, local);
      loss_sum += std::accumulate(trained.losses.begin(), trained.losses.end(), 0.0) /
                  static_cast<double>(trained.losses.size());
      models.push_back({client, static_cast<double>(shard.size()),
                        embed_values(current, mask, trained.final_params), std::move(mask)});
    }
    report.mean_client_loss = loss_sum / static_cast<double>(report.clients.size());
    current = aggregate_models(current, std::move(models));
    if (eval_data && config.eval_every_round) report.eval_error = evaluate(current, *eval_data).error_rate;
    result.rounds.push_back(std::move(report));
  }
  if (eval_data) {
    result.final_eval = evaluate(current, *eval_data);
    if (!result.rounds.empty()) result.rounds.back().eval_error = result.final_eval->error_rate;
  }
  return result;
}

// ---------------------------------------------------------------- transfer

void TransferSetup::validate() const {
  model.validate();
  domain_a.validate();
  domain_b.validate();
  fl.validate();
  if (domain_a.domain_transform_seed == domain_b.domain_transform_seed) {
    throw ConfigError("transfer: the two domains must use distinct domain transform seeds");
  }
  if (domain_a.num_classes != model.num_classes || domain_b.num_classes != model.num_classes ||
      domain_a.feature_dim != model.feature_dim || domain_a.frames != model.frames) {
    throw ConfigError("transfer: task dimensions do not match the model");
  }
  for (const auto& s : schedules) s.validate(model.num_layers);
}

Dataset transfer_dataset(const TransferSetup& setup, Domain domain, Split split) {
  const bool a = domain == Domain::a;
  const bool tr = split == Split::train;
  const std::size_t n = a ? (tr ? setup.train_examples_a : setup.eval_examples_a)
                          : (tr ? setup.train_examples_b : setup.eval_examples_b);
  return make_dataset(a ? setup.domain_a : setup.domain_b, split, n, mix_seeds(setup.seed, a ? kDomainA : kDomainB));
}

TransferResult domain_transfer_experiment(const TransferSetup& setup, const std::optional<ParamStore>& pretrained) {
  setup.validate();
  TransferResult result;
  const Dataset eval_a = transfer_dataset(setup, Domain::a, Split::eval);
  if (pretrained) {
    pretrained->require_compatible(init_model(setup.model, setup.seed), "domain_transfer_experiment");
    result.pretrained = *pretrained;
  } else {
    const Dataset train_a = transfer_dataset(setup, Domain::a, Split::train);
    result.pretrained = train(init_model(setup.model, setup.seed), train_a, setup.pretrain).final_params;
  }
  const ParamStore initial = init_model(result.pretrained.config(), result.pretrained.root_seed());
  result.ablation =
      ablation_sweep(result.pretrained, initial, eval_a, setup.ablation_mode, setup.ablation_seeds);
  result.classification = classify_layers(result.ablation, setup.epsilon);

  const Dataset train_b = transfer_dataset(setup, Domain::b, Split::train);
  const Dataset eval_b = transfer_dataset(setup, Domain::b, Split::eval);
  const auto shards = shard_clients(train_b, setup.fl.num_clients, setup.fl.seed);

  std::vector<DropoutSchedule> runs = setup.schedules;
  if (std::find(runs.begin(), runs.end(), DropoutSchedule::none()) == runs.end()) {
    runs.insert(runs.begin(), DropoutSchedule::none());
  }
  const ModelConfig& model = result.pretrained.config();
  for (const DropoutSchedule& schedule : runs) {
    const FLResult fl = fl_train(result.pretrained, shards, setup.fl, schedule, result.classification, &eval_b);
    const SubmodelMask mask = build_mask(schedule, result.classification, model, client_mask_seed(setup.fl, 0, 0));
    result.rows.push_back({schedule.token(), params_dropped_fraction(mask, model), fl.final_eval->error_rate, setup.seed});
  }
  return result;
}

}  // namespace ambient
