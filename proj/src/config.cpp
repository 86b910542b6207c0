#include "ambient/config.hpp"

#include <charconv>
#include <cstdio>
#include <functional>
#include <map>
#include <set>

#include "ambient/csv.hpp"
#include "ambient/errors.hpp"
#include "ambient/rng.hpp"

namespace ambient {

namespace {

constexpr std::uint64_t kPretrainStream = 0x70726574;  // "pret"
constexpr std::uint64_t kFlStream = 0x666c7369;        // "flsi"

std::string_view trim(std::string_view s) {
  const auto ws = " \t\r";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(ws) - b + 1);
}

std::vector<std::string_view> split_list(std::string_view v) {
  std::vector<std::string_view> out;
  if (trim(v).empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto comma = v.find(',', start);
    out.push_back(trim(v.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

template <class T>
T parse_int(std::string_view key, std::string_view v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("config: " + std::string(key) + " expects a non-negative integer, got '" + std::string(v) + "'");
  }
  return out;
}

double parse_real(std::string_view key, std::string_view v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("config: " + std::string(key) + " expects a number, got '" + std::string(v) + "'");
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: " + std::string(key) + " expects true|false, got '" + std::string(v) + "'");
}

std::optional<std::uint64_t> parse_optional_seed(std::string_view key, std::string_view v) {
  if (v == "none") return std::nullopt;
  return parse_int<std::uint64_t>(key, v);
}

std::string real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
std::string join(const std::vector<T>& items, const std::function<std::string(const T&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ',';
    out += f(items[i]);
  }
  return out;
}

using Setter = std::function<void(ExperimentConfig&, std::string_view key, std::string_view value)>;

const std::map<std::string, Setter, std::less<>>& setters() {
  static const std::map<std::string, Setter, std::less<>> table = {
      {"seed", [](auto& c, auto k, auto v) { c.seed = parse_int<std::uint64_t>(k, v); }},
      {"model.preset",
       [](auto& c, auto, auto v) {
         const SizePreset p = parse_size_preset(v);
         if (p != SizePreset::custom) {
           const ModelConfig base = ModelConfig::preset(p);
           c.model.num_layers = base.num_layers;
           c.model.model_dim = base.model_dim;
         }
         c.model.size_preset = p;
       }},
      {"model.num_layers", [](auto& c, auto k, auto v) { c.model.num_layers = parse_int<std::size_t>(k, v); }},
      {"model.model_dim", [](auto& c, auto k, auto v) { c.model.model_dim = parse_int<std::size_t>(k, v); }},
      {"model.ffn_expansion", [](auto& c, auto k, auto v) { c.model.ffn_expansion = parse_int<std::size_t>(k, v); }},
      {"model.num_heads", [](auto& c, auto k, auto v) { c.model.num_heads = parse_int<std::size_t>(k, v); }},
      {"model.conv_kernel", [](auto& c, auto k, auto v) { c.model.conv_kernel = parse_int<std::size_t>(k, v); }},
      {"model.norm_kind", [](auto& c, auto, auto v) { c.model.norm_kind = parse_norm_kind(v); }},
      {"model.group_count", [](auto& c, auto k, auto v) { c.model.group_count = parse_int<std::size_t>(k, v); }},
      {"model.layer_order", [](auto& c, auto, auto v) { c.model.layer_order = parse_layer_order(v); }},
      {"model.positional_embedding", [](auto& c, auto k, auto v) { c.model.positional_embedding = parse_bool(k, v); }},
      {"model.norm_eps", [](auto& c, auto k, auto v) { c.model.norm_eps = parse_real(k, v); }},
      {"model.bn_momentum", [](auto& c, auto k, auto v) { c.model.bn_momentum = parse_real(k, v); }},
      {"task.num_classes", [](auto& c, auto k, auto v) { c.task.num_classes = parse_int<std::size_t>(k, v); }},
      {"task.feature_dim", [](auto& c, auto k, auto v) { c.task.feature_dim = parse_int<std::size_t>(k, v); }},
      {"task.frames", [](auto& c, auto k, auto v) { c.task.frames = parse_int<std::size_t>(k, v); }},
      {"task.template_seed", [](auto& c, auto k, auto v) { c.task.template_seed = parse_int<std::uint64_t>(k, v); }},
      {"task.noise_std", [](auto& c, auto k, auto v) { c.task.noise_std = parse_real(k, v); }},
      {"task.time_shift_max", [](auto& c, auto k, auto v) { c.task.time_shift_max = parse_int<std::size_t>(k, v); }},
      {"task.domain_a_transform", [](auto& c, auto k, auto v) { c.domain_a_transform = parse_optional_seed(k, v); }},
      {"task.domain_b_transform", [](auto& c, auto k, auto v) { c.domain_b_transform = parse_optional_seed(k, v); }},
      {"task.train_examples", [](auto& c, auto k, auto v) { c.train_examples = parse_int<std::size_t>(k, v); }},
      {"task.eval_examples", [](auto& c, auto k, auto v) { c.eval_examples = parse_int<std::size_t>(k, v); }},
      {"task.transfer_train_examples",
       [](auto& c, auto k, auto v) { c.transfer_train_examples = parse_int<std::size_t>(k, v); }},
      {"task.transfer_eval_examples",
       [](auto& c, auto k, auto v) { c.transfer_eval_examples = parse_int<std::size_t>(k, v); }},
      {"train.optimizer",
       [](auto& c, auto k, auto v) {
         if (v == "adam") c.optimizer = OptimizerKind::adam;
         else if (v == "sgd") c.optimizer = OptimizerKind::sgd;
         else throw ConfigError("config: " + std::string(k) + " expects adam|sgd");
       }},
      {"train.lr", [](auto& c, auto k, auto v) { c.lr = parse_real(k, v); }},
      {"train.beta1", [](auto& c, auto k, auto v) { c.beta1 = parse_real(k, v); }},
      {"train.beta2", [](auto& c, auto k, auto v) { c.beta2 = parse_real(k, v); }},
      {"train.adam_eps", [](auto& c, auto k, auto v) { c.adam_eps = parse_real(k, v); }},
      {"train.batch_size", [](auto& c, auto k, auto v) { c.batch_size = parse_int<std::size_t>(k, v); }},
      {"train.total_steps", [](auto& c, auto k, auto v) { c.total_steps = parse_int<std::size_t>(k, v); }},
      {"train.snapshot_steps",
       [](auto& c, auto k, auto v) {
         c.snapshot_steps.clear();
         for (auto item : split_list(v)) c.snapshot_steps.push_back(parse_int<std::size_t>(k, item));
       }},
      {"ablation.mode", [](auto& c, auto, auto v) { c.ablation_mode = parse_reset_mode(v); }},
      {"ablation.epsilon", [](auto& c, auto k, auto v) { c.epsilon = parse_real(k, v); }},
      {"ablation.seeds",
       [](auto& c, auto k, auto v) {
         c.ablation_seeds.clear();
         for (auto item : split_list(v)) c.ablation_seeds.push_back(parse_int<std::uint64_t>(k, item));
       }},
      {"churn.step",
       [](auto& c, auto k, auto v) {
         if (v == "final") c.churn_step.reset();
         else c.churn_step = parse_int<std::size_t>(k, v);
       }},
      {"fl.num_clients", [](auto& c, auto k, auto v) { c.fl.num_clients = parse_int<std::size_t>(k, v); }},
      {"fl.clients_per_round", [](auto& c, auto k, auto v) { c.fl.clients_per_round = parse_int<std::size_t>(k, v); }},
      {"fl.num_rounds", [](auto& c, auto k, auto v) { c.fl.num_rounds = parse_int<std::size_t>(k, v); }},
      {"fl.client_steps", [](auto& c, auto k, auto v) { c.fl.client_steps = parse_int<std::size_t>(k, v); }},
      {"fl.client_lr", [](auto& c, auto k, auto v) { c.fl.client_lr = parse_real(k, v); }},
      {"fl.client_batch_size", [](auto& c, auto k, auto v) { c.fl.client_batch_size = parse_int<std::size_t>(k, v); }},
      {"fl.eval_every_round", [](auto& c, auto k, auto v) { c.fl.eval_every_round = parse_bool(k, v); }},
      {"fl.schedules",
       [](auto& c, auto, auto v) {
         c.schedules.clear();
         for (auto item : split_list(v)) c.schedules.push_back(DropoutSchedule::parse(item));
       }},
  };
  return table;
}

}  // namespace

ExperimentConfig ExperimentConfig::parse(std::string_view text) {
  struct Line {
    std::size_t number;
    std::string key;
    std::string value;
  };
  std::vector<Line> lines;
  std::set<std::string, std::less<>> seen;
  std::size_t pos = 0, number = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++number;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(number) + ": expected key=value");
    }
    const std::string key(trim(line.substr(0, eq)));
    if (!setters().contains(key)) throw ConfigError("config line " + std::to_string(number) + ": unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError("config line " + std::to_string(number) + ": duplicate key '" + key + "'");
    lines.push_back({number, key, std::string(trim(line.substr(eq + 1)))});
  }
  ExperimentConfig c;
  // The preset sets depth and width, so it is applied before explicit keys.
  std::stable_partition(lines.begin(), lines.end(), [](const Line& l) { return l.key == "model.preset"; });
  for (const Line& l : lines) {
    try {
      setters().find(l.key)->second(c, l.key, l.value);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(l.number) + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  return parse(text);
}

std::string ExperimentConfig::serialize() const {
  const auto seed_or_none = [](const std::optional<std::uint64_t>& s) { return s ? std::to_string(*s) : "none"; };
  std::string out;
  const auto kv = [&](std::string_view k, const std::string& v) {
    out += k;
    out += '=';
    out += v;
    out += '\n';
  };
  kv("seed", std::to_string(seed));
  kv("model.preset", std::string(to_string(model.size_preset)));
  kv("model.num_layers", std::to_string(model.num_layers));
  kv("model.model_dim", std::to_string(model.model_dim));
  kv("model.ffn_expansion", std::to_string(model.ffn_expansion));
  kv("model.num_heads", std::to_string(model.num_heads));
  kv("model.conv_kernel", std::to_string(model.conv_kernel));
  kv("model.norm_kind", std::string(to_string(model.norm_kind)));
  kv("model.group_count", std::to_string(model.group_count));
  kv("model.layer_order", std::string(to_string(model.layer_order)));
  kv("model.positional_embedding", model.positional_embedding ? "true" : "false");
  kv("model.norm_eps", real(model.norm_eps));
  kv("model.bn_momentum", real(model.bn_momentum));
  kv("task.num_classes", std::to_string(task.num_classes));
  kv("task.feature_dim", std::to_string(task.feature_dim));
  kv("task.frames", std::to_string(task.frames));
  kv("task.template_seed", std::to_string(task.template_seed));
  kv("task.noise_std", real(task.noise_std));
  kv("task.time_shift_max", std::to_string(task.time_shift_max));
  kv("task.domain_a_transform", seed_or_none(domain_a_transform));
  kv("task.domain_b_transform", seed_or_none(domain_b_transform));
  kv("task.train_examples", std::to_string(train_examples));
  kv("task.eval_examples", std::to_string(eval_examples));
  kv("task.transfer_train_examples", std::to_string(transfer_train_examples));
  kv("task.transfer_eval_examples", std::to_string(transfer_eval_examples));
  kv("train.optimizer", optimizer == OptimizerKind::adam ? "adam" : "sgd");
  kv("train.lr", real(lr));
  kv("train.beta1", real(beta1));
  kv("train.beta2", real(beta2));
  kv("train.adam_eps", real(adam_eps));
  kv("train.batch_size", std::to_string(batch_size));
  kv("train.total_steps", std::to_string(total_steps));
  kv("train.snapshot_steps", join<std::size_t>(snapshot_steps, [](const std::size_t& s) { return std::to_string(s); }));
  kv("ablation.mode", std::string(to_string(ablation_mode)));
  kv("ablation.epsilon", real(epsilon));
  kv("ablation.seeds", join<std::uint64_t>(ablation_seeds, [](const std::uint64_t& s) { return std::to_string(s); }));
  kv("churn.step", churn_step ? std::to_string(*churn_step) : "final");
  kv("fl.num_clients", std::to_string(fl.num_clients));
  kv("fl.clients_per_round", std::to_string(fl.clients_per_round));
  kv("fl.num_rounds", std::to_string(fl.num_rounds));
  kv("fl.client_steps", std::to_string(fl.client_steps));
  kv("fl.client_lr", real(fl.client_lr));
  kv("fl.client_batch_size", std::to_string(fl.client_batch_size));
  kv("fl.eval_every_round", fl.eval_every_round ? "true" : "false");
  kv("fl.schedules", join<DropoutSchedule>(schedules, [](const DropoutSchedule& s) { return s.token(); }));
  return out;
}

ModelConfig ExperimentConfig::model_config() const {
  ModelConfig m = model;
  m.num_classes = task.num_classes;
  m.feature_dim = task.feature_dim;
  m.frames = task.frames;
  return m;
}

SyntheticTaskSpec ExperimentConfig::domain(Domain d) const {
  SyntheticTaskSpec spec = task;
  spec.domain_transform_seed = d == Domain::a ? domain_a_transform : domain_b_transform;
  return spec;
}

TrainConfig ExperimentConfig::train_config() const {
  TrainConfig t;
  t.optimizer = optimizer;
  t.lr = lr;
  t.beta1 = beta1;
  t.beta2 = beta2;
  t.adam_eps = adam_eps;
  t.batch_size = batch_size;
  t.total_steps = total_steps;
  t.snapshot_steps = snapshot_steps;
  if (churn_step && *churn_step != 0 &&
      std::find(t.snapshot_steps.begin(), t.snapshot_steps.end(), *churn_step) == t.snapshot_steps.end()) {
    t.snapshot_steps.push_back(*churn_step);
  }
  t.seed = mix_seeds(seed, kPretrainStream);
  return t;
}

TransferSetup ExperimentConfig::transfer_setup() const {
  TransferSetup s;
  s.model = model_config();
  s.domain_a = domain(Domain::a);
  s.domain_b = domain(Domain::b);
  s.train_examples_a = train_examples;
  s.eval_examples_a = eval_examples;
  s.train_examples_b = transfer_train_examples;
  s.eval_examples_b = transfer_eval_examples;
  s.pretrain = train_config();
  s.ablation_mode = ablation_mode;
  s.ablation_seeds = ablation_seeds;
  s.epsilon = epsilon;
  s.fl = fl;
  s.fl.seed = mix_seeds(seed, kFlStream);
  s.schedules = schedules;
  s.seed = seed;
  return s;
}

Dataset ExperimentConfig::dataset(Domain d, Split split) const { return transfer_dataset(transfer_setup(), d, split); }

void ExperimentConfig::validate() const {
  model_config().validate();
  domain(Domain::a).validate();
  domain(Domain::b).validate();
  train_config().validate();
  fl.validate();
  if (train_examples == 0 || eval_examples == 0 || transfer_train_examples == 0 || transfer_eval_examples == 0) {
    throw ConfigError("config: example counts must be at least 1");
  }
  if (transfer_train_examples < fl.num_clients) {
    throw ConfigError("config: task.transfer_train_examples must be at least fl.num_clients");
  }
  if (domain_a_transform == domain_b_transform) {
    throw ConfigError("config: task.domain_a_transform and task.domain_b_transform must differ");
  }
  if (!(epsilon >= 0.0)) throw ConfigError("config: ablation.epsilon must be non-negative");
  if (ablation_mode == ResetMode::rerand && ablation_seeds.empty()) {
    throw ConfigError("config: ablation.seeds must list at least one seed for rerand");
  }
  if (churn_step && *churn_step > total_steps) throw ConfigError("config: churn.step exceeds train.total_steps");
  for (const auto& s : schedules) s.validate(model.num_layers);
}

}  // namespace ambient
