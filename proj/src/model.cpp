#include "ambient/model.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "ambient/errors.hpp"
#include "ambient/rng.hpp"

namespace ambient {

// ---------------------------------------------------------------- enums

std::string_view to_string(NormKind kind) {
  switch (kind) {
    case NormKind::group: return "group";
    case NormKind::batch: return "batch";
    case NormKind::layer: return "layer";
  }
  return "?";
}

std::string_view to_string(LayerOrder order) {
  return order == LayerOrder::streaming ? "streaming" : "nonstreaming";
}

std::string_view to_string(SizePreset preset) {
  switch (preset) {
    case SizePreset::custom: return "custom";
    case SizePreset::toyS: return "toyS";
    case SizePreset::toyM: return "toyM";
    case SizePreset::toyL: return "toyL";
  }
  return "?";
}

NormKind parse_norm_kind(std::string_view text) {
  if (text == "group") return NormKind::group;
  if (text == "batch") return NormKind::batch;
  if (text == "layer") return NormKind::layer;
  throw ConfigError("unknown norm kind '" + std::string(text) + "' (expected group|batch|layer)");
}

LayerOrder parse_layer_order(std::string_view text) {
  if (text == "nonstreaming") return LayerOrder::nonstreaming;
  if (text == "streaming") return LayerOrder::streaming;
  throw ConfigError("unknown layer order '" + std::string(text) + "' (expected nonstreaming|streaming)");
}

SizePreset parse_size_preset(std::string_view text) {
  if (text == "custom") return SizePreset::custom;
  if (text == "toyS") return SizePreset::toyS;
  if (text == "toyM") return SizePreset::toyM;
  if (text == "toyL") return SizePreset::toyL;
  throw ConfigError("unknown size preset '" + std::string(text) + "' (expected toyS|toyM|toyL)");
}

// ---------------------------------------------------------------- config

ModelConfig ModelConfig::preset(SizePreset preset) {
  ModelConfig c;
  c.size_preset = preset;
  switch (preset) {
    case SizePreset::toyS:
      c.num_layers = 4;
      c.model_dim = 16;
      break;
    case SizePreset::toyM:
      c.num_layers = 6;
      c.model_dim = 24;
      break;
    case SizePreset::toyL:
    case SizePreset::custom:
      c.num_layers = 8;
      c.model_dim = 32;
      break;
  }
  return c;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (num_layers < 2) fail("num_layers must be at least 2");
  if (model_dim == 0) fail("model_dim must be positive");
  if (ffn_expansion == 0) fail("ffn_expansion must be positive");
  if (num_heads == 0 || model_dim % num_heads != 0) fail("model_dim must be divisible by num_heads");
  if (group_count == 0 || model_dim % group_count != 0) fail("model_dim must be divisible by group_count");
  if (conv_kernel == 0 || conv_kernel % 2 == 0) fail("conv_kernel must be odd");
  if (num_classes < 2) fail("num_classes must be at least 2");
  if (feature_dim == 0) fail("feature_dim must be positive");
  if (frames == 0) fail("frames must be positive");
  if (!(norm_eps > 0.0)) fail("norm_eps must be positive");
  if (!(bn_momentum > 0.0 && bn_momentum <= 1.0)) fail("bn_momentum must be in (0, 1]");
}

std::size_t ModelConfig::conv_unit_size() const {
  switch (norm_kind) {
    case NormKind::group: return conv_channels() / group_count;
    case NormKind::batch: return 1;
    case NormKind::layer: return conv_channels();
  }
  return conv_channels();
}

std::string ModelConfig::canonical() const {
  std::ostringstream out;
  out.precision(17);
  out << "num_layers=" << num_layers << ";model_dim=" << model_dim << ";ffn_expansion=" << ffn_expansion
      << ";num_heads=" << num_heads << ";conv_kernel=" << conv_kernel << ";norm_kind=" << to_string(norm_kind)
      << ";group_count=" << group_count << ";layer_order=" << to_string(layer_order)
      << ";num_classes=" << num_classes << ";feature_dim=" << feature_dim << ";frames=" << frames
      << ";positional_embedding=" << (positional_embedding ? 1 : 0) << ";norm_eps=" << norm_eps
      << ";bn_momentum=" << bn_momentum;
  return out.str();
}

std::uint64_t ModelConfig::hash() const { return fnv1a64(canonical()); }

// ---------------------------------------------------------------- taxonomy

std::string_view to_string(ModuleLabel label) {
  switch (label) {
    case ModuleLabel::ffn_start: return "ffn_start";
    case ModuleLabel::ffn_end: return "ffn_end";
    case ModuleLabel::mhsa_query: return "mhsa_query";
    case ModuleLabel::mhsa_key: return "mhsa_key";
    case ModuleLabel::mhsa_value: return "mhsa_value";
    case ModuleLabel::mhsa_post: return "mhsa_post";
    case ModuleLabel::conv_pointwise_in: return "conv_pointwise_in";
    case ModuleLabel::conv_depthwise: return "conv_depthwise";
    case ModuleLabel::conv_pointwise_out: return "conv_pointwise_out";
    case ModuleLabel::norm_params: return "norm_params";
  }
  return "?";
}

std::optional<ModuleLabel> parse_module_label(std::string_view text) {
  for (ModuleLabel l : kModuleLabels)
    if (to_string(l) == text) return l;
  return std::nullopt;
}

bool is_attention_module(ModuleLabel label) {
  return label == ModuleLabel::mhsa_query || label == ModuleLabel::mhsa_key || label == ModuleLabel::mhsa_value ||
         label == ModuleLabel::mhsa_post;
}

bool is_convolution_module(ModuleLabel label) {
  return label == ModuleLabel::conv_pointwise_in || label == ModuleLabel::conv_depthwise ||
         label == ModuleLabel::conv_pointwise_out;
}

// ---------------------------------------------------------------- keys

std::string ParamKey::name() const {
  std::string layer_part;
  if (layer == kInputLayer) {
    layer_part = "input";
  } else if (layer == kHeadLayer) {
    layer_part = "head";
  } else {
    layer_part = std::to_string(layer);
  }
  return layer_part + "/" + module + "/" + tensor;
}

ParamKey ParamKey::parse(std::string_view name) {
  const auto first = name.find('/');
  const auto second = first == std::string_view::npos ? first : name.find('/', first + 1);
  if (second == std::string_view::npos) throw KeyError("malformed tensor name '" + std::string(name) + "'");
  const std::string_view layer_part = name.substr(0, first);
  ParamKey key;
  if (layer_part == "input") {
    key.layer = kInputLayer;
  } else if (layer_part == "head") {
    key.layer = kHeadLayer;
  } else {
    if (layer_part.empty()) throw KeyError("malformed tensor name '" + std::string(name) + "'");
    int v = 0;
    for (char c : layer_part) {
      if (c < '0' || c > '9') throw KeyError("malformed layer id in '" + std::string(name) + "'");
      v = v * 10 + (c - '0');
    }
    key.layer = v;
  }
  key.module = std::string(name.substr(first + 1, second - first - 1));
  key.tensor = std::string(name.substr(second + 1));
  return key;
}

// ---------------------------------------------------------------- init

std::uint64_t InitSpec::derived_seed() const { return mix_seeds(root_seed, key_hash); }

Tensor InitSpec::draw(const Shape& shape) const {
  Tensor t = Tensor::zeros(shape);
  switch (kind) {
    case InitKind::constant:
      for (double& v : t.data()) v = param_a;
      break;
    case InitKind::uniform: {
      Rng rng(derived_seed());
      for (double& v : t.data()) v = rng.uniform(param_a, param_b);
      break;
    }
    case InitKind::normal: {
      Rng rng(derived_seed());
      for (double& v : t.data()) v = param_a + param_b * rng.normal();
      break;
    }
  }
  return t;
}

InitSpec InitSpec::with_root_seed(std::uint64_t seed) const {
  InitSpec s = *this;
  s.root_seed = seed;
  return s;
}

double InitSpec::expected_mean() const {
  switch (kind) {
    case InitKind::uniform: return 0.5 * (param_a + param_b);
    case InitKind::normal:
    case InitKind::constant: return param_a;
  }
  return 0.0;
}

double InitSpec::expected_std() const {
  switch (kind) {
    case InitKind::uniform: return (param_b - param_a) / std::sqrt(12.0);
    case InitKind::normal: return param_b;
    case InitKind::constant: return 0.0;
  }
  return 0.0;
}

// ---------------------------------------------------------------- store

ParamStore::ParamStore(ModelConfig config, std::uint64_t root_seed)
    : config_(std::make_shared<const ModelConfig>(std::move(config))),
      config_hash_(config_->hash()),
      root_seed_(root_seed) {}

ParamStore ParamStore::detached(std::uint64_t config_hash, std::uint64_t root_seed) {
  ParamStore s;
  s.config_hash_ = config_hash;
  s.root_seed_ = root_seed;
  return s;
}

const ModelConfig& ParamStore::config() const {
  if (!config_) throw ConfigError("parameter store has no attached model config");
  return *config_;
}

const ParamEntry& ParamStore::at(const ParamKey& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw KeyError("unknown tensor '" + key.name() + "'");
  return it->second;
}

ParamEntry& ParamStore::at(const ParamKey& key) {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw KeyError("unknown tensor '" + key.name() + "'");
  return it->second;
}

void ParamStore::insert(ParamKey key, ParamEntry entry) { entries_[std::move(key)] = std::move(entry); }

void ParamStore::set(const ParamKey& key, Tensor value) {
  ParamEntry& e = at(key);
  if (e.value.shape() != value.shape()) {
    throw ShapeError("set '" + key.name() + "': shape " + shape_string(value.shape()) + " does not match " +
                     shape_string(e.value.shape()));
  }
  e.value = std::move(value);
}

std::vector<ParamKey> ParamStore::layer_keys(int layer) const {
  std::vector<ParamKey> keys;
  for (const auto& [key, entry] : entries_)
    if (key.layer == layer) keys.push_back(key);
  return keys;
}

bool ParamStore::structurally_equal(const ParamStore& other) const {
  if (config_hash_ != other.config_hash_ || entries_.size() != other.entries_.size()) return false;
  auto a = entries_.begin();
  auto b = other.entries_.begin();
  for (; a != entries_.end(); ++a, ++b) {
    if (a->first != b->first || a->second.value.shape() != b->second.value.shape()) return false;
  }
  return true;
}

void ParamStore::require_compatible(const ParamStore& other, std::string_view what) const {
  if (!structurally_equal(other)) {
    throw ConfigError(std::string(what) + ": parameter stores come from different model configs");
  }
}

bool bitwise_equal(const ParamStore& a, const ParamStore& b) {
  if (!a.structurally_equal(b)) return false;
  auto ia = a.entries().begin();
  auto ib = b.entries().begin();
  for (; ia != a.entries().end(); ++ia, ++ib) {
    if (!bitwise_equal(ia->second.value, ib->second.value)) return false;
  }
  return true;
}

// ---------------------------------------------------------------- layout

namespace {

TensorLayout uniform_weight(int layer, std::string_view module, std::string_view tensor, Shape shape,
                            std::size_t fan_in) {
  const double bound = std::sqrt(3.0 / static_cast<double>(fan_in));
  return {{layer, std::string(module), std::string(tensor)}, std::move(shape), InitKind::uniform, -bound, bound, true};
}

TensorLayout constant(int layer, std::string_view module, std::string_view tensor, Shape shape, double value,
                      bool trainable = true) {
  return {{layer, std::string(module), std::string(tensor)}, std::move(shape), InitKind::constant, value, 0.0,
          trainable};
}

void add_norm(std::vector<TensorLayout>& out, int layer, const std::string& prefix, std::size_t channels,
              bool with_running_stats) {
  const auto nm = to_string(ModuleLabel::norm_params);
  out.push_back(constant(layer, nm, prefix + ".gamma", {channels}, 1.0));
  out.push_back(constant(layer, nm, prefix + ".beta", {channels}, 0.0));
  if (with_running_stats) {
    out.push_back(constant(layer, nm, prefix + ".running_mean", {channels}, 0.0, false));
    out.push_back(constant(layer, nm, prefix + ".running_var", {channels}, 1.0, false));
  }
}

}  // namespace

std::vector<TensorLayout> model_layout(const ModelConfig& config) {
  config.validate();
  const std::size_t dim = config.model_dim, hidden = config.ffn_hidden(), ch = config.conv_channels();
  const bool bn = config.norm_kind == NormKind::batch;
  std::vector<TensorLayout> out;

  out.push_back(uniform_weight(kInputLayer, "input_proj", names::weight, {config.feature_dim, dim}, config.feature_dim));
  out.push_back(constant(kInputLayer, "input_proj", names::bias, {dim}, 0.0));
  if (config.positional_embedding) {
    out.push_back({{kInputLayer, "pos_embed", std::string(names::table)},
                   {config.frames, dim}, InitKind::normal, 0.0, 0.1, true});
  }

  for (std::size_t d = 0; d < config.num_layers; ++d) {
    const int l = static_cast<int>(d);
    for (ModuleLabel ffn : {ModuleLabel::ffn_start, ModuleLabel::ffn_end}) {
      const auto m = to_string(ffn);
      out.push_back(uniform_weight(l, m, names::w_in, {dim, hidden}, dim));
      out.push_back(constant(l, m, names::b_in, {hidden}, 0.0));
      out.push_back(uniform_weight(l, m, names::w_out, {hidden, dim}, hidden));
      out.push_back(constant(l, m, names::b_out, {dim}, 0.0));
    }
    for (ModuleLabel att : {ModuleLabel::mhsa_query, ModuleLabel::mhsa_key, ModuleLabel::mhsa_value,
                            ModuleLabel::mhsa_post}) {
      const auto m = to_string(att);
      out.push_back(uniform_weight(l, m, names::weight, {dim, dim}, dim));
      out.push_back(constant(l, m, names::bias, {dim}, 0.0));
    }
    {
      const auto m = to_string(ModuleLabel::conv_pointwise_in);
      out.push_back(uniform_weight(l, m, names::weight, {dim, 2 * ch}, dim));
      out.push_back(constant(l, m, names::bias, {2 * ch}, 0.0));
    }
    {
      const auto m = to_string(ModuleLabel::conv_depthwise);
      out.push_back(uniform_weight(l, m, names::kernel, {config.conv_kernel, ch}, config.conv_kernel));
      out.push_back(constant(l, m, names::bias, {ch}, 0.0));
    }
    {
      const auto m = to_string(ModuleLabel::conv_pointwise_out);
      out.push_back(uniform_weight(l, m, names::weight, {ch, dim}, ch));
      out.push_back(constant(l, m, names::bias, {dim}, 0.0));
    }
    add_norm(out, l, "ffn_start_ln", dim, false);
    add_norm(out, l, "mhsa_ln", dim, false);
    add_norm(out, l, "conv_ln", dim, false);
    add_norm(out, l, "conv_norm", ch, bn);
    add_norm(out, l, "ffn_end_ln", dim, false);
    add_norm(out, l, "final_norm", dim, bn);
  }

  out.push_back(uniform_weight(kHeadLayer, "classifier", names::weight, {dim, config.num_classes}, dim));
  out.push_back(constant(kHeadLayer, "classifier", names::bias, {config.num_classes}, 0.0));
  return out;
}

ParamStore init_model(const ModelConfig& config, std::uint64_t root_seed) {
  ParamStore store(config, root_seed);
  for (const TensorLayout& t : model_layout(config)) {
    InitSpec spec{t.kind, t.param_a, t.param_b, root_seed, fnv1a64(t.key.name())};
    Tensor value = spec.draw(t.shape);
    store.insert(t.key, ParamEntry{std::move(value), spec, t.trainable});
  }
  return store;
}

ParamStore reseed_tensor(const ParamStore& params, const ParamKey& key, std::uint64_t new_seed) {
  ParamStore out = params;
  ParamEntry& e = out.at(key);
  e.init = e.init.with_root_seed(new_seed);
  e.value = e.init.draw(e.value.shape());
  return out;
}

// ---------------------------------------------------------------- counting

ParamCounts count_params(const ModelConfig& config, CountGranularity) {
  ParamCounts c;
  c.per_layer.assign(config.num_layers, 0);
  for (ModuleLabel l : kModuleLabels) c.per_module[l] = 0;
  for (const TensorLayout& t : model_layout(config)) {
    if (!t.trainable) continue;
    const std::size_t n = shape_numel(t.shape);
    c.total += n;
    if (t.key.layer == kInputLayer) {
      c.input += n;
    } else if (t.key.layer == kHeadLayer) {
      c.head += n;
    } else {
      c.encoder += n;
      c.per_layer[static_cast<std::size_t>(t.key.layer)] += n;
      c.per_module[*parse_module_label(t.key.module)] += n;
    }
  }
  return c;
}

std::size_t count_trainable(const ParamStore& params, bool encoder_only) {
  std::size_t n = 0;
  for (const auto& [key, entry] : params.entries()) {
    if (!entry.trainable || (encoder_only && !key.is_encoder())) continue;
    n += entry.value.size();
  }
  return n;
}

// ---------------------------------------------------------------- forward

namespace {

class ForwardPass {
 public:
  ForwardPass(const ParamStore& params, NormMode mode, Graph& graph, BufferUpdates* updates)
      : params_(params), config_(params.config()), mode_(mode), graph_(graph), updates_(updates) {
    for (const auto& [key, entry] : params.entries()) {
      if (entry.trainable) vars_.emplace(key, graph.parameter(key.name(), entry.value));
    }
  }

  Var run(const Tensor& batch) {
    if (batch.rank() != 3 || batch.dim(1) != config_.frames || batch.dim(2) != config_.feature_dim) {
      throw ShapeError("forward: expected batch [B x " + std::to_string(config_.frames) + " x " +
                       std::to_string(config_.feature_dim) + "], got " + shape_string(batch.shape()));
    }
    frames_ = batch.dim(1);
    Var x = graph_.constant(batch.reshaped({batch.dim(0) * frames_, batch.dim(2)}));
    x = ops::add_bias(ops::matmul(x, param(kInputLayer, "input_proj", names::weight)),
                      param(kInputLayer, "input_proj", names::bias));
    if (config_.positional_embedding) {
      x = ops::add_positional(x, param(kInputLayer, "pos_embed", names::table), frames_);
    }
    for (std::size_t d = 0; d < config_.num_layers; ++d) x = layer(x, static_cast<int>(d));
    Var pooled = ops::mean_pool(x, frames_);
    return ops::add_bias(ops::matmul(pooled, param(kHeadLayer, "classifier", names::weight)),
                         param(kHeadLayer, "classifier", names::bias));
  }

 private:
  Var param(int layer, std::string_view module, std::string_view tensor) {
    ParamKey key{layer, std::string(module), std::string(tensor)};
    auto it = vars_.find(key);
    if (it == vars_.end()) throw KeyError("forward: missing tensor '" + key.name() + "'");
    return it->second;
  }

  Var norm_param(int layer, const std::string& prefix, const char* suffix) {
    return param(layer, to_string(ModuleLabel::norm_params), prefix + suffix);
  }

  Var layer_norm(Var x, int layer, const std::string& prefix) {
    return ops::layer_norm(x, norm_param(layer, prefix, ".gamma"), norm_param(layer, prefix, ".beta"),
                           config_.norm_eps);
  }

  /// Normalisation selected by norm_kind; `group_size` fixes channels per group.
  Var configured_norm(Var x, int layer, const std::string& prefix, std::size_t group_size) {
    Var gamma = norm_param(layer, prefix, ".gamma");
    Var beta = norm_param(layer, prefix, ".beta");
    const std::size_t channels = x.value().cols();
    switch (config_.norm_kind) {
      case NormKind::layer: return ops::layer_norm(x, gamma, beta, config_.norm_eps);
      case NormKind::group: return ops::group_norm(x, channels / group_size, gamma, beta, config_.norm_eps);
      case NormKind::batch: {
        const std::string nm(to_string(ModuleLabel::norm_params));
        const ParamKey mean_key{layer, nm, prefix + ".running_mean"};
        const ParamKey var_key{layer, nm, prefix + ".running_var"};
        BatchNormStats stats{params_.tensor(mean_key), params_.tensor(var_key)};
        Var y = ops::batch_norm(x, gamma, beta, stats, mode_, config_.bn_momentum, config_.norm_eps);
        if (mode_ == NormMode::train && updates_) {
          (*updates_)[mean_key] = std::move(stats.mean);
          (*updates_)[var_key] = std::move(stats.var);
        }
        return y;
      }
    }
    return x;
  }

  Var ffn(Var x, int layer, ModuleLabel which) {
    const auto m = to_string(which);
    const std::string ln = which == ModuleLabel::ffn_start ? "ffn_start_ln" : "ffn_end_ln";
    Var h = layer_norm(x, layer, ln);
    h = ops::add_bias(ops::matmul(h, param(layer, m, names::w_in)), param(layer, m, names::b_in));
    h = ops::swish(h);
    h = ops::add_bias(ops::matmul(h, param(layer, m, names::w_out)), param(layer, m, names::b_out));
    return ops::add(x, ops::scale(h, 0.5));
  }

  Var projection(Var h, int layer, ModuleLabel module) {
    const auto m = to_string(module);
    return ops::add_bias(ops::matmul(h, param(layer, m, names::weight)), param(layer, m, names::bias));
  }

  Var mhsa(Var x, int layer) {
    Var h = layer_norm(x, layer, "mhsa_ln");
    Var q = projection(h, layer, ModuleLabel::mhsa_query);
    Var k = projection(h, layer, ModuleLabel::mhsa_key);
    Var v = projection(h, layer, ModuleLabel::mhsa_value);
    const std::size_t heads = q.value().cols() / config_.head_dim();
    Var a = ops::attention(q, k, v, frames_, heads);
    return ops::add(x, projection(a, layer, ModuleLabel::mhsa_post));
  }

  Var conv(Var x, int layer) {
    Var h = layer_norm(x, layer, "conv_ln");
    h = ops::glu(projection(h, layer, ModuleLabel::conv_pointwise_in));
    const auto dw = to_string(ModuleLabel::conv_depthwise);
    h = ops::add_bias(ops::conv1d_depthwise(h, param(layer, dw, names::kernel), frames_),
                      param(layer, dw, names::bias));
    h = ops::swish(configured_norm(h, layer, "conv_norm", config_.conv_unit_size()));
    return ops::add(x, projection(h, layer, ModuleLabel::conv_pointwise_out));
  }

  Var layer(Var x, int l) {
    x = ffn(x, l, ModuleLabel::ffn_start);
    if (config_.layer_order == LayerOrder::nonstreaming) {
      x = mhsa(x, l);
      x = conv(x, l);
    } else {
      x = conv(x, l);
      x = mhsa(x, l);
    }
    x = ffn(x, l, ModuleLabel::ffn_end);
    return configured_norm(x, l, "final_norm", config_.model_dim / config_.group_count);
  }

  const ParamStore& params_;
  const ModelConfig& config_;
  NormMode mode_;
  Graph& graph_;
  BufferUpdates* updates_;
  std::map<ParamKey, Var> vars_;
  std::size_t frames_ = 0;
};

}  // namespace

Var forward(const ParamStore& params, const Tensor& batch, NormMode mode, Graph& graph,
            BufferUpdates* buffer_updates) {
  ForwardPass pass(params, mode, graph, buffer_updates);
  return pass.run(batch);
}

Tensor predict_logits(const ParamStore& params, const Tensor& batch) {
  Graph graph(false);
  return forward(params, batch, NormMode::eval, graph).value();
}

}  // namespace ambient
