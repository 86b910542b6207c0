#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ambient/autodiff.hpp"
#include "ambient/tensor.hpp"

namespace ambient {

enum class NormKind { group, batch, layer };
enum class LayerOrder { nonstreaming, streaming };
enum class SizePreset { custom, toyS, toyM, toyL };

std::string_view to_string(NormKind kind);
std::string_view to_string(LayerOrder order);
std::string_view to_string(SizePreset preset);
NormKind parse_norm_kind(std::string_view text);
LayerOrder parse_layer_order(std::string_view text);
SizePreset parse_size_preset(std::string_view text);

/// Architecture of the conformer-lite encoder and its classifier head.
struct ModelConfig {
  std::size_t num_layers = 8;
  std::size_t model_dim = 32;
  std::size_t ffn_expansion = 4;
  std::size_t num_heads = 4;
  std::size_t conv_kernel = 7;
  NormKind norm_kind = NormKind::group;
  std::size_t group_count = 4;
  LayerOrder layer_order = LayerOrder::nonstreaming;
  std::size_t num_classes = 8;
  std::size_t feature_dim = 12;
  /// Sequence length; sizes the learned positional table.
  std::size_t frames = 12;
  bool positional_embedding = true;
  double norm_eps = 1e-5;
  double bn_momentum = 0.1;
  SizePreset size_preset = SizePreset::custom;

  /// toyS: D=4, dim=16. toyM: D=6, dim=24. toyL: D=8, dim=32.
  static ModelConfig preset(SizePreset preset);

  /// Throws ConfigError on any broken invariant.
  void validate() const;
  std::size_t head_dim() const { return model_dim / num_heads; }
  std::size_t ffn_hidden() const { return model_dim * ffn_expansion; }
  std::size_t conv_channels() const { return model_dim; }
  /// Channels per droppable unit of the convolution module. Units are whole
  /// normalisation groups so that dropping one never perturbs the statistics
  /// of the channels that remain.
  std::size_t conv_unit_size() const;
  std::size_t conv_units() const { return conv_channels() / conv_unit_size(); }

  /// Stable text form; its FNV-1a hash identifies checkpoints.
  std::string canonical() const;
  std::uint64_t hash() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// ---------------------------------------------------------------- taxonomy

enum class ModuleLabel {
  ffn_start,
  ffn_end,
  mhsa_query,
  mhsa_key,
  mhsa_value,
  mhsa_post,
  conv_pointwise_in,
  conv_depthwise,
  conv_pointwise_out,
  norm_params,
};

inline constexpr std::array<ModuleLabel, 10> kModuleLabels = {
    ModuleLabel::ffn_start,         ModuleLabel::ffn_end,        ModuleLabel::mhsa_query,
    ModuleLabel::mhsa_key,          ModuleLabel::mhsa_value,     ModuleLabel::mhsa_post,
    ModuleLabel::conv_pointwise_in, ModuleLabel::conv_depthwise, ModuleLabel::conv_pointwise_out,
    ModuleLabel::norm_params,
};

std::string_view to_string(ModuleLabel label);
std::optional<ModuleLabel> parse_module_label(std::string_view text);
bool is_attention_module(ModuleLabel label);
bool is_convolution_module(ModuleLabel label);

// ---------------------------------------------------------------- keys

inline constexpr int kInputLayer = -1;
inline constexpr int kHeadLayer = -2;

/// Identifies one tensor: encoder layer (or a pseudo-layer), module, tensor.
struct ParamKey {
  int layer = 0;
  std::string module;
  std::string tensor;

  /// "(layer)/(module)/(tensor)"; pseudo-layers print as "input" and "head".
  std::string name() const;
  static ParamKey parse(std::string_view name);
  bool is_encoder() const { return layer >= 0; }

  friend auto operator<=>(const ParamKey&, const ParamKey&) = default;
};

// ---------------------------------------------------------------- init

enum class InitKind : std::uint8_t { uniform = 0, normal = 1, constant = 2 };

/// How a tensor's initial values are drawn. The generator seed is
/// mix_seeds(root_seed, key_hash) where key_hash = fnv1a64(key.name()).
struct InitSpec {
  InitKind kind = InitKind::constant;
  /// uniform: [param_a, param_b); normal: mean param_a, std param_b;
  /// constant: every element equals param_a.
  double param_a = 0.0;
  double param_b = 0.0;
  std::uint64_t root_seed = 0;
  std::uint64_t key_hash = 0;

  std::uint64_t derived_seed() const;
  Tensor draw(const Shape& shape) const;
  /// Same distribution, seeded from a different root.
  InitSpec with_root_seed(std::uint64_t seed) const;
  double expected_mean() const;
  double expected_std() const;

  friend bool operator==(const InitSpec&, const InitSpec&) = default;
};

struct ParamEntry {
  Tensor value;
  InitSpec init;
  /// Batch-norm running statistics are stored alongside parameters but are
  /// never differentiated, counted as parameters, or included in churn.
  bool trainable = true;
};

/// Model state: every tensor keyed by ParamKey, with its InitSpec. Copies are
/// deep; functions that "modify" a store return a new one.
class ParamStore {
 public:
  using Map = std::map<ParamKey, ParamEntry>;

  ParamStore() = default;
  ParamStore(ModelConfig config, std::uint64_t root_seed);
  /// Store without an attached architecture, used for hand-built fixtures.
  static ParamStore detached(std::uint64_t config_hash, std::uint64_t root_seed);

  bool has_config() const noexcept { return config_ != nullptr; }
  const ModelConfig& config() const;
  std::uint64_t config_hash() const noexcept { return config_hash_; }
  std::uint64_t root_seed() const noexcept { return root_seed_; }

  bool contains(const ParamKey& key) const { return entries_.contains(key); }
  const ParamEntry& at(const ParamKey& key) const;
  ParamEntry& at(const ParamKey& key);
  const Tensor& tensor(const ParamKey& key) const { return at(key).value; }
  void insert(ParamKey key, ParamEntry entry);
  /// Replaces a tensor's values; shape must match.
  void set(const ParamKey& key, Tensor value);

  const Map& entries() const noexcept { return entries_; }
  Map& entries() noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  std::vector<ParamKey> layer_keys(int layer) const;

  /// Same config hash and same key set with the same shapes.
  bool structurally_equal(const ParamStore& other) const;
  /// Throws ConfigError unless the two stores describe the same architecture.
  void require_compatible(const ParamStore& other, std::string_view what) const;

 private:
  std::shared_ptr<const ModelConfig> config_;
  std::uint64_t config_hash_ = 0;
  std::uint64_t root_seed_ = 0;
  Map entries_;
};

bool bitwise_equal(const ParamStore& a, const ParamStore& b);

/// Shape and initialiser of one tensor before any values exist.
struct TensorLayout {
  ParamKey key;
  Shape shape;
  InitKind kind;
  double param_a;
  double param_b;
  bool trainable;
};

/// Every tensor the architecture defines, in key order.
std::vector<TensorLayout> model_layout(const ModelConfig& config);

ParamStore init_model(const ModelConfig& config, std::uint64_t root_seed);

/// Redraws one tensor from its InitSpec rooted at `new_seed`.
ParamStore reseed_tensor(const ParamStore& params, const ParamKey& key, std::uint64_t new_seed);

// ---------------------------------------------------------------- counting

enum class CountGranularity { total, per_layer, per_module };

struct ParamCounts {
  std::size_t total = 0;
  std::size_t input = 0;
  std::size_t head = 0;
  std::size_t encoder = 0;
  std::vector<std::size_t> per_layer;
  /// Summed over all encoder layers.
  std::map<ModuleLabel, std::size_t> per_module;
};

/// Trainable scalar counts. The granularity argument selects which fields
/// are of interest; all fields are always filled.
ParamCounts count_params(const ModelConfig& config, CountGranularity granularity = CountGranularity::total);
std::size_t count_trainable(const ParamStore& params, bool encoder_only);

// ---------------------------------------------------------------- forward

/// New batch-norm running statistics produced by a train-mode forward pass.
using BufferUpdates = std::map<ParamKey, Tensor>;

/// Tensor names used by the encoder layers. Dims of every module are read
/// from these tensors' shapes, so sliced submodels run through the same code.
namespace names {
inline constexpr std::string_view w_in = "w_in";
inline constexpr std::string_view b_in = "b_in";
inline constexpr std::string_view w_out = "w_out";
inline constexpr std::string_view b_out = "b_out";
inline constexpr std::string_view weight = "weight";
inline constexpr std::string_view bias = "bias";
inline constexpr std::string_view kernel = "kernel";
inline constexpr std::string_view table = "table";
}  // namespace names

/// Runs the model over batch[B x T x F] and returns logits[B x num_classes].
/// Trainable tensors are registered on `graph` as parameters named by
/// ParamKey::name(). In train mode batch-norm statistic updates are written
/// to `buffer_updates` when provided.
Var forward(const ParamStore& params, const Tensor& batch, NormMode mode, Graph& graph,
            BufferUpdates* buffer_updates = nullptr);

/// Eval-mode logits without tracing.
Tensor predict_logits(const ParamStore& params, const Tensor& batch);

}  // namespace ambient
