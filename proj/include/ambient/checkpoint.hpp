#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "ambient/model.hpp"

namespace ambient {

/// Binary checkpoint layout, all integers little-endian:
///   "AMBP" | u16 version | u64 config_hash | u64 root_seed | u64 step | u32 count
///   count x { u32 name_len | name | u8 dtype (0 = f32) | u8 rank | u32 dims[rank]
///             | f32 payload (row-major) | u8 init kind | f64 a | f64 b
///             | u64 init root seed | u64 key hash }
/// Tensors appear in ParamKey order.
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  ParamStore params;
  std::uint64_t step = 0;
};

std::string serialize_checkpoint(const ParamStore& params, std::uint64_t step);
void save_checkpoint(const ParamStore& params, std::uint64_t step, const std::filesystem::path& path);

/// Without `expected` the store is detached. With it, the config hash and
/// the tensor layout must match, and the config is attached.
Checkpoint parse_checkpoint(std::string_view bytes, const std::optional<ModelConfig>& expected = std::nullopt);
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const std::optional<ModelConfig>& expected = std::nullopt);

/// Rounds every tensor to f32 precision, as a save/load round trip would.
ParamStore round_to_f32(const ParamStore& params);

}  // namespace ambient
