#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <vector>

#include "ambient/model.hpp"

namespace ambient {

struct ChurnTable {
  std::size_t step = 0;
  std::size_t num_layers = 0;
  /// Per module label, one value per encoder layer. `churn` is `raw` divided
  /// by the row maximum; rows whose maximum is zero are all 0.0.
  std::map<ModuleLabel, std::vector<double>> churn;
  std::map<ModuleLabel, std::vector<double>> raw;
};

/// Frobenius norm of params_t - params_0 over every trainable tensor that
/// belongs to (module, layer), flattened together.
double weight_delta_norm(const ParamStore& params_t, const ParamStore& params_0, ModuleLabel module,
                         std::size_t layer);

/// Rows for every module label and every encoder layer. The layer count comes
/// from the config when attached, otherwise from the highest layer present.
ChurnTable churn_table(const ParamStore& params_t, const ParamStore& params_0, std::size_t step = 0);

/// Writes "module,layer,churn,raw" with rows ordered by module label (in
/// taxonomy order) then layer; numbers use 9 significant digits.
void emit_churn_csv(const ChurnTable& table, const std::filesystem::path& path);
std::string format_churn_csv(const ChurnTable& table);

struct ChurnRow {
  ModuleLabel module;
  std::size_t layer;
  double churn;
  double raw;
};

std::vector<ChurnRow> parse_churn_csv(const std::filesystem::path& path);

}  // namespace ambient
