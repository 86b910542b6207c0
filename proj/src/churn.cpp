#include "ambient/churn.hpp"

#include <algorithm>
#include <cmath>

#include "ambient/csv.hpp"
#include "ambient/errors.hpp"

namespace ambient {

double weight_delta_norm(const ParamStore& params_t, const ParamStore& params_0, ModuleLabel module,
                         std::size_t layer) {
  params_t.require_compatible(params_0, "weight_delta_norm");
  const std::string_view label = to_string(module);
  double sq = 0.0;
  for (const auto& [key, entry] : params_t.entries()) {
    if (!entry.trainable || key.layer != static_cast<int>(layer) || key.module != label) continue;
    const Tensor& a = entry.value;
    const Tensor& b = params_0.tensor(key);
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = a[i] - b[i];
      sq += d * d;
    }
  }
  return std::sqrt(sq);
}

ChurnTable churn_table(const ParamStore& params_t, const ParamStore& params_0, std::size_t step) {
  params_t.require_compatible(params_0, "churn_table");
  ChurnTable table;
  table.step = step;
  if (params_t.has_config()) {
    table.num_layers = params_t.config().num_layers;
  } else {
    int top = -1;
    for (const auto& [key, entry] : params_t.entries()) top = std::max(top, key.layer);
    table.num_layers = static_cast<std::size_t>(top + 1);
  }
  for (ModuleLabel m : kModuleLabels) {
    std::vector<double> raw(table.num_layers);
    for (std::size_t l = 0; l < table.num_layers; ++l) raw[l] = weight_delta_norm(params_t, params_0, m, l);
    const double peak = raw.empty() ? 0.0 : *std::max_element(raw.begin(), raw.end());
    std::vector<double> norm(table.num_layers, 0.0);
    if (peak > 0.0)
      for (std::size_t l = 0; l < raw.size(); ++l) norm[l] = raw[l] / peak;
    table.raw.emplace(m, std::move(raw));
    table.churn.emplace(m, std::move(norm));
  }
  return table;
}

std::string format_churn_csv(const ChurnTable& table) {
  std::string out = "module,layer,churn,raw\n";
  for (ModuleLabel m : kModuleLabels) {
    const auto& churn = table.churn.at(m);
    const auto& raw = table.raw.at(m);
    for (std::size_t l = 0; l < table.num_layers; ++l) {
      out += std::string(to_string(m)) + ',' + std::to_string(l) + ',' + format_g9(churn[l]) + ',' +
             format_g9(raw[l]) + '\n';
    }
  }
  return out;
}

void emit_churn_csv(const ChurnTable& table, const std::filesystem::path& path) {
  write_text_file(path, format_churn_csv(table));
}

std::vector<ChurnRow> parse_churn_csv(const std::filesystem::path& path) {
  const CsvTable csv = read_csv(path);
  require_header(csv, {"module", "layer", "churn", "raw"}, path);
  std::vector<ChurnRow> rows;
  for (const auto& r : csv.rows) {
    const auto label = parse_module_label(r[0]);
    if (!label) throw FormatError("churn csv: unknown module '" + r[0] + "'");
    rows.push_back({*label, static_cast<std::size_t>(parse_csv_int(r[1])), parse_csv_double(r[2]),
                    parse_csv_double(r[3])});
  }
  return rows;
}

}  // namespace ambient
