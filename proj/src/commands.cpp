#include "ambient/commands.hpp"

#include <algorithm>
#include <limits>
#include <map>

#include "ambient/checkpoint.hpp"
#include "ambient/csv.hpp"
#include "ambient/errors.hpp"

namespace ambient {

namespace fs = std::filesystem;

fs::path RunDir::checkpoint(std::size_t step) const {
  return checkpoints() / ("step_" + std::to_string(step) + ".ambp");
}

void RunDir::prepare(const ExperimentConfig& config) const {
  fs::create_directories(checkpoints());
  fs::create_directories(root / "csv");
  write_text_file(config_file(), config.serialize());
}

TrainSummary cmd_train(const ExperimentConfig& config, const fs::path& out) {
  config.validate();
  const RunDir run{out};
  run.prepare(config);
  const TrainConfig tc = config.train_config();
  const ParamStore initial = init_model(config.model_config(), config.seed);

  TrainSummary summary;
  const auto save = [&](const ParamStore& p, std::size_t step) {
    save_checkpoint(p, step, run.checkpoint(step));
    summary.checkpoints.push_back(run.checkpoint(step));
  };
  if (tc.total_steps == 0) {
    save(initial, 0);
    return summary;
  }
  const Dataset train_data = config.dataset(Domain::a, Split::train);
  const TrainResult result = train(initial, train_data, tc);
  for (const auto& [step, params] : result.snapshots) save(params, step);
  if (!result.snapshots.contains(tc.total_steps)) save(result.final_params, tc.total_steps);
  summary.train_eval = evaluate(result.final_params, train_data);
  summary.eval = evaluate(result.final_params, config.dataset(Domain::a, Split::eval));
  return summary;
}

namespace {

ParamStore initial_params(const ExperimentConfig& config, const Checkpoint& trained,
                          const std::optional<fs::path>& initial) {
  if (initial) return load_checkpoint(*initial, config.model_config()).params;
  return round_to_f32(init_model(config.model_config(), trained.params.root_seed()));
}

}  // namespace

std::string format_ablation_csv(const AblationResult& result) {
  const std::string mode(to_string(result.mode));
  const std::string baseline = format_g9(result.baseline.error_rate);
  std::string out = "mode,layer,error,baseline\n";
  out += mode + ",baseline," + baseline + ',' + baseline + '\n';
  for (std::size_t d = 0; d < result.per_layer.size(); ++d) {
    out += mode + ',' + std::to_string(d) + ',' + format_g9(result.per_layer[d].error_rate) + ',' + baseline + '\n';
  }
  return out;
}

AblationResult cmd_ablate(const ExperimentConfig& config, const fs::path& checkpoint, const fs::path& out,
                          const std::optional<fs::path>& initial) {
  config.validate();
  const Checkpoint trained = load_checkpoint(checkpoint, config.model_config());
  const ParamStore init = initial_params(config, trained, initial);
  const RunDir run{out};
  fs::create_directories(run.root / "csv");
  const AblationResult result = ablation_sweep(trained.params, init, config.dataset(Domain::a, Split::eval),
                                               config.ablation_mode, config.ablation_seeds);
  write_text_file(run.csv("ablation"), format_ablation_csv(result));
  return result;
}

ChurnTable cmd_churn(const ExperimentConfig& config, const fs::path& checkpoint, const fs::path& out,
                     const std::optional<fs::path>& initial) {
  config.validate();
  const Checkpoint trained = load_checkpoint(checkpoint, config.model_config());
  const ParamStore init = initial_params(config, trained, initial);
  const RunDir run{out};
  fs::create_directories(run.root / "csv");
  const ChurnTable table = churn_table(trained.params, init, trained.step);
  emit_churn_csv(table, run.csv("churn"));
  return table;
}

std::string format_fl_csv(const std::vector<TransferRow>& rows) {
  std::string out = "schedule,params_dropped,eval_error,seed\n";
  for (const auto& r : rows) {
    out += r.schedule + ',' + format_g9(r.params_dropped) + ',' + format_g9(r.eval_error) + ',' +
           std::to_string(r.seed) + '\n';
  }
  return out;
}

TransferResult cmd_fl(const ExperimentConfig& config, const std::optional<fs::path>& checkpoint, const fs::path& out) {
  config.validate();
  std::optional<ParamStore> pretrained;
  if (checkpoint) pretrained = load_checkpoint(*checkpoint, config.model_config()).params;
  const RunDir run{out};
  fs::create_directories(run.root / "csv");
  TransferResult result = domain_transfer_experiment(config.transfer_setup(), pretrained);
  write_text_file(run.csv("fl"), format_fl_csv(result.rows));
  return result;
}

std::string format_stability_csv(const std::vector<StabilityRow>& rows) {
  std::string out = "layer,min,mean,max\n";
  for (const auto& r : rows) {
    out += r.layer + ',' + format_g9(r.min) + ',' + format_g9(r.mean) + ',' + format_g9(r.max) + '\n';
  }
  return out;
}

std::vector<StabilityRow> cmd_report(const fs::path& dir, const fs::path& out) {
  if (!fs::is_directory(dir)) throw Error("report: '" + dir.string() + "' is not a directory");
  std::vector<fs::path> sources;
  if (fs::exists(RunDir{dir}.csv("ablation"))) sources.push_back(RunDir{dir}.csv("ablation"));
  std::vector<fs::path> subdirs;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) subdirs.push_back(e.path());
  std::sort(subdirs.begin(), subdirs.end());
  for (const auto& d : subdirs)
    if (fs::exists(RunDir{d}.csv("ablation"))) sources.push_back(RunDir{d}.csv("ablation"));
  if (sources.empty()) throw Error("report: no csv/ablation.csv found under '" + dir.string() + "'");

  std::vector<std::string> order;
  std::map<std::string, std::vector<double>> values;
  for (const auto& src : sources) {
    const CsvTable t = read_csv(src);
    require_header(t, {"mode", "layer", "error", "baseline"}, src);
    std::vector<std::string> layers;
    for (const auto& row : t.rows) {
      layers.push_back(row[1]);
      values[row[1]].push_back(parse_csv_double(row[2]));
    }
    if (order.empty()) order = layers;
    if (layers != order) throw FormatError(src.string() + ": layer rows differ from the other runs");
  }
  std::vector<StabilityRow> rows;
  for (const auto& layer : order) {
    const auto& v = values.at(layer);
    double sum = 0.0;
    for (double x : v) sum += x;
    rows.push_back({layer, *std::min_element(v.begin(), v.end()), sum / static_cast<double>(v.size()),
                    *std::max_element(v.begin(), v.end())});
    // Guard the ordering against rounding in the mean.
    rows.back().mean = std::clamp(rows.back().mean, rows.back().min, rows.back().max);
  }
  const RunDir run{out};
  fs::create_directories(run.root / "csv");
  write_text_file(run.csv("stability"), format_stability_csv(rows));
  return rows;
}

// ---------------------------------------------------------------- presets

std::vector<std::string> preset_names() { return {"bn_vs_gn", "reinit_vs_rerand", "stability5", "table3_analog"}; }

PresetBundle preset_experiments(std::string_view name, const ExperimentConfig& base) {
  PresetBundle bundle{std::string(name), {}};
  if (name == "bn_vs_gn") {
    for (NormKind k : {NormKind::group, NormKind::batch}) {
      ExperimentConfig c = base;
      c.model.norm_kind = k;
      bundle.runs.emplace_back(std::string(to_string(k)), c);
    }
  } else if (name == "reinit_vs_rerand") {
    for (SizePreset p : {SizePreset::toyS, SizePreset::toyM, SizePreset::toyL}) {
      for (ResetMode m : {ResetMode::reinit, ResetMode::rerand}) {
        ExperimentConfig c = base;
        const ModelConfig size = ModelConfig::preset(p);
        c.model.num_layers = size.num_layers;
        c.model.model_dim = size.model_dim;
        c.model.size_preset = p;
        c.ablation_mode = m;
        bundle.runs.emplace_back(std::string(to_string(p)) + "_" + std::string(to_string(m)), c);
      }
    }
  } else if (name == "stability5" || name == "table3_analog") {
    const std::size_t count = name == "stability5" ? 5 : 3;
    bundle.seed_sweep = true;
    for (std::size_t i = 0; i < count; ++i) {
      ExperimentConfig c = base;
      c.seed = base.seed + i;
      if (name == "table3_analog") {
        c.schedules.clear();
        for (const char* s : {"crit-2@0.5", "amb-2@0.5", "crit-3@0.5", "amb-3@0.5", "crit-4@0.5", "flat@0.2",
                              "amb-4@0.5", "none"}) {
          c.schedules.push_back(DropoutSchedule::parse(s));
        }
      }
      bundle.runs.emplace_back("seed_" + std::to_string(c.seed), c);
    }
  } else {
    throw ConfigError("unknown preset '" + std::string(name) + "'");
  }
  for (const auto& [run, c] : bundle.runs) c.validate();
  return bundle;
}

void write_preset(const PresetBundle& bundle, const fs::path& out) {
  for (const auto& [name, config] : bundle.runs) {
    fs::create_directories(out / name);
    write_text_file(RunDir{out / name}.config_file(), config.serialize());
  }
}

void run_preset(const PresetBundle& bundle, const fs::path& out) {
  for (const auto& [name, config] : bundle.runs) {
    const RunDir run{out / name};
    cmd_train(config, run.root);
    const fs::path final_ckpt = run.checkpoint(config.total_steps);
    cmd_ablate(config, final_ckpt, run.root, run.checkpoint(0));
    cmd_churn(config, run.checkpoint(config.churn_step.value_or(config.total_steps)), run.root, run.checkpoint(0));
    if (!config.schedules.empty()) cmd_fl(config, final_ckpt, run.root);
  }
  if (bundle.seed_sweep) cmd_report(out, out);
}

}  // namespace ambient
