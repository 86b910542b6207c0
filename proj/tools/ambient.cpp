// Command-line driver for the layer criticality experiments.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "ambient/commands.hpp"
#include "ambient/errors.hpp"
#include "ambient/runtime.hpp"

namespace fs = std::filesystem;
using namespace ambient;

namespace {

struct Options {
  std::string config;
  std::string out = "run";
  std::optional<std::uint64_t> seed;
  std::string checkpoint;
  std::string initial;
  std::string preset;
  bool run = false;
};

ExperimentConfig load_config(const Options& o) {
  ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : ExperimentConfig::load(o.config);
  if (o.seed) c.seed = *o.seed;
  c.validate();
  return c;
}

std::optional<fs::path> optional_path(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return fs::path(s);
}

void print_eval(const char* what, const std::optional<EvalReport>& r) {
  if (r) std::printf("%s error %.4f loss %.4f (%zu examples)\n", what, r->error_rate, r->mean_loss, r->num_examples);
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Layer criticality experiments: train, ablate, churn, federated transfer"};
  app.require_subcommand(1);
  Options o;

  const auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Experiment config (key=value lines)");
    sub->add_option("--out", o.out, "Run directory")->capture_default_str();
    sub->add_option("--seed", o.seed, "Override the root seed");
  };

  auto* train_cmd = app.add_subcommand("train", "Train from scratch, writing checkpoints");
  common(train_cmd);

  auto* ablate_cmd = app.add_subcommand("ablate", "Reset each encoder layer of a checkpoint and evaluate");
  common(ablate_cmd);
  ablate_cmd->add_option("--checkpoint", o.checkpoint, "Trained checkpoint")->required();
  ablate_cmd->add_option("--initial", o.initial, "Step-0 checkpoint (default: regenerate from the seed)");

  auto* churn_cmd = app.add_subcommand("churn", "Per-module weight churn of a checkpoint against step 0");
  common(churn_cmd);
  churn_cmd->add_option("--checkpoint", o.checkpoint, "Checkpoint at step t")->required();
  churn_cmd->add_option("--initial", o.initial, "Step-0 checkpoint (default: regenerate from the seed)");

  auto* fl_cmd = app.add_subcommand("fl", "Federated transfer to the second domain under dropout schedules");
  common(fl_cmd);
  fl_cmd->add_option("--checkpoint", o.checkpoint, "Pretrained checkpoint (default: pretrain first)");

  auto* report_cmd = app.add_subcommand("report", "Aggregate ablation.csv across runs into stability.csv");
  report_cmd->add_option("--out", o.out, "Directory holding the runs")->capture_default_str();

  auto* preset_cmd = app.add_subcommand("preset", "Write (and optionally run) a preset experiment bundle");
  common(preset_cmd);
  preset_cmd->add_option("name", o.preset, "bn_vs_gn | reinit_vs_rerand | stability5 | table3_analog")->required();
  preset_cmd->add_flag("--run", o.run, "Run every configuration after writing it");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (train_cmd->parsed()) {
      const auto summary = cmd_train(load_config(o), o.out);
      for (const auto& p : summary.checkpoints) std::printf("wrote %s\n", p.string().c_str());
      print_eval("train", summary.train_eval);
      print_eval("eval", summary.eval);
    } else if (ablate_cmd->parsed()) {
      const auto r = cmd_ablate(load_config(o), o.checkpoint, o.out, optional_path(o.initial));
      const auto c = classify_layers(r, load_config(o).epsilon);
      std::printf("baseline error %.4f\n", r.baseline.error_rate);
      for (std::size_t d = 0; d < r.per_layer.size(); ++d) {
        const bool ambient = std::find(c.ambient.begin(), c.ambient.end(), d) != c.ambient.end();
        std::printf("layer %zu error %.4f %s\n", d, r.per_layer[d].error_rate, ambient ? "ambient" : "critical");
      }
    } else if (churn_cmd->parsed()) {
      const auto t = cmd_churn(load_config(o), o.checkpoint, o.out, optional_path(o.initial));
      std::printf("churn at step %zu over %zu layers written to %s\n", t.step, t.num_layers,
                  RunDir{o.out}.csv("churn").string().c_str());
    } else if (fl_cmd->parsed()) {
      const auto r = cmd_fl(load_config(o), optional_path(o.checkpoint), o.out);
      for (const auto& row : r.rows) {
        std::printf("%-12s dropped %.4f error %.4f\n", row.schedule.c_str(), row.params_dropped, row.eval_error);
      }
    } else if (report_cmd->parsed()) {
      for (const auto& row : cmd_report(o.out, o.out)) {
        std::printf("%-9s min %.4f mean %.4f max %.4f\n", row.layer.c_str(), row.min, row.mean, row.max);
      }
    } else if (preset_cmd->parsed()) {
      const auto bundle = preset_experiments(o.preset, load_config(o));
      write_preset(bundle, o.out);
      if (o.run) run_preset(bundle, o.out);
      for (const auto& [name, c] : bundle.runs) std::printf("%s\n", (fs::path(o.out) / name).string().c_str());
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
