#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "ambient/checkpoint.hpp"
#include "ambient/commands.hpp"
#include "ambient/errors.hpp"
#include "ambient/runtime.hpp"

namespace py = pybind11;
using namespace ambient;

namespace {

py::array_t<double> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::dict eval_dict(const EvalReport& r) {
  py::dict d;
  d["error_rate"] = r.error_rate;
  d["mean_loss"] = r.mean_loss;
  d["num_examples"] = r.num_examples;
  return d;
}

py::dict ablation_dict(const AblationResult& r) {
  py::dict d;
  d["mode"] = std::string(to_string(r.mode));
  d["baseline"] = eval_dict(r.baseline);
  std::vector<double> errors;
  for (const EvalReport& e : r.per_layer) errors.push_back(e.error_rate);
  d["layer_errors"] = errors;
  d["per_seed_error"] = r.per_seed_error;
  d["seeds"] = r.seeds;
  return d;
}

py::dict churn_dict(const std::map<ModuleLabel, std::vector<double>>& rows) {
  py::dict d;
  for (const auto& [m, values] : rows) d[py::str(std::string(to_string(m)))] = values;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Layer criticality, weight churn and federated dropout on a Conformer-lite model";
  tune_allocator();

  static py::exception<Error> base_error(m, "AmbientError", PyExc_RuntimeError);
  static py::exception<ConfigError> config_error(m, "ConfigError", base_error.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ConfigError& e) {
      config_error(e.what());
    } catch (const Error& e) {
      base_error(e.what());
    }
  });

  py::class_<ExperimentConfig>(m, "Config")
      .def(py::init<>())
      .def_static("parse", &ExperimentConfig::parse, py::arg("text"))
      .def_static("load", &ExperimentConfig::load, py::arg("path"))
      .def("serialize", &ExperimentConfig::serialize)
      .def("validate", &ExperimentConfig::validate)
      .def_readwrite("seed", &ExperimentConfig::seed)
      .def_readwrite("total_steps", &ExperimentConfig::total_steps)
      .def_readwrite("batch_size", &ExperimentConfig::batch_size)
      .def_readwrite("epsilon", &ExperimentConfig::epsilon)
      .def_readwrite("ablation_seeds", &ExperimentConfig::ablation_seeds)
      .def("__repr__", &ExperimentConfig::serialize);

  m.def(
      "load_checkpoint",
      [](const std::filesystem::path& path) {
        const Checkpoint c = load_checkpoint(path);
        py::dict tensors;
        for (const auto& [key, entry] : c.params.entries()) tensors[py::str(key.name())] = to_numpy(entry.value);
        py::dict d;
        d["step"] = c.step;
        d["root_seed"] = c.params.root_seed();
        d["tensors"] = tensors;
        return d;
      },
      py::arg("path"), "Tensors of a checkpoint keyed by parameter name.");

  m.def(
      "train",
      [](const ExperimentConfig& config, const std::filesystem::path& out) {
        TrainSummary s;
        {
          py::gil_scoped_release release;
          s = cmd_train(config, out);
        }
        py::dict d;
        d["checkpoints"] = s.checkpoints;
        d["train_eval"] = s.train_eval ? py::object(eval_dict(*s.train_eval)) : py::object(py::none());
        d["eval"] = s.eval ? py::object(eval_dict(*s.eval)) : py::object(py::none());
        return d;
      },
      py::arg("config"), py::arg("out"));

  m.def(
      "ablate",
      [](const ExperimentConfig& config, const std::filesystem::path& checkpoint, const std::filesystem::path& out,
         const std::optional<std::filesystem::path>& initial) {
        AblationResult r;
        {
          py::gil_scoped_release release;
          r = cmd_ablate(config, checkpoint, out, initial);
        }
        return ablation_dict(r);
      },
      py::arg("config"), py::arg("checkpoint"), py::arg("out"), py::arg("initial") = py::none());

  m.def(
      "churn",
      [](const ExperimentConfig& config, const std::filesystem::path& checkpoint, const std::filesystem::path& out,
         const std::optional<std::filesystem::path>& initial) {
        ChurnTable t;
        {
          py::gil_scoped_release release;
          t = cmd_churn(config, checkpoint, out, initial);
        }
        py::dict d;
        d["step"] = t.step;
        d["churn"] = churn_dict(t.churn);
        d["raw"] = churn_dict(t.raw);
        return d;
      },
      py::arg("config"), py::arg("checkpoint"), py::arg("out"), py::arg("initial") = py::none());

  m.def(
      "fl",
      [](const ExperimentConfig& config, const std::filesystem::path& out,
         const std::optional<std::filesystem::path>& checkpoint) {
        TransferResult r;
        {
          py::gil_scoped_release release;
          r = cmd_fl(config, checkpoint, out);
        }
        py::list rows;
        for (const TransferRow& row : r.rows) {
          py::dict d;
          d["schedule"] = row.schedule;
          d["params_dropped"] = row.params_dropped;
          d["eval_error"] = row.eval_error;
          d["seed"] = row.seed;
          rows.append(d);
        }
        return rows;
      },
      py::arg("config"), py::arg("out"), py::arg("checkpoint") = py::none());

  m.def(
      "report",
      [](const std::filesystem::path& dir, const std::filesystem::path& out) {
        py::list rows;
        for (const StabilityRow& r : cmd_report(dir, out)) {
          py::dict d;
          d["layer"] = r.layer;
          d["min"] = r.min;
          d["mean"] = r.mean;
          d["max"] = r.max;
          rows.append(d);
        }
        return rows;
      },
      py::arg("dir"), py::arg("out"));

  m.def("preset_names", &preset_names);
  m.def(
      "preset",
      [](const std::string& name, const std::filesystem::path& out, const ExperimentConfig& base, bool run) {
        const PresetBundle bundle = preset_experiments(name, base);
        if (run) {
          py::gil_scoped_release release;
          run_preset(bundle, out);
        } else {
          write_preset(bundle, out);
        }
        std::vector<std::string> names;
        for (const auto& [run_name, config] : bundle.runs) names.push_back(run_name);
        return names;
      },
      py::arg("name"), py::arg("out"), py::arg("base") = ExperimentConfig{}, py::arg("run") = false);
}
