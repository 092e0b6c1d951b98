#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mbpb/harness.hpp"

namespace py = pybind11;
using namespace mbpb;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  if (a.ndim() == 1) return Tensor::column(std::vector<double>(a.data(), a.data() + a.size()));
  if (a.ndim() != 2) throw ShapeError("expected a 1-d or 2-d array, got " + std::to_string(a.ndim()) + " dims");
  return Tensor(a.shape(0), a.shape(1), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array out({t.rows(), t.cols()});
  std::copy(t.data(), t.data() + t.size(), out.mutable_data());
  return out;
}

Array to_flat(const Tensor& t) {
  Array out(static_cast<py::ssize_t>(t.size()));
  std::copy(t.data(), t.data() + t.size(), out.mutable_data());
  return out;
}

py::dict record_dict(const MetricsRecord& r) {
  py::dict d;
  d["run_id"] = r.run_id;
  d["method"] = r.method;
  d["dgp"] = r.dgp;
  d["gamma"] = r.gamma;
  d["n_obs"] = r.n_obs;
  d["n_rct"] = r.n_rct;
  d["seed"] = r.seed;
  d["sqrt_pehe"] = r.sqrt_pehe;
  d["factual_mse"] = r.factual_mse;
  d["lp_diag"] = r.lp_diag;
  return d;
}

ExperimentConfig make_config(const std::string& kind, const py::dict& overrides) {
  ExperimentConfig c;
  c.kind = parse_experiment_kind(kind);
  for (const auto& [k, v] : overrides) {
    const auto key = py::str(k).cast<std::string>();
    std::string value;
    if (py::isinstance<py::list>(v) || py::isinstance<py::tuple>(v)) {
      for (const auto& item : v) value += (value.empty() ? "" : ",") + py::str(item).cast<std::string>();
    } else if (py::isinstance<py::bool_>(v)) {
      value = v.cast<bool>() ? "true" : "false";
    } else {
      value = py::str(v).cast<std::string>();
    }
    if (key == "output_dir") c.output_dir = value;
    else apply_config_value(c, key, value);
  }
  c.validate();
  return c;
}

}  // namespace

PYBIND11_MODULE(_mbpb, m) {
  m.doc() = "CATE estimation from confounded observational data and outcome-only RCT samples";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<TrainingError>(m, "TrainingError", PyExc_RuntimeError);
  py::register_exception<EvaluationError>(m, "EvaluationError", PyExc_RuntimeError);

  // ---- data ----
  py::class_<TabularDataset>(m, "Dataset")
      .def(py::init([](const Array& x, std::vector<int> t, std::vector<double> y) {
             TabularDataset d;
             d.x = to_tensor(x);
             d.t = std::move(t);
             d.y = std::move(y);
             d.validate();
             return d;
           }),
           py::arg("x"), py::arg("t"), py::arg("y"))
      .def_property_readonly("x", [](const TabularDataset& d) { return to_array(d.x); })
      .def_readonly("t", &TabularDataset::t)
      .def_readonly("y", &TabularDataset::y)
      .def_readonly("covariate_names", &TabularDataset::covariate_names)
      .def_property_readonly("has_oracle", [](const TabularDataset& d) { return d.oracle.has_value(); })
      .def("__len__", &TabularDataset::size)
      .def_property_readonly("dim", &TabularDataset::dim);

  py::class_<RctOutcomes>(m, "RctOutcomes")
      .def(py::init([](std::vector<double> treated, std::vector<double> control, double p) {
             RctOutcomes r{std::move(treated), std::move(control), p};
             r.validate();
             return r;
           }),
           py::arg("treated"), py::arg("control"), py::arg("treated_probability") = 0.5)
      .def_readonly("treated", &RctOutcomes::treated)
      .def_readonly("control", &RctOutcomes::control)
      .def_readonly("treated_probability", &RctOutcomes::treated_probability)
      .def("__len__", &RctOutcomes::size);

  py::class_<Dgp>(m, "Dgp")
      .def_static("case_study", &Dgp::case_study)
      .def_static("msm", &Dgp::msm_with_gamma, py::arg("gamma"))
      .def_property_readonly("label", &Dgp::label)
      .def("conditional_mean", &Dgp::conditional_mean, py::arg("x"), py::arg("t"))
      .def("true_cate", &Dgp::true_cate, py::arg("x"))
      .def(
          "sample",
          [](const Dgp& d, std::size_t n, std::uint64_t seed, const std::string& assignment) {
            Assignment a = Assignment::kConfounded;
            if (assignment == "unconfounded") a = Assignment::kUnconfounded;
            else if (assignment == "randomized") a = Assignment::kRandomized;
            else if (assignment != "confounded") throw ConfigError("unknown assignment '" + assignment + "'");
            return d.sample(n, seed, a);
          },
          py::arg("n"), py::arg("seed"), py::arg("assignment") = "confounded")
      .def(
          "rct",
          [](const Dgp& d, std::size_t n, std::uint64_t seed, double p) { return gen_rct_outcomes(n, p, d, seed); },
          py::arg("n"), py::arg("seed"), py::arg("treated_probability") = 0.5)
      .def(
          "sample_covariates",
          [](const Dgp& d, std::size_t n, std::uint64_t seed) {
            return to_flat(d.sample_covariates(n, seed));
          },
          py::arg("n"), py::arg("seed"));

  m.def("gen_case_study", &gen_case_study, py::arg("n"), py::arg("seed"));
  m.def("gen_msm", &gen_msm, py::arg("n"), py::arg("gamma"), py::arg("seed"));
  m.def("complete_propensity", [](double x, int u, double gamma) { return complete_propensity(x, u, gamma); },
        py::arg("x"), py::arg("u"), py::arg("gamma"));
  m.def("load_csv", [](const std::string& p) { return load_csv(p); }, py::arg("path"));
  m.def("inject_confounding", &inject_confounding, py::arg("data"), py::arg("c"));

  // ---- training ----
  py::class_<LossBreakdown>(m, "LossBreakdown")
      .def_readonly("factual", &LossBreakdown::factual)
      .def_readonly("marginal", &LossBreakdown::marginal)
      .def_readonly("projection", &LossBreakdown::projection)
      .def_readonly("alpha", &LossBreakdown::alpha)
      .def_property_readonly("total", &LossBreakdown::total);

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init([](const py::kwargs& kw) {
        TrainConfig c;
        for (const auto& [k, v] : kw) {
          const auto key = py::str(k).cast<std::string>();
          const auto value = py::isinstance<py::bool_>(v) ? std::string(v.cast<bool>() ? "true" : "false")
                                                           : py::str(v).cast<std::string>();
          if (key == "method") c.method = parse_method(value);
          else if (key == "seed") c.seed = v.cast<std::uint64_t>();
          else if (!apply_config_entry(c, key, value)) throw ConfigError("unknown training key '" + key + "'");
        }
        c.validate();
        return c;
      }))
      .def_property(
          "method", [](const TrainConfig& c) { return std::string(to_string(c.method)); },
          [](TrainConfig& c, const std::string& s) { c.method = parse_method(s); })
      .def_readwrite("epochs", &TrainConfig::epochs)
      .def_readwrite("learning_rate", &TrainConfig::learning_rate)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("mc_samples", &TrainConfig::mc_samples)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("fixed_noise", &TrainConfig::fixed_noise)
      .def("entries", &config_entries);

  py::class_<TrainedModel>(m, "TrainedModel")
      .def_readonly("history", &TrainedModel::history)
      .def_readonly("config", &TrainedModel::config)
      .def(
          "predict_cate",
          [](const TrainedModel& model, const Array& x, std::size_t mc, std::uint64_t seed) {
            return to_flat(predict_cate(model, to_tensor(x), mc, seed));
          },
          py::arg("x"), py::arg("mc_samples") = 100, py::arg("seed") = 0)
      .def(
          "predict_outcome",
          [](const TrainedModel& model, const Array& x, int t, std::size_t mc, std::uint64_t seed) {
            return to_flat(predict_potential_outcomes(model, to_tensor(x), t, mc, seed));
          },
          py::arg("x"), py::arg("t"), py::arg("mc_samples") = 100, py::arg("seed") = 0)
      .def("save", [](const TrainedModel& model, const std::string& dir) { save_model(dir, model); });

  m.def("load_model", &load_model, py::arg("dir"));
  m.def(
      "train",
      [](const TabularDataset& obs, const RctOutcomes& rct, const TrainConfig& config,
         const std::optional<std::function<void(int, const LossBreakdown&)>>& on_epoch) {
        if (!on_epoch) {
          py::gil_scoped_release release;
          return train(obs, rct, config);
        }
        return train(obs, rct, config, *on_epoch);
      },
      py::arg("obs"), py::arg("rct"), py::arg("config"), py::arg("on_epoch") = py::none());

  // ---- evaluation ----
  m.def("sqrt_pehe", py::overload_cast<const std::vector<double>&, const std::vector<double>&>(&sqrt_pehe),
        py::arg("estimate"), py::arg("truth"));
  m.def(
      "gradient_check",
      [](std::size_t configurations, std::uint64_t seed) {
        GradientCheckOptions o;
        o.configurations = configurations;
        o.seed = seed;
        const auto r = gradient_check_suite(o);
        py::list cases;
        for (const auto& c : r.cases) {
          py::dict d;
          d["description"] = c.description;
          d["worst_error"] = c.worst_error;
          d["worst_allowed"] = c.worst_allowed;
          d["passed"] = c.passed;
          cases.append(d);
        }
        return cases;
      },
      py::arg("configurations") = 100, py::arg("seed") = 0);
  m.def("mb_counterexample", [] {
    const auto r = mb_counterexample_check();
    py::dict d;
    d["constructed_objective"] = r.constructed_objective;
    d["truth_objective_treated"] = r.truth_objective_treated;
    d["truth_objective_control"] = r.truth_objective_control;
    d["passed"] = r.passed;
    return d;
  });
  m.def("verify", [] {
    VerifyReport r;
    {
      py::gil_scoped_release release;
      r = run_verify();
    }
    py::dict d;
    for (const auto& c : r.checks) d[py::str(c.name)] = py::make_tuple(c.passed, c.detail);
    return d;
  });

  // ---- experiments ----
  m.def(
      "config_text",
      [](const std::string& kind, const py::dict& overrides) { return config_to_text(make_config(kind, overrides)); },
      py::arg("kind"), py::arg("overrides") = py::dict());
  m.def(
      "run_experiment",
      [](const std::string& kind, const py::dict& overrides) {
        const ExperimentConfig c = make_config(kind, overrides);
        ExperimentResult r;
        {
          py::gil_scoped_release release;
          switch (c.kind) {
            case ExperimentKind::kCaseStudy: r = run_case_study(c); break;
            case ExperimentKind::kGammaSweep: r = run_gamma_sweep(c); break;
            case ExperimentKind::kRctSizeSweep: r = run_rct_size_sweep(c); break;
            case ExperimentKind::kCsvRun: r = run_csv(c); break;
            case ExperimentKind::kVerify: throw ConfigError("use verify() for the verification checks");
          }
        }
        py::list records;
        for (const auto& rec : r.records) records.append(record_dict(rec));
        py::dict out;
        out["records"] = records;
        out["output_dir"] = r.output_dir;
        out["files"] = r.files;
        return out;
      },
      py::arg("kind"), py::arg("overrides") = py::dict(),
      "Runs an experiment; overrides use the config-file keys plus output_dir.");
}
