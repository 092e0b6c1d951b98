#include "mbpb/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

#include "mbpb/text.hpp"

namespace mbpb {

namespace fs = std::filesystem;

// ---- names -----------------------------------------------------------------

std::string_view to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::kCaseStudy: return "case-study";
    case ExperimentKind::kGammaSweep: return "gamma-sweep";
    case ExperimentKind::kRctSizeSweep: return "rct-size-sweep";
    case ExperimentKind::kCsvRun: return "csv-run";
    case ExperimentKind::kVerify: return "verify";
  }
  return "unknown";
}

ExperimentKind parse_experiment_kind(std::string_view s) {
  for (auto k : {ExperimentKind::kCaseStudy, ExperimentKind::kGammaSweep, ExperimentKind::kRctSizeSweep,
                 ExperimentKind::kCsvRun, ExperimentKind::kVerify}) {
    if (s == to_string(k)) return k;
  }
  throw ConfigError("unknown experiment '" + std::string(s) + "'");
}

std::string_view to_string(RunMethod m) {
  switch (m) {
    case RunMethod::kBaseline: return "baseline";
    case RunMethod::kMB: return "MB";
    case RunMethod::kPB: return "PB";
    case RunMethod::kMBPB: return "MB+PB";
    case RunMethod::kObsOracle: return "Obs-Oracle";
    case RunMethod::kRctOracle: return "RCT-Oracle";
  }
  return "unknown";
}

RunMethod parse_run_method(std::string_view s) {
  for (auto m : {RunMethod::kBaseline, RunMethod::kMB, RunMethod::kPB, RunMethod::kMBPB, RunMethod::kObsOracle,
                 RunMethod::kRctOracle}) {
    if (s == to_string(m)) return m;
  }
  throw ConfigError("unknown method '" + std::string(s) + "'");
}

Method training_method(RunMethod m) {
  switch (m) {
    case RunMethod::kMB: return Method::kMB;
    case RunMethod::kPB: return Method::kPB;
    case RunMethod::kMBPB: return Method::kMBPB;
    default: return Method::kBaseline;
  }
}

// ---- config ----------------------------------------------------------------

namespace {

template <class T, class F>
std::string join(const std::vector<T>& values, F&& fmt) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ",";
    out += fmt(values[i]);
  }
  return out;
}

std::vector<std::string> list_items(const std::string& value) {
  std::vector<std::string> out;
  for (const auto& item : split(value, ',')) {
    const auto t = std::string(trim(item));
    if (!t.empty()) out.push_back(t);
  }
  return out;
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  const long long n = parse_int(v);
  if (n < 0) throw ConfigError(key + " must be non-negative");
  return static_cast<std::size_t>(n);
}

bool parse_flag(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": not a boolean: '" + v + "'");
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw ConfigError("seed list is empty");
  if (kind == ExperimentKind::kVerify) return;
  if (methods.empty()) throw ConfigError("method list is empty");
  if (kind == ExperimentKind::kGammaSweep && log_gammas.empty()) throw ConfigError("log_gammas grid is empty");
  if (kind == ExperimentKind::kRctSizeSweep && (rct_sizes.empty() || obs_sizes.empty())) {
    throw ConfigError("rct-size grid is empty");
  }
  for (double lg : log_gammas) {
    if (!(lg >= 0.0) || !std::isfinite(lg)) throw ConfigError("log_gammas must be finite and >= 0");
  }
  if (!(log_gamma >= 0.0)) throw ConfigError("log_gamma must be >= 0");
  if (kind != ExperimentKind::kCsvRun && n_obs < 2) throw ConfigError("n_obs must be at least 2");
  if (n_rct < 2) throw ConfigError("n_rct must be at least 2");
  if (!(treated_probability > 0.0 && treated_probability < 1.0)) {
    throw ConfigError("treated_probability must be in (0, 1)");
  }
  if (eval_size == 0) throw ConfigError("eval_size must be positive");
  if (lp_budget < 0) throw ConfigError("lp_budget must be >= 0");
  if (workers == 0) throw ConfigError("workers must be positive");
  if (!(heldout_fraction > 0.0 && heldout_fraction < 1.0)) throw ConfigError("heldout_fraction must be in (0, 1)");
  if (kind == ExperimentKind::kCsvRun) {
    if (csv_path.empty()) throw ConfigError("csv-run needs csv_path");
    if (split_column.empty() && rct_csv.empty()) throw ConfigError("csv-run needs split_column or rct_csv");
    if (!split_column.empty() && split_rule.empty()) throw ConfigError("split_column needs split_rule");
    for (auto m : methods) {
      if (m == RunMethod::kObsOracle || m == RunMethod::kRctOracle) {
        throw ConfigError("oracle methods need a synthetic source");
      }
    }
  }
  try {
    TrainConfig t = train;
    t.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

std::string config_to_text(const ExperimentConfig& c) {
  std::ostringstream out;
  auto kv = [&](const std::string& k, const std::string& v) { out << k << " = " << v << '\n'; };
  kv("experiment", std::string(to_string(c.kind)));
  kv("output_dir", c.output_dir);
  kv("seeds", join(c.seeds, [](auto s) { return std::to_string(s); }));
  kv("methods", join(c.methods, [](auto m) { return std::string(to_string(m)); }));
  kv("n_obs", std::to_string(c.n_obs));
  kv("n_rct", std::to_string(c.n_rct));
  kv("treated_probability", exact_double(c.treated_probability));
  kv("log_gammas", join(c.log_gammas, [](double v) { return exact_double(v); }));
  kv("rct_sizes", join(c.rct_sizes, [](auto v) { return std::to_string(v); }));
  kv("obs_sizes", join(c.obs_sizes, [](auto v) { return std::to_string(v); }));
  kv("log_gamma", exact_double(c.log_gamma));
  kv("obs_oracle_size", std::to_string(c.obs_oracle_size));
  kv("rct_oracle_size", std::to_string(c.rct_oracle_size));
  kv("eval_size", std::to_string(c.eval_size));
  kv("lp_budget", std::to_string(c.lp_budget));
  kv("figures", c.figures ? "true" : "false");
  kv("checkpoints", c.checkpoints ? "true" : "false");
  kv("workers", std::to_string(c.workers));
  kv("csv_path", c.csv_path);
  kv("rct_csv", c.rct_csv);
  kv("split_column", c.split_column);
  kv("split_rule", c.split_rule);
  kv("confounding_c", exact_double(c.confounding_c));
  kv("heldout_fraction", exact_double(c.heldout_fraction));
  for (const auto& [k, v] : config_entries(c.train)) {
    if (k != "method" && k != "seed") kv(k, v);
  }
  return out.str();
}

void apply_profile(ExperimentConfig& c, const std::string& name) {
  // split covariates follow the dataset descriptions; the split rule itself
  // is dataset specific and must be given explicitly
  if (name == "star") {
    c.confounding_c = 1.0;
    c.n_rct = 128;
    c.train.batch_size = 256;
    c.split_column = "birthday";
  } else if (name == "actg") {
    c.confounding_c = 0.0;
    c.n_rct = 50;
    c.train.batch_size = 200;
    c.split_column = "gender";
  } else if (name == "nsw") {
    c.confounding_c = 0.25;
    c.n_rct = 50;
    c.train.batch_size = 200;
    c.split_column = "age";
  } else {
    throw ConfigError("unknown profile '" + name + "' (expected star, actg or nsw)");
  }
  c.profile = name;
}

void apply_config_value(ExperimentConfig& c, const std::string& key, const std::string& value) {
  try {
    if (key == "experiment") c.kind = parse_experiment_kind(value);
    else if (key == "output_dir") c.output_dir = value;
    else if (key == "seeds") {
      c.seeds.clear();
      for (const auto& s : list_items(value)) {
        const long long v = parse_int(s);
        if (v < 0) throw ConfigError("seeds must be non-negative");
        c.seeds.push_back(static_cast<std::uint64_t>(v));
      }
    } else if (key == "methods") {
      c.methods.clear();
      for (const auto& s : list_items(value)) c.methods.push_back(parse_run_method(s));
    } else if (key == "n_obs") c.n_obs = parse_size(key, value);
    else if (key == "n_rct") c.n_rct = parse_size(key, value);
    else if (key == "treated_probability") c.treated_probability = parse_double(value);
    else if (key == "log_gammas") {
      c.log_gammas.clear();
      for (const auto& s : list_items(value)) c.log_gammas.push_back(parse_double(s));
    } else if (key == "rct_sizes") {
      c.rct_sizes.clear();
      for (const auto& s : list_items(value)) c.rct_sizes.push_back(parse_size(key, s));
    } else if (key == "obs_sizes") {
      c.obs_sizes.clear();
      for (const auto& s : list_items(value)) c.obs_sizes.push_back(parse_size(key, s));
    } else if (key == "log_gamma") c.log_gamma = parse_double(value);
    else if (key == "obs_oracle_size") c.obs_oracle_size = parse_size(key, value);
    else if (key == "rct_oracle_size") c.rct_oracle_size = parse_size(key, value);
    else if (key == "eval_size") c.eval_size = parse_size(key, value);
    else if (key == "lp_budget") c.lp_budget = static_cast<int>(parse_int(value));
    else if (key == "figures") c.figures = parse_flag(key, value);
    else if (key == "checkpoints") c.checkpoints = parse_flag(key, value);
    else if (key == "workers") c.workers = parse_size(key, value);
    else if (key == "csv_path") c.csv_path = value;
    else if (key == "rct_csv") c.rct_csv = value;
    else if (key == "split_column") c.split_column = value;
    else if (key == "split_rule") c.split_rule = value;
    else if (key == "confounding_c") c.confounding_c = parse_double(value);
    else if (key == "heldout_fraction") c.heldout_fraction = parse_double(value);
    else if (key == "profile") apply_profile(c, value);
    else if (key == "method" || key == "seed") {
      throw ConfigError("use '" + key + "s' (a list) in experiment configs");
    } else if (!apply_config_entry(c.train, key, value)) {
      throw ConfigError("unknown key '" + key + "'");
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

void apply_config_text(ExperimentConfig& c, const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    const std::string_view body = trim(std::string_view(line).substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key(trim(body.substr(0, eq)));
    const std::string value(trim(body.substr(eq + 1)));
    try {
      apply_config_value(c, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  ExperimentConfig c;
  apply_config_text(c, buf.str(), path);
  return c;
}

std::string resolve_output_dir(const ExperimentConfig& c) {
  const fs::path dir(c.output_dir);
  if (dir.is_absolute()) return dir.string();
  if (const char* root = std::getenv(kOutputRootEnv); root && *root) return (fs::path(root) / dir).string();
  return dir.string();
}

// ---- single runs -----------------------------------------------------------

namespace {

Assignment assignment_for(RunMethod m) {
  if (m == RunMethod::kObsOracle) return Assignment::kUnconfounded;
  if (m == RunMethod::kRctOracle) return Assignment::kRandomized;
  return Assignment::kConfounded;
}

std::pair<double, double> covariate_range(const Dgp& dgp) {
  if (dgp.kind == DgpKind::kCaseStudy) return {0.5, 1.5};
  return {-2.0, 2.0};
}

std::vector<double> column_values(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

RunResult execute_run(const RunSpec& spec, const ExperimentConfig& config) {
  const std::uint64_t code = fnv1a(spec.grid_label);
  const Dgp& dgp = spec.dgp;
  const TabularDataset obs = dgp.sample(spec.n_train, derive_seed(spec.seed, Stream::kData, code),
                                        assignment_for(spec.method));
  const RctOutcomes rct = gen_rct_outcomes(spec.n_rct, config.treated_probability, dgp,
                                           derive_seed(spec.seed, Stream::kRct, code));
  const TabularDataset heldout = dgp.sample(std::max<std::size_t>(2, spec.n_obs / 4),
                                            derive_seed(spec.seed, Stream::kHeldout, code));
  const Tensor eval_x = dgp.sample_covariates(config.eval_size, derive_seed(spec.seed, Stream::kEval, code));
  std::vector<double> truth(eval_x.rows());
  for (std::size_t i = 0; i < truth.size(); ++i) truth[i] = dgp.true_cate(eval_x[i]);

  TrainConfig tc = config.train;
  tc.method = training_method(spec.method);
  tc.seed = spec.seed;
  const TrainedModel model = train(obs, rct, tc);

  const std::uint64_t mc_seed = derive_seed(spec.seed, Stream::kInference, code);
  RunResult r;
  r.history = model.history;
  r.metrics.run_id = spec.run_id;
  r.metrics.method = std::string(to_string(spec.method));
  r.metrics.dgp = dgp.label();
  if (spec.log_gamma) r.metrics.gamma = std::exp(*spec.log_gamma);
  r.metrics.n_obs = spec.n_train;
  r.metrics.n_rct = spec.method == RunMethod::kBaseline || spec.method == RunMethod::kObsOracle ||
                            spec.method == RunMethod::kRctOracle
                        ? 0
                        : spec.n_rct;
  r.metrics.seed = spec.seed;
  r.metrics.sqrt_pehe = sqrt_pehe(model, eval_x, truth, tc.mc_samples, mc_seed);
  r.metrics.factual_mse = factual_error(model, heldout, tc.mc_samples, mc_seed);
  if (config.lp_budget > 0) {
    r.metrics.lp_diag = empirical_lp_diagnostic(model, obs, rct, config.lp_budget, mc_seed, tc.mc_samples).value;
  }

  const auto [lo, hi] = covariate_range(dgp);
  constexpr std::size_t kGrid = 41;
  Tensor grid(kGrid, 1);
  for (std::size_t i = 0; i < kGrid; ++i) grid[i] = lo + (hi - lo) * static_cast<double>(i) / (kGrid - 1);
  r.curve.x = column_values(grid);
  r.curve.y1 = column_values(predict_potential_outcomes(model, grid, 1, tc.mc_samples, mc_seed));
  r.curve.y0 = column_values(predict_potential_outcomes(model, grid, 0, tc.mc_samples, mc_seed));
  for (std::size_t i = 0; i < kGrid; ++i) r.curve.cate.push_back(r.curve.y1[i] - r.curve.y0[i]);

  if (config.checkpoints) {
    save_model((fs::path(resolve_output_dir(config)) / "runs" / spec.run_id / "model").string(), model);
  }
  return r;
}

namespace {

template <class F>
std::vector<RunResult> parallel_map(std::size_t n, std::size_t workers, F&& job) {
  std::vector<RunResult> results(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        results[i] = job(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t count = std::max<std::size_t>(1, std::min(workers, n));
  if (count == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < count; ++w) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return results;
}

}  // namespace

std::vector<RunResult> run_pool(const std::vector<RunSpec>& jobs, const ExperimentConfig& config,
                                std::size_t workers) {
  return parallel_map(jobs.size(), workers, [&](std::size_t i) { return execute_run(jobs[i], config); });
}

// ---- plans -----------------------------------------------------------------

namespace {

std::string seed_tag(std::uint64_t s) { return "s" + std::to_string(s); }

std::string gamma_tag(double lg) { return "lg" + exact_double(lg); }

}  // namespace

std::vector<RunSpec> plan_case_study(const ExperimentConfig& c) {
  std::vector<RunSpec> plan;
  for (auto seed : c.seeds) {
    for (auto m : c.methods) {
      RunSpec s;
      s.method = m;
      s.dgp = Dgp::case_study();
      s.n_obs = c.n_obs;
      s.n_rct = c.n_rct;
      s.n_train = m == RunMethod::kRctOracle ? (c.rct_oracle_size ? c.rct_oracle_size : c.n_obs + c.n_rct)
                  : m == RunMethod::kObsOracle ? (c.obs_oracle_size ? c.obs_oracle_size : c.n_obs)
                                               : c.n_obs;
      s.seed = seed;
      s.grid_label = "case-study";
      s.run_id = "case-study_" + std::string(to_string(m)) + "_" + seed_tag(seed);
      plan.push_back(std::move(s));
    }
  }
  return plan;
}

std::vector<RunSpec> plan_gamma_sweep(const ExperimentConfig& c) {
  std::vector<RunSpec> plan;
  for (double lg : c.log_gammas) {
    for (auto seed : c.seeds) {
      for (auto m : c.methods) {
        RunSpec s;
        s.method = m;
        s.dgp = Dgp::msm_with_gamma(std::exp(lg));
        s.log_gamma = lg;
        s.n_obs = c.n_obs;
        s.n_rct = c.n_rct;
        s.n_train = m == RunMethod::kRctOracle ? (c.rct_oracle_size ? c.rct_oracle_size : c.n_obs + c.n_rct)
                    : m == RunMethod::kObsOracle ? (c.obs_oracle_size ? c.obs_oracle_size : c.n_obs)
                                                 : c.n_obs;
        s.seed = seed;
        s.grid_label = gamma_tag(lg);
        s.run_id = "gamma-sweep_" + gamma_tag(lg) + "_" + std::string(to_string(m)) + "_" + seed_tag(seed);
        plan.push_back(std::move(s));
      }
    }
  }
  return plan;
}

std::vector<RunSpec> plan_rct_size_sweep(const ExperimentConfig& c) {
  std::vector<RunSpec> plan;
  for (std::size_t n_rct : c.rct_sizes) {
    for (std::size_t n_obs : c.obs_sizes) {
      for (auto seed : c.seeds) {
        for (auto m : c.methods) {
          RunSpec s;
          s.method = m;
          s.dgp = Dgp::msm_with_gamma(std::exp(c.log_gamma));
          s.log_gamma = c.log_gamma;
          s.n_obs = n_obs;
          s.n_rct = n_rct;
          // baseline and RCT-Oracle see as many rows as MB+PB sees in total
          const bool matched = m == RunMethod::kBaseline || m == RunMethod::kRctOracle;
          s.n_train = matched ? n_obs + n_rct
                      : m == RunMethod::kObsOracle ? (c.obs_oracle_size ? c.obs_oracle_size : n_obs)
                                                   : n_obs;
          if (m == RunMethod::kRctOracle && c.rct_oracle_size) s.n_train = c.rct_oracle_size;
          s.seed = seed;
          s.grid_label = "nobs" + std::to_string(n_obs) + "_nrct" + std::to_string(n_rct);
          s.run_id = "rct-size_" + s.grid_label + "_" + std::string(to_string(m)) + "_" + seed_tag(seed);
          plan.push_back(std::move(s));
        }
      }
    }
  }
  return plan;
}

ExperimentConfig single_run_config(const ExperimentConfig& c, const RunSpec& spec) {
  ExperimentConfig out = c;
  out.seeds = {spec.seed};
  out.methods = {spec.method};
  out.workers = 1;
  out.figures = false;
  // rerunning a run manifest must not overwrite the sweep's own outputs
  out.output_dir = (fs::path(c.output_dir) / "runs" / spec.run_id / "rerun").string();
  if (c.kind == ExperimentKind::kGammaSweep && spec.log_gamma) out.log_gammas = {*spec.log_gamma};
  if (c.kind == ExperimentKind::kRctSizeSweep) {
    out.rct_sizes = {spec.n_rct};
    out.obs_sizes = {spec.n_obs};
  }
  return out;
}

// ---- summaries -------------------------------------------------------------

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median of empty list");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

std::vector<SummaryRow> summarize(const std::vector<MetricsRecord>& records,
                                  const std::function<std::string(const MetricsRecord&)>& grid) {
  std::map<std::pair<std::string, std::string>, std::vector<double>> groups;
  for (const auto& r : records) {
    if (r.sqrt_pehe) groups[{grid(r), r.method}].push_back(*r.sqrt_pehe);
  }
  std::vector<SummaryRow> out;
  for (auto& [key, values] : groups) {
    // sorted copy: the statistics do not depend on completion order
    std::sort(values.begin(), values.end());
    SummaryRow row;
    row.grid = key.first;
    row.method = key.second;
    row.count = values.size();
    row.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    double ss = 0.0;
    for (double v : values) ss += (v - row.mean) * (v - row.mean);
    row.sd = values.size() > 1 ? std::sqrt(ss / static_cast<double>(values.size() - 1)) : 0.0;
    row.median = median(values);
    out.push_back(row);
  }
  return out;
}

namespace {

void write_summary(const std::string& path, const std::vector<SummaryRow>& rows, const std::string& grid_name) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << grid_name << ",method,count,mean,sd,median\n";
  for (const auto& r : rows) {
    out << r.grid << ',' << r.method << ',' << r.count << ',' << report_double(r.mean) << ','
        << report_double(r.sd) << ',' << report_double(r.median) << '\n';
  }
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

struct Outputs {
  std::string dir;
  std::vector<std::string> files;

  std::string path(const std::string& name) {
    const std::string p = (fs::path(dir) / name).string();
    files.push_back(p);
    return p;
  }
};

Outputs prepare_outputs(const ExperimentConfig& c) {
  Outputs o;
  o.dir = resolve_output_dir(c);
  fs::create_directories(o.dir);
  write_text(o.path("manifest.txt"), config_to_text(c));
  return o;
}

std::vector<MetricsRecord> finish_runs(const ExperimentConfig& c, const std::vector<RunSpec>& plan,
                                       const std::vector<RunResult>& results, Outputs& out) {
  std::vector<MetricsRecord> records;
  for (std::size_t i = 0; i < plan.size(); ++i) {
    records.push_back(results[i].metrics);
    const fs::path run_dir = fs::path(out.dir) / "runs" / plan[i].run_id;
    fs::create_directories(run_dir);
    write_text((run_dir / "manifest.txt").string(), config_to_text(single_run_config(c, plan[i])));
    write_loss_history((run_dir / "loss_history.csv").string(), results[i].history);
  }
  write_metrics_csv(out.path("metrics.csv"), records);
  return records;
}

const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

}  // namespace

// ---- experiments -----------------------------------------------------------

ExperimentResult run_case_study(const ExperimentConfig& config) {
  config.validate();
  Outputs out = prepare_outputs(config);
  const auto plan = plan_case_study(config);
  const auto results = run_pool(plan, config, config.workers);
  ExperimentResult r;
  r.records = finish_runs(config, plan, results, out);
  write_summary(out.path("summary.csv"),
                summarize(r.records, [](const MetricsRecord&) { return std::string("case-study"); }), "grid");

  if (config.figures && !results.empty()) {
    // curves of the first seed, one per method
    const Dgp dgp = Dgp::case_study();
    const auto& grid = results.front().curve.x;
    FigureSpec outcomes{"Potential outcomes, case study (seed " + std::to_string(config.seeds.front()) + ")", "x",
                        "E[Y_t | X = x]", {}};
    FigureSpec cate{"CATE, case study (seed " + std::to_string(config.seeds.front()) + ")", "x", "tau(x)", {}};
    Series t1{"truth y1", grid, {}, {}, false};
    Series t0{"truth y0", grid, {}, {}, false};
    Series tc{"truth", grid, {}, {}, false};
    for (double x : grid) {
      t1.y.push_back(dgp.conditional_mean(x, 1));
      t0.y.push_back(dgp.conditional_mean(x, 0));
      tc.y.push_back(dgp.true_cate(x));
    }
    outcomes.series = {t1, t0};
    cate.series = {tc};
    for (std::size_t i = 0; i < plan.size(); ++i) {
      if (plan[i].seed != config.seeds.front()) continue;
      const std::string name(to_string(plan[i].method));
      outcomes.series.push_back({name + " y1", grid, results[i].curve.y1, {}, false});
      outcomes.series.push_back({name + " y0", grid, results[i].curve.y0, {}, false});
      cate.series.push_back({name, grid, results[i].curve.cate, {}, false});
    }
    write_figure(out.path("fig_potential_outcomes.svg"), out.path("fig_potential_outcomes.csv"), outcomes);
    write_figure(out.path("fig_cate.svg"), out.path("fig_cate.csv"), cate);
  }
  r.output_dir = out.dir;
  r.files = out.files;
  return r;
}

ExperimentResult run_gamma_sweep(const ExperimentConfig& config) {
  config.validate();
  Outputs out = prepare_outputs(config);
  const auto plan = plan_gamma_sweep(config);
  const auto results = run_pool(plan, config, config.workers);
  ExperimentResult r;
  r.records = finish_runs(config, plan, results, out);
  auto grid = [](const MetricsRecord& m) { return exact_double(std::log(m.gamma.value_or(1.0))); };
  const auto summary = summarize(r.records, grid);
  write_summary(out.path("summary.csv"), summary, "log_gamma");

  if (config.figures) {
    FigureSpec fig{"sqrt(PEHE) vs confounding strength (mean +/- sd over seeds)", "log Gamma", "sqrt(PEHE)", {}};
    for (auto m : config.methods) {
      Series s{std::string(to_string(m)), {}, {}, {}, false};
      for (double lg : config.log_gammas) {
        for (const auto& row : summary) {
          if (row.method == s.name && parse_double(row.grid) == lg) {
            s.x.push_back(lg);
            s.y.push_back(row.mean);
            s.band.push_back(row.sd);
          }
        }
      }
      fig.series.push_back(std::move(s));
    }
    write_figure(out.path("fig_gamma_sweep.svg"), out.path("fig_gamma_sweep.csv"), fig);
  }
  r.output_dir = out.dir;
  r.files = out.files;
  return r;
}

ExperimentResult run_rct_size_sweep(const ExperimentConfig& config) {
  config.validate();
  Outputs out = prepare_outputs(config);
  const auto plan = plan_rct_size_sweep(config);
  const auto results = run_pool(plan, config, config.workers);
  ExperimentResult r;
  r.records = finish_runs(config, plan, results, out);

  // group by the nominal grid point, not the trained size
  std::map<std::string, std::string> grid_of;
  for (const auto& s : plan) grid_of[s.run_id] = s.grid_label;
  auto grid = [&](const MetricsRecord& m) { return grid_of.at(m.run_id); };
  const auto summary = summarize(r.records, grid);
  write_summary(out.path("summary.csv"), summary, "grid");

  if (config.figures) {
    for (std::size_t n_rct : config.rct_sizes) {
      FigureSpec fig{"sqrt(PEHE) with n_rct = " + std::to_string(n_rct) + " (mean +/- sd over seeds)",
                     "observational size", "sqrt(PEHE)", {}};
      for (auto m : config.methods) {
        Series s{std::string(to_string(m)), {}, {}, {}, false};
        for (std::size_t n_obs : config.obs_sizes) {
          const std::string label = "nobs" + std::to_string(n_obs) + "_nrct" + std::to_string(n_rct);
          for (const auto& row : summary) {
            if (row.method == s.name && row.grid == label) {
              s.x.push_back(static_cast<double>(n_obs));
              s.y.push_back(row.mean);
              s.band.push_back(row.sd);
            }
          }
        }
        fig.series.push_back(std::move(s));
      }
      const std::string stem = "fig_rct_size_" + std::to_string(n_rct);
      write_figure(out.path(stem + ".svg"), out.path(stem + ".csv"), fig);
    }
  }
  r.output_dir = out.dir;
  r.files = out.files;
  return r;
}

ExperimentResult run_csv(const ExperimentConfig& config) {
  config.validate();
  Outputs out = prepare_outputs(config);
  const TabularDataset data = load_csv(config.csv_path);
  const std::string label = "csv:" + fs::path(config.csv_path).stem().string();

  struct Prepared {
    TabularDataset train;
    TabularDataset heldout;
    RctOutcomes rct;
  };
  std::vector<Prepared> prepared;
  for (auto seed : config.seeds) {
    TabularDataset obs;
    RctOutcomes rct;
    if (!config.split_column.empty()) {
      RctSplit split = split_rct_by_covariate(data, config.split_column, CovariateRule::parse(config.split_rule),
                                              config.n_rct, derive_seed(seed, Stream::kRct));
      obs = std::move(split.observational);
      rct = std::move(split.rct);
    } else {
      obs = data;
      rct = load_rct_csv(config.rct_csv);
    }
    obs = inject_confounding(obs, config.confounding_c);

    std::vector<std::size_t> order(obs.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng = make_rng(seed, Stream::kHeldout);
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_held = static_cast<std::size_t>(std::llround(config.heldout_fraction * static_cast<double>(obs.size())));
    if (n_held == 0 || n_held >= obs.size()) throw DataError("held-out split leaves an empty side");
    std::vector<std::size_t> held(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_held));
    std::vector<std::size_t> rest(order.begin() + static_cast<std::ptrdiff_t>(n_held), order.end());
    std::sort(held.begin(), held.end());
    std::sort(rest.begin(), rest.end());
    Prepared p;
    p.train = obs.subset(rest);
    p.heldout = obs.subset(held);
    const auto cols = continuous_columns(p.train);
    if (!cols.empty()) {
      Standardizer s;
      p.train = standardize(p.train, cols, &s);
      p.heldout = s.apply(p.heldout);
    }
    p.rct = std::move(rct);
    prepared.push_back(std::move(p));
  }

  std::vector<std::pair<std::size_t, RunMethod>> jobs;
  for (std::size_t si = 0; si < config.seeds.size(); ++si) {
    for (auto m : config.methods) jobs.emplace_back(si, m);
  }
  const auto results = parallel_map(jobs.size(), config.workers, [&](std::size_t i) {
    const auto [si, m] = jobs[i];
    const Prepared& p = prepared[si];
    const std::uint64_t seed = config.seeds[si];
    TrainConfig tc = config.train;
    tc.method = training_method(m);
    tc.seed = seed;
    const TrainedModel model = train(p.train, p.rct, tc);
    const std::uint64_t mc_seed = derive_seed(seed, Stream::kInference);
    RunResult r;
    r.history = model.history;
    r.metrics.run_id = "csv-run_" + std::string(to_string(m)) + "_" + seed_tag(seed);
    r.metrics.method = std::string(to_string(m));
    r.metrics.dgp = label;
    r.metrics.n_obs = p.train.size();
    r.metrics.n_rct = m == RunMethod::kBaseline ? 0 : p.rct.size();
    r.metrics.seed = seed;
    r.metrics.factual_mse = factual_error(model, p.heldout, tc.mc_samples, mc_seed);
    if (p.heldout.oracle && !p.heldout.oracle->mean_y0.empty()) {
      std::vector<double> truth;
      for (std::size_t k = 0; k < p.heldout.size(); ++k) truth.push_back(p.heldout.oracle->true_cate(k));
      r.metrics.sqrt_pehe = sqrt_pehe(model, p.heldout.x, truth, tc.mc_samples, mc_seed);
    }
    if (config.lp_budget > 0) {
      r.metrics.lp_diag = empirical_lp_diagnostic(model, p.train, p.rct, config.lp_budget, mc_seed, tc.mc_samples).value;
    }
    if (config.checkpoints) save_model((fs::path(out.dir) / "runs" / r.metrics.run_id / "model").string(), model);
    return r;
  });

  ExperimentResult r;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    r.records.push_back(results[i].metrics);
    ExperimentConfig single = config;
    single.seeds = {config.seeds[jobs[i].first]};
    single.methods = {jobs[i].second};
    single.workers = 1;
    const fs::path run_dir = fs::path(out.dir) / "runs" / results[i].metrics.run_id;
    fs::create_directories(run_dir);
    write_text((run_dir / "manifest.txt").string(), config_to_text(single));
    write_loss_history((run_dir / "loss_history.csv").string(), results[i].history);
  }
  write_metrics_csv(out.path("metrics.csv"), r.records);
  write_summary(out.path("summary.csv"), summarize(r.records, [&](const MetricsRecord&) { return label; }), "grid");
  r.output_dir = out.dir;
  r.files = out.files;
  return r;
}

// ---- verify ----------------------------------------------------------------

bool VerifyReport::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.passed; });
}

std::string VerifyReport::to_text() const {
  std::ostringstream out;
  for (const auto& c : checks) {
    out << (c.passed ? "PASS " : "FAIL ") << c.name << " (" << report_double(c.seconds) << " s): " << c.detail
        << '\n';
  }
  const auto failed = std::count_if(checks.begin(), checks.end(), [](const auto& c) { return !c.passed; });
  out << (failed == 0 ? "all checks passed" : std::to_string(failed) + " check(s) failed") << '\n';
  return out.str();
}

namespace {

template <class F>
VerifyCheck timed_check(const std::string& name, F&& body) {
  VerifyCheck c;
  c.name = name;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    body(c);
  } catch (const std::exception& e) {
    c.passed = false;
    c.detail = std::string("error: ") + e.what();
  }
  c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return c;
}

}  // namespace

VerifyReport run_verify(const VerifyOptions& options) {
  VerifyReport report;

  report.checks.push_back(timed_check("gradient-suite", [&](VerifyCheck& c) {
    const auto g = gradient_check_suite(options.gradients);
    c.passed = g.passed();
    std::ostringstream d;
    d << g.cases.size() << " configurations, " << g.failures() << " failed";
    std::size_t shown = 0;
    for (const auto& k : g.cases) {
      if (k.passed || shown++ >= 5) continue;
      d << "; #" << k.index << " " << k.description << " error " << report_double(k.worst_error) << " > "
        << report_double(k.worst_allowed);
    }
    c.detail = d.str();
  }));

  report.checks.push_back(timed_check("mb-counterexample", [&](VerifyCheck& c) {
    const auto m = mb_counterexample_check();
    c.passed = m.passed;
    c.detail = "constructed pair feasible=" + std::string(m.constructed_feasible ? "yes" : "no") +
               " objective=" + m.constructed_objective + "; conditional means " + m.truth_conditional_mean +
               " objective treated=" + m.truth_objective_treated + " control=" + m.truth_objective_control;
  }));

  report.checks.push_back(timed_check("ideal-pb-oracle", [&](VerifyCheck& c) {
    Rng rng = make_rng(options.seed, Stream::kDiagnostic, 1);
    std::size_t bad = 0;
    double worst = 0.0;
    for (std::size_t i = 0; i < options.pb_oracle_instances; ++i) {
      const auto r = ideal_pb_oracle(random_instance(rng));
      worst = std::max(worst, r.max_abs_error);
      bad += r.passed() ? 0 : 1;
    }
    const auto bern = ideal_pb_oracle(bernoulli_counterexample_instance());
    bool bern_ok = bern.passed();
    for (int t : {0, 1}) {
      for (double z : bern.z[t]) bern_ok = bern_ok && std::fabs(z - 0.5) <= 1e-10;
    }
    InstanceOptions unconf;
    unconf.confounded = false;
    std::size_t unconf_bad = 0;
    for (int i = 0; i < 10; ++i) {
      const auto inst = random_instance(rng, unconf);
      const auto r = ideal_pb_oracle(inst);
      bool ok = r.passed();
      for (int t : {0, 1}) {
        for (std::size_t k = 0; k < inst.support_size(); ++k) ok = ok && std::fabs(r.z[t][k] - inst.arm_mean(t, k)) <= 1e-10;
      }
      unconf_bad += ok ? 0 : 1;
    }
    c.passed = bad == 0 && bern_ok && unconf_bad == 0;
    c.detail = std::to_string(options.pb_oracle_instances) + " random instances, " + std::to_string(bad) +
               " mismatched, worst error " + report_double(worst) + "; Bernoulli instance " +
               (bern_ok ? "1/2,1/2" : "wrong") + "; unconfounded instances mismatched " + std::to_string(unconf_bad);
  }));

  report.checks.push_back(timed_check("exact-pb-bound", [&](VerifyCheck& c) {
    Rng rng = make_rng(options.seed, Stream::kDiagnostic, 2);
    std::normal_distribution<double> normal(0.0, 3.0);
    std::size_t violations = 0;
    double min_slack = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < options.pb_bound_pairs; ++i) {
      const auto inst = random_instance(rng);
      const int t = static_cast<int>(i % 2);
      std::vector<double> z;
      for (std::size_t k = 0; k < inst.support_size(); ++k) {
        switch (i % 4) {
          case 0: z.push_back(inst.conditional_mean(t, k)); break;
          case 1: z.push_back(inst.marginal_mean(t)); break;
          case 2: z.push_back(inst.arm_mean(t, k)); break;
          default: z.push_back(normal(rng)); break;
        }
      }
      const auto b = exact_pb_bound_check(inst, t, z);
      violations += b.holds ? 0 : 1;
      min_slack = std::min(min_slack, b.slack);
    }
    c.passed = violations == 0;
    c.detail = std::to_string(options.pb_bound_pairs) + " pairs, " + std::to_string(violations) +
               " violations, smallest slack " + report_double(min_slack);
  }));
  return report;
}

int run_experiment(const ExperimentConfig& config, std::ostream& log) {
  if (config.kind == ExperimentKind::kVerify) {
    VerifyOptions opts;
    opts.seed = config.seeds.front();
    opts.gradients.seed = config.seeds.front();
    const auto report = run_verify(opts);
    log << report.to_text();
    return report.passed() ? 0 : 1;
  }
  ExperimentResult r;
  switch (config.kind) {
    case ExperimentKind::kCaseStudy: r = run_case_study(config); break;
    case ExperimentKind::kGammaSweep: r = run_gamma_sweep(config); break;
    case ExperimentKind::kRctSizeSweep: r = run_rct_size_sweep(config); break;
    default: r = run_csv(config); break;
  }
  log << metrics_csv_header() << '\n';
  for (const auto& m : r.records) log << metrics_csv_row(m) << '\n';
  log << "wrote " << r.files.size() << " files under " << r.output_dir << '\n';
  return 0;
}

// ---- figures ---------------------------------------------------------------

void FigureSpec::validate() const {
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw std::invalid_argument("series '" + s.name + "': x and y lengths differ");
    if (!s.band.empty() && s.band.size() != s.y.size()) {
      throw std::invalid_argument("series '" + s.name + "': band length differs");
    }
  }
}

namespace {

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace

std::string render_svg(const FigureSpec& fig) {
  fig.validate();
  constexpr double W = 720, H = 460, L = 70, R = 170, T = 40, B = 55;
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  for (const auto& s : fig.series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      const double b = s.band.empty() ? 0.0 : s.band[i];
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i] - b);
      ymax = std::max(ymax, s.y[i] + b);
    }
  }
  if (!std::isfinite(xmin)) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  if (xmax == xmin) xmin -= 0.5, xmax += 0.5;
  if (ymax == ymin) ymin -= 0.5, ymax += 0.5;
  const double pad = 0.05 * (ymax - ymin);
  ymin -= pad;
  ymax += pad;
  auto px = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - ymin) / (ymax - ymin) * (H - T - B); };

  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
      << ' ' << H << "\">\n";
  out << "<!-- data\n";
  for (const auto& s : fig.series) {
    out << "series \"" << s.name << "\" x,y" << (s.band.empty() ? "" : ",band") << ":";
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      out << ' ' << exact_double(s.x[i]) << ',' << exact_double(s.y[i]);
      if (!s.band.empty()) out << ',' << exact_double(s.band[i]);
    }
    out << '\n';
  }
  out << "-->\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">"
      << xml_escape(fig.title) << "</text>\n";
  out << "<g stroke=\"black\" fill=\"none\"><line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R
      << "\" y2=\"" << H - B << "\"/><line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B
      << "\"/></g>\n";
  out << "<g font-family=\"sans-serif\" font-size=\"11\">\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = xmin + (xmax - xmin) * i / 4.0;
    const double yv = ymin + (ymax - ymin) * i / 4.0;
    out << "<text x=\"" << fmt(px(xv)) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << report_double(std::round(xv * 1000) / 1000)
        << "</text>\n";
    out << "<text x=\"" << L - 6 << "\" y=\"" << fmt(py(yv) + 4) << "\" text-anchor=\"end\">" << report_double(std::round(yv * 1000) / 1000)
        << "</text>\n";
  }
  out << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << xml_escape(fig.x_label)
      << "</text>\n";
  out << "<text transform=\"translate(16," << (T + H - B) / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
      << xml_escape(fig.y_label) << "</text>\n</g>\n";

  for (std::size_t k = 0; k < fig.series.size(); ++k) {
    const auto& s = fig.series[k];
    const char* color = kPalette[k % (sizeof kPalette / sizeof kPalette[0])];
    if (!s.band.empty() && !s.x.empty()) {
      out << "<polygon fill=\"" << color << "\" fill-opacity=\"0.15\" stroke=\"none\" points=\"";
      for (std::size_t i = 0; i < s.x.size(); ++i) out << fmt(px(s.x[i])) << ',' << fmt(py(s.y[i] + s.band[i])) << ' ';
      for (std::size_t i = s.x.size(); i-- > 0;) out << fmt(px(s.x[i])) << ',' << fmt(py(s.y[i] - s.band[i])) << ' ';
      out << "\"/>\n";
    }
    if (s.points) {
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        out << "<circle cx=\"" << fmt(px(s.x[i])) << "\" cy=\"" << fmt(py(s.y[i])) << "\" r=\"2\" fill=\"" << color
            << "\"/>\n";
      }
    } else {
      out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
      for (std::size_t i = 0; i < s.x.size(); ++i) out << fmt(px(s.x[i])) << ',' << fmt(py(s.y[i])) << ' ';
      out << "\"/>\n";
    }
    const double ly = T + 14.0 * static_cast<double>(k);
    out << "<line x1=\"" << W - R + 10 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 30 << "\" y2=\"" << ly
        << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>";
    out << "<text x=\"" << W - R + 35 << "\" y=\"" << ly + 4 << "\" font-family=\"sans-serif\" font-size=\"11\">"
        << xml_escape(s.name) << "</text>\n";
  }
  out << "</svg>\n";
  return out.str();
}

void write_figure(const std::string& svg_path, const std::string& csv_path, const FigureSpec& figure) {
  write_text(svg_path, render_svg(figure));
  std::ostringstream csv;
  csv << "series,x,y,band\n";
  for (const auto& s : figure.series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      csv << s.name << ',' << exact_double(s.x[i]) << ',' << exact_double(s.y[i]) << ','
          << (s.band.empty() ? std::string("NA") : exact_double(s.band[i])) << '\n';
    }
  }
  write_text(csv_path, csv.str());
}

}  // namespace mbpb
