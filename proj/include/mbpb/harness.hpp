#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mbpb/evaluation.hpp"
#include "mbpb/trainer.hpp"

namespace mbpb {

/// Bad configuration: unknown key, malformed value, inconsistent settings.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ExperimentKind { kCaseStudy, kGammaSweep, kRctSizeSweep, kCsvRun, kVerify };

std::string_view to_string(ExperimentKind k);
ExperimentKind parse_experiment_kind(std::string_view s);

/// Methods a harness run can train. The two oracles are factual learners fit
/// on privileged data (unconfounded observational / randomized with covariates).
enum class RunMethod { kBaseline, kMB, kPB, kMBPB, kObsOracle, kRctOracle };

std::string_view to_string(RunMethod m);
RunMethod parse_run_method(std::string_view s);
Method training_method(RunMethod m);

/// Name of the environment variable that, when set, overrides the root under
/// which relative output directories are created.
inline constexpr const char* kOutputRootEnv = "MBPB_OUTPUT_ROOT";

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::kCaseStudy;
  std::string output_dir = "results";
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  std::vector<RunMethod> methods = {RunMethod::kBaseline, RunMethod::kMB, RunMethod::kPB, RunMethod::kMBPB};

  // synthetic sources
  std::size_t n_obs = 1000;
  std::size_t n_rct = 100;
  double treated_probability = 0.5;
  std::vector<double> log_gammas = {0, 1, 2, 3, 4, 5};
  std::vector<std::size_t> rct_sizes = {25, 50, 100};
  std::vector<std::size_t> obs_sizes = {1000};
  /// Used for the rct-size sweep's Obs-Oracle and any single-gamma MSM run.
  double log_gamma = 3.0;
  /// 0 means "default rule" (n_obs for Obs-Oracle, n_obs + n_rct for RCT-Oracle).
  std::size_t obs_oracle_size = 0;
  std::size_t rct_oracle_size = 0;

  // evaluation
  std::size_t eval_size = 2000;
  int lp_budget = 0;
  bool figures = true;
  bool checkpoints = false;
  std::size_t workers = 1;

  // csv-run
  std::string csv_path;
  std::string rct_csv;
  std::string split_column;
  std::string split_rule;
  double confounding_c = 0.0;
  double heldout_fraction = 0.2;
  std::string profile;

  TrainConfig train;

  /// Throws ConfigError.
  void validate() const;
};

/// `key = value` lines; '#' starts a comment. Keys appear in a fixed order.
std::string config_to_text(const ExperimentConfig& config);
/// Applies one key. Throws ConfigError on unknown keys or bad values.
void apply_config_value(ExperimentConfig& config, const std::string& key, const std::string& value);
/// Parses a key-value text. Later keys override earlier ones.
void apply_config_text(ExperimentConfig& config, const std::string& text, const std::string& origin = "config");
ExperimentConfig load_config_file(const std::string& path);
/// Dataset profile defaults for csv runs: star, actg, nsw.
void apply_profile(ExperimentConfig& config, const std::string& name);
/// Output directory after applying the output-root environment variable.
std::string resolve_output_dir(const ExperimentConfig& config);

/// One fully specified training run.
struct RunSpec {
  std::string run_id;
  RunMethod method = RunMethod::kMBPB;
  Dgp dgp;
  std::optional<double> log_gamma;
  std::size_t n_obs = 0;    // nominal observational size of the grid point
  std::size_t n_rct = 0;
  std::size_t n_train = 0;  // rows actually trained on
  std::uint64_t seed = 0;
  /// Grid-point label; data seeds derive from (seed, label) so every method
  /// at a grid point sees the same draws.
  std::string grid_label;
};

/// Predictions on a covariate grid, for figures.
struct CurveData {
  std::vector<double> x;
  std::vector<double> y1;
  std::vector<double> y0;
  std::vector<double> cate;
};

struct RunResult {
  MetricsRecord metrics;
  CurveData curve;
  std::vector<LossBreakdown> history;
};

/// Single-threaded execution of one synthetic run.
RunResult execute_run(const RunSpec& spec, const ExperimentConfig& config);

/// Runs `jobs` on up to `workers` threads. Results come back in job order
/// regardless of completion order; the first failing job (by index) rethrows.
std::vector<RunResult> run_pool(const std::vector<RunSpec>& jobs, const ExperimentConfig& config,
                                std::size_t workers);

struct ExperimentResult {
  std::vector<MetricsRecord> records;
  std::string output_dir;
  std::vector<std::string> files;
};

/// Run plans, exposed for inspection and for per-run manifests.
std::vector<RunSpec> plan_case_study(const ExperimentConfig& config);
std::vector<RunSpec> plan_gamma_sweep(const ExperimentConfig& config);
std::vector<RunSpec> plan_rct_size_sweep(const ExperimentConfig& config);

/// Config that reproduces exactly one run of `config`.
ExperimentConfig single_run_config(const ExperimentConfig& config, const RunSpec& spec);

ExperimentResult run_case_study(const ExperimentConfig& config);
ExperimentResult run_gamma_sweep(const ExperimentConfig& config);
ExperimentResult run_rct_size_sweep(const ExperimentConfig& config);
ExperimentResult run_csv(const ExperimentConfig& config);

struct VerifyCheck {
  std::string name;
  bool passed = false;
  double seconds = 0.0;
  std::string detail;
};

struct VerifyReport {
  std::vector<VerifyCheck> checks;
  bool passed() const;
  std::string to_text() const;
};

struct VerifyOptions {
  GradientCheckOptions gradients;
  std::size_t pb_oracle_instances = 50;
  std::size_t pb_bound_pairs = 1000;
  std::uint64_t seed = 0;
};

VerifyReport run_verify(const VerifyOptions& options = {});

/// Dispatches on config.kind. Returns the process exit code: 0 success,
/// 1 check failure (verify).
int run_experiment(const ExperimentConfig& config, std::ostream& log);

// ---- figures -------------------------------------------------------------

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
  /// Optional band half-width; empty or same length as y.
  std::vector<double> band;
  bool points = false;
};

struct FigureSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;

  /// Throws std::invalid_argument when series lengths disagree.
  void validate() const;
};

/// SVG with each series' numbers repeated in a comment block.
std::string render_svg(const FigureSpec& figure);
void write_figure(const std::string& svg_path, const std::string& csv_path, const FigureSpec& figure);

/// Group statistics of sqrt_pehe over seeds.
struct SummaryRow {
  std::string method;
  std::string grid;
  std::size_t count = 0;
  double mean = 0.0;
  double sd = 0.0;
  double median = 0.0;
};

std::vector<SummaryRow> summarize(const std::vector<MetricsRecord>& records,
                                  const std::function<std::string(const MetricsRecord&)>& grid);
double median(std::vector<double> values);

}  // namespace mbpb
