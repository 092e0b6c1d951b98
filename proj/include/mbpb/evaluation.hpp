#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mbpb/datagen.hpp"
#include "mbpb/rng.hpp"
#include "mbpb/trainer.hpp"

namespace mbpb {

class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One row of the metrics CSV.
struct MetricsRecord {
  std::string run_id;
  std::string method;
  std::string dgp;
  std::optional<double> gamma;
  std::size_t n_obs = 0;
  std::size_t n_rct = 0;
  std::uint64_t seed = 0;
  std::optional<double> sqrt_pehe;
  double factual_mse = 0.0;
  std::optional<double> lp_diag;
};

/// Column header of the metrics CSV (no trailing newline).
std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRecord& r);
void write_metrics_csv(const std::string& path, const std::vector<MetricsRecord>& records);
std::vector<MetricsRecord> read_metrics_csv(const std::string& path);

/// sqrt(mean (estimate - truth)^2). Throws EvaluationError on empty or
/// mismatched inputs.
double sqrt_pehe(const std::vector<double>& estimate, const std::vector<double>& truth);
double sqrt_pehe(const TrainedModel& model, const Tensor& eval_x, const std::vector<double>& true_cate,
                 std::size_t mc_samples, std::uint64_t seed);

/// Mean squared error of t * y1_hat + (1 - t) * y0_hat against y.
double factual_error(const std::vector<double>& y1_hat, const std::vector<double>& y0_hat,
                     const std::vector<int>& t, const std::vector<double>& y);
double factual_error(const TrainedModel& model, const TabularDataset& heldout, std::size_t mc_samples,
                     std::uint64_t seed);

/// Fully tabulated joint law of (X, U, T, Y0, Y1) with finite supports:
/// X on `x_values` with probabilities `p_x`, U | X on `u_levels` levels,
/// T | X, U Bernoulli(`propensity`), and Y_t | X, U a finite list of
/// (value, probability) atoms. Y_t is independent of T given (X, U).
struct DiscreteInstance {
  struct Atom {
    double value = 0.0;
    double prob = 0.0;
  };

  std::vector<double> x_values;
  std::vector<double> p_x;
  std::size_t u_levels = 1;
  /// Row-major K x u_levels.
  std::vector<double> p_u_given_x;
  std::vector<double> propensity;
  /// outcomes[t][k * u_levels + u]
  std::vector<std::vector<Atom>> outcomes[2];

  std::size_t support_size() const { return x_values.size(); }
  /// Throws EvaluationError on malformed tables or positivity violations,
  /// i.e. P(T = t | X = x) = 0 for some support point.
  void validate() const;
  double cell_mean(int t, std::size_t k, std::size_t u) const;
  /// E[Y_t | X = x_k].
  double conditional_mean(int t, std::size_t k) const;
  /// E[Y | X = x_k, T = t].
  double arm_mean(int t, std::size_t k) const;
  double treated_share(std::size_t k) const;
  double marginal_mean(int t) const;
  double marginal_variance(int t) const;
};

struct InstanceOptions {
  std::size_t max_support = 8;
  std::size_t max_u_levels = 3;
  std::size_t max_atoms = 3;
  /// Propensities drawn from [floor, 1 - floor].
  double propensity_floor = 0.05;
  bool confounded = true;
};

DiscreteInstance random_instance(Rng& rng, const InstanceOptions& options = {});
/// X ~ Ber(1/2), T ~ Ber(1/2) independent, Y0 = Y1 = (1 - T) X + T (1 - X),
/// with U = T carrying the dependence on treatment.
DiscreteInstance bernoulli_counterexample_instance();

struct PbOracleResult {
  /// Minimizer values z[t][k].
  std::vector<double> z[2];
  std::vector<double> truth[2];
  double max_abs_error = 0.0;
  std::size_t constraint_rank = 0;
  std::size_t null_space_dim = 0;
  /// Smallest eigenvalue of the Hessian on the constraint null space
  /// (+inf when the null space is trivial) and of the full Hessian.
  double reduced_min_eigenvalue = 0.0;
  double hessian_min_eigenvalue = 0.0;
  bool unique = false;
  bool matches = false;
  bool passed() const { return unique && matches; }
};

/// Solves min E[(Z_T - Y)^2] s.t. E[Z_t g(X)] = E[Y_t g(X)] for the indicator
/// critics g = 1{X = x_k}, exactly in KKT form, and compares the minimizer
/// to the tabulated E[Y_t | X].
PbOracleResult ideal_pb_oracle(const DiscreteInstance& instance, double tolerance = 1e-10);

struct MbCounterexampleResult {
  bool constructed_feasible = false;
  std::string constructed_objective;
  std::string truth_objective_treated;
  std::string truth_objective_control;
  std::string truth_conditional_mean;
  bool passed = false;
};

/// Exact rational verification of the marginal-balancing non-uniqueness example.
MbCounterexampleResult mb_counterexample_check();

struct PbBoundResult {
  double lhs = 0.0;       // E|Z_t - E[Y_t|X]|
  double lp = 0.0;        // closed-form L_p(Z_t)
  double sd = 0.0;        // sd(Y_t)
  double slack = 0.0;     // lp + sd - lhs
  bool holds = false;     // decided in exact arithmetic
};

/// `z` holds Z_t(x_k) per support point.
PbBoundResult exact_pb_bound_check(const DiscreteInstance& instance, int t, const std::vector<double>& z);

struct LpDiagnostic {
  /// Best gap found after each critic step, summed over arms; non-decreasing.
  std::vector<double> trace;
  double value = 0.0;
};

/// Trains a fresh projection critic per arm for `budget` steps to maximize
/// |mean_i g(x_i) (Z_t(x_i) - mean y'_t)|. A lower bound on L_p.
LpDiagnostic empirical_lp_diagnostic(const TrainedModel& model, const TabularDataset& obs,
                                     const RctOutcomes& rct, int budget, std::uint64_t seed,
                                     std::size_t mc_samples = 100, double learning_rate = 0.01);

/// Analytic-vs-central-difference comparison over random configurations.
struct GradientCheckOptions {
  std::size_t configurations = 100;
  double step = 1e-5;
  double relative_tolerance = 1e-4;
  double absolute_tolerance = 1e-7;
  std::uint64_t seed = 0;
  /// Applied to the analytic gradients before comparison; test hook.
  std::function<void(std::size_t config, std::vector<Tensor>& grads)> fault;
};

struct GradientCheckCase {
  std::size_t index = 0;
  std::string description;
  std::size_t entries = 0;
  double worst_error = 0.0;
  double worst_allowed = 0.0;
  bool passed = true;
};

struct GradientCheckReport {
  std::vector<GradientCheckCase> cases;
  std::size_t failures() const;
  bool passed() const { return failures() == 0; }
};

GradientCheckReport gradient_check_suite(const GradientCheckOptions& options = {});

}  // namespace mbpb
