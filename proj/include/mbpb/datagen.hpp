#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mbpb/rng.hpp"
#include "mbpb/tensor.hpp"

namespace mbpb {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Ground truth carried by synthetic sources. `mean_y0` / `mean_y1` hold
/// E[Y_t | X = x_i]; the potential-outcome draws and `u` may be empty when
/// only the conditional means are known (e.g. ingested CSV oracle columns).
struct OracleBlock {
  std::vector<double> u;
  std::vector<double> y0;
  std::vector<double> y1;
  std::vector<double> mean_y0;
  std::vector<double> mean_y1;

  double true_cate(std::size_t row) const { return mean_y1[row] - mean_y0[row]; }
};

/// Observational triplets (x, t, y) with optional hidden ground truth.
struct TabularDataset {
  Tensor x;
  std::vector<int> t;
  std::vector<double> y;
  std::vector<std::string> covariate_names;
  std::optional<OracleBlock> oracle;

  std::size_t size() const { return y.size(); }
  std::size_t dim() const { return x.cols(); }
  std::size_t arm_size(int arm) const;
  /// Shape agreement, binary treatment, non-empty arms, oracle consistency.
  void validate() const;
  TabularDataset subset(const std::vector<std::size_t>& rows) const;
  Tensor t_column() const;
  Tensor y_column() const;
};

/// Outcome-only randomized sample, one list per arm.
struct RctOutcomes {
  std::vector<double> treated;
  std::vector<double> control;
  double treated_probability = 0.5;

  std::size_t size() const { return treated.size() + control.size(); }
  const std::vector<double>& arm(int t) const { return t == 1 ? treated : control; }
  void validate() const;
};

/// Marginal sensitivity model parameters for the synthetic process.
struct MsmParams {
  double gamma = 1.0;
  double slope = 0.75;
  double intercept = 0.5;
};

double logistic(double z);

/// e(x) = logistic(slope * x + intercept).
double nominal_propensity(double x, const MsmParams& params = {});

/// P(T = 1 | x, u) attaining the extremal MSM bounds: the inverse propensity
/// is alpha(x) for u = 1 and beta(x) for u = 0. Requires u in {0, 1}, gamma >= 1.
double complete_propensity(double x, int u, double gamma, const MsmParams& params = {});

/// How treatment is assigned when sampling a synthetic source.
enum class Assignment {
  kConfounded,    // the source's hidden-confounder propensity
  kUnconfounded,  // propensity with the hidden confounder's influence removed
  kRandomized,    // fair coin, independent of everything
};

enum class DgpKind { kCaseStudy, kMsm };

/// A synthetic data-generating process with closed-form conditional means.
struct Dgp {
  DgpKind kind = DgpKind::kCaseStudy;
  MsmParams msm;

  static Dgp case_study() { return {DgpKind::kCaseStudy, {}}; }
  static Dgp msm_with_gamma(double gamma);

  std::string label() const;
  std::size_t dim() const { return 1; }
  double conditional_mean(double x, int t) const;
  double true_cate(double x) const { return conditional_mean(x, 1) - conditional_mean(x, 0); }
  double sample_covariate(Rng& rng) const;
  /// Draw of Y_t from its marginal law (fresh X, U and noise).
  double sample_potential_outcome(int t, Rng& rng) const;

  TabularDataset sample(std::size_t n, std::uint64_t seed,
                        Assignment assignment = Assignment::kConfounded) const;
  /// i.i.d. covariate rows for PEHE evaluation, n x 1.
  Tensor sample_covariates(std::size_t n, std::uint64_t seed) const;
};

/// Linear-Gaussian case study: X ~ N(1, 0.04), U ~ N(0, 1),
/// P(T=1|X,U) = logistic(0.5X + 2U), Y1 = -3.5X + 3U, Y0 = 4.5X - 0.6U.
TabularDataset gen_case_study(std::size_t n, std::uint64_t seed);

/// MSM process: U ~ Bern(1/2), X ~ U[-2, 2], T ~ Bern(e(X, U)), nonlinear outcomes.
TabularDataset gen_msm(std::size_t n, double gamma, std::uint64_t seed);

enum class EmptyArmPolicy { kResample, kError };

/// Outcome-only RCT: each record lands in the treated arm with probability
/// `treated_probability` and carries a fresh draw of Y_t's marginal law.
RctOutcomes gen_rct_outcomes(std::size_t n_rct, double treated_probability, const Dgp& dgp,
                             std::uint64_t seed,
                             EmptyArmPolicy policy = EmptyArmPolicy::kResample);

/// Outcome-based selection: keeps controls with y < mean0 - c sd0 and treated
/// with y > mean1 + c sd1 (sample standard deviations).
TabularDataset inject_confounding(const TabularDataset& data, double c);

/// Row predicate on one covariate column.
struct CovariateRule {
  enum class Kind { kLess, kLessEqual, kGreater, kGreaterEqual, kEqual };
  Kind kind = Kind::kGreater;
  double threshold = 0.0;

  bool matches(double value) const;
  /// Parses "<0.5", "<=2", ">1", ">=3", "==1" (also "=1").
  static CovariateRule parse(const std::string& text);
};

struct RctSplit {
  RctOutcomes rct;
  TabularDataset observational;
  std::vector<std::size_t> rct_rows;
};

/// Draws `n_rct` rows uniformly among those matching the rule, keeps only
/// their (t, y) as the RCT, and returns every other row as observational data.
RctSplit split_rct_by_covariate(const TabularDataset& data, const std::string& column,
                                const CovariateRule& rule, std::size_t n_rct, std::uint64_t seed);

/// Column names that mark the optional oracle block in CSV files.
struct CsvSchema {
  std::string treatment = "t";
  std::string outcome = "y";
  std::string mean_y0 = "mu0";
  std::string mean_y1 = "mu1";
};

TabularDataset load_csv(const std::string& path, const CsvSchema& schema = {});
void save_csv(const std::string& path, const TabularDataset& data, const CsvSchema& schema = {});
RctOutcomes load_rct_csv(const std::string& path);
void save_rct_csv(const std::string& path, const RctOutcomes& rct);

/// Per-column affine standardization fitted on one split and reusable on others.
struct Standardizer {
  std::vector<std::size_t> columns;
  std::vector<double> mean;
  std::vector<double> sd;

  static Standardizer fit(const TabularDataset& data, const std::vector<std::size_t>& columns);
  TabularDataset apply(const TabularDataset& data) const;
};

TabularDataset standardize(const TabularDataset& data, const std::vector<std::size_t>& columns,
                           Standardizer* fitted = nullptr);

/// Indices of covariate columns whose values are not all in {0, 1}.
std::vector<std::size_t> continuous_columns(const TabularDataset& data);

}  // namespace mbpb
