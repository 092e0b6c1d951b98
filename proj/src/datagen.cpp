#include "mbpb/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "mbpb/text.hpp"

namespace mbpb {

namespace {

std::pair<double, double> mean_and_sd(const std::vector<double>& v) {
  const double n = static_cast<double>(v.size());
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double ss = 0.0;
  for (double e : v) ss += (e - mean) * (e - mean);
  return {mean, v.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0};
}

struct CaseStudyDraw {
  double x, u, y0, y1, propensity;
};

CaseStudyDraw draw_case_study(Rng& rng, Assignment assignment) {
  std::normal_distribution<double> normal(0.0, 1.0);
  CaseStudyDraw d{};
  d.x = 1.0 + 0.2 * normal(rng);
  d.u = normal(rng);
  d.y1 = -3.5 * d.x + 3.0 * d.u;
  d.y0 = 4.5 * d.x - 0.6 * d.u;
  switch (assignment) {
    case Assignment::kConfounded: d.propensity = logistic(0.5 * d.x + 2.0 * d.u); break;
    case Assignment::kUnconfounded: d.propensity = logistic(0.5 * d.x); break;
    case Assignment::kRandomized: d.propensity = 0.5; break;
  }
  return d;
}

double msm_outcome(double x, int u, int t, double noise) {
  const double s = 2.0 * t - 1.0;
  return s * x + 2.0 * s - 2.0 * std::sin(2.0 * s * x) - 2.0 * (2.0 * u - 1.0) * (1.0 + 0.5 * x) +
         noise;
}

struct MsmDraw {
  double x;
  int u;
  double y0, y1, propensity;
};

MsmDraw draw_msm(Rng& rng, const MsmParams& params, Assignment assignment) {
  std::uniform_real_distribution<double> unif(-2.0, 2.0);
  std::bernoulli_distribution coin(0.5);
  std::normal_distribution<double> normal(0.0, 1.0);
  MsmDraw d{};
  d.u = coin(rng) ? 1 : 0;
  d.x = unif(rng);
  d.y0 = msm_outcome(d.x, d.u, 0, normal(rng));
  d.y1 = msm_outcome(d.x, d.u, 1, normal(rng));
  switch (assignment) {
    case Assignment::kConfounded: d.propensity = complete_propensity(d.x, d.u, params.gamma, params); break;
    case Assignment::kUnconfounded: d.propensity = nominal_propensity(d.x, params); break;
    case Assignment::kRandomized: d.propensity = 0.5; break;
  }
  return d;
}

void require_rows(std::size_t n, const char* what) {
  if (n < 2) throw DataError(std::string(what) + ": need at least 2 rows, got " + std::to_string(n));
}

}  // namespace

std::size_t TabularDataset::arm_size(int arm) const {
  return static_cast<std::size_t>(std::count(t.begin(), t.end(), arm));
}

void TabularDataset::validate() const {
  const std::size_t n = y.size();
  if (x.rows() != n || t.size() != n) {
    throw DataError("dataset: x has " + std::to_string(x.rows()) + " rows, t " +
                    std::to_string(t.size()) + ", y " + std::to_string(n));
  }
  if (!covariate_names.empty() && covariate_names.size() != x.cols()) {
    throw DataError("dataset: covariate name count does not match column count");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (t[i] != 0 && t[i] != 1) throw DataError("dataset: non-binary treatment at row " + std::to_string(i));
  }
  if (arm_size(0) == 0) throw DataError("dataset: control arm is empty");
  if (arm_size(1) == 0) throw DataError("dataset: treated arm is empty");
  if (!x.all_finite() || !std::all_of(y.begin(), y.end(), [](double v) { return std::isfinite(v); })) {
    throw DataError("dataset: non-finite values");
  }
  if (oracle) {
    if (oracle->mean_y0.size() != n || oracle->mean_y1.size() != n) {
      throw DataError("dataset: oracle conditional means do not match row count");
    }
    if (!oracle->y0.empty()) {
      if (oracle->y0.size() != n || oracle->y1.size() != n) {
        throw DataError("dataset: oracle potential outcomes do not match row count");
      }
      for (std::size_t i = 0; i < n; ++i) {
        const double expected = t[i] == 1 ? oracle->y1[i] : oracle->y0[i];
        if (expected != y[i]) {
          throw DataError("dataset: consistency Y = T Y1 + (1-T) Y0 violated at row " + std::to_string(i));
        }
      }
    }
  }
}

TabularDataset TabularDataset::subset(const std::vector<std::size_t>& rows) const {
  TabularDataset out;
  out.x = x.gather_rows(rows);
  out.covariate_names = covariate_names;
  out.t.reserve(rows.size());
  out.y.reserve(rows.size());
  for (std::size_t r : rows) {
    out.t.push_back(t.at(r));
    out.y.push_back(y.at(r));
  }
  if (oracle) {
    OracleBlock o;
    auto pick = [&rows](const std::vector<double>& src, std::vector<double>& dst) {
      if (src.empty()) return;
      for (std::size_t r : rows) dst.push_back(src[r]);
    };
    pick(oracle->u, o.u);
    pick(oracle->y0, o.y0);
    pick(oracle->y1, o.y1);
    pick(oracle->mean_y0, o.mean_y0);
    pick(oracle->mean_y1, o.mean_y1);
    out.oracle = std::move(o);
  }
  return out;
}

Tensor TabularDataset::t_column() const {
  Tensor out(t.size(), 1);
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = t[i];
  return out;
}

Tensor TabularDataset::y_column() const { return Tensor::column(y); }

void RctOutcomes::validate() const {
  if (treated.empty()) throw DataError("rct: treated arm is empty");
  if (control.empty()) throw DataError("rct: control arm is empty");
  auto finite = [](const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double e) { return std::isfinite(e); });
  };
  if (!finite(treated) || !finite(control)) throw DataError("rct: non-finite outcome");
  if (!(treated_probability > 0.0 && treated_probability < 1.0)) {
    throw DataError("rct: treated-arm probability must lie in (0, 1)");
  }
}

double logistic(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double nominal_propensity(double x, const MsmParams& params) {
  return logistic(params.slope * x + params.intercept);
}

double complete_propensity(double x, int u, double gamma, const MsmParams& params) {
  if (!(gamma >= 1.0)) throw std::invalid_argument("complete_propensity: gamma must be >= 1");
  if (u != 0 && u != 1) throw std::invalid_argument("complete_propensity: u must be 0 or 1");
  const double e = nominal_propensity(x, params);
  // 1/e - 1 is the nominal odds against treatment; the bounds scale it by 1/gamma or gamma.
  const double against = (1.0 - e) / e;
  const double inverse = u == 1 ? 1.0 + against / gamma : 1.0 + gamma * against;
  return 1.0 / inverse;
}

Dgp Dgp::msm_with_gamma(double gamma) {
  if (!(gamma >= 1.0)) throw std::invalid_argument("msm: gamma must be >= 1");
  Dgp dgp{DgpKind::kMsm, {}};
  dgp.msm.gamma = gamma;
  return dgp;
}

std::string Dgp::label() const {
  return kind == DgpKind::kCaseStudy ? "case-study" : "msm";
}

double Dgp::conditional_mean(double x, int t) const {
  if (kind == DgpKind::kCaseStudy) return t == 1 ? -3.5 * x : 4.5 * x;
  const double s = 2.0 * t - 1.0;
  return s * x + 2.0 * s - 2.0 * std::sin(2.0 * s * x);
}

double Dgp::sample_covariate(Rng& rng) const {
  if (kind == DgpKind::kCaseStudy) {
    std::normal_distribution<double> normal(1.0, 0.2);
    return normal(rng);
  }
  std::uniform_real_distribution<double> unif(-2.0, 2.0);
  return unif(rng);
}

double Dgp::sample_potential_outcome(int t, Rng& rng) const {
  if (kind == DgpKind::kCaseStudy) {
    const auto d = draw_case_study(rng, Assignment::kRandomized);
    return t == 1 ? d.y1 : d.y0;
  }
  const auto d = draw_msm(rng, msm, Assignment::kRandomized);
  return t == 1 ? d.y1 : d.y0;
}

TabularDataset Dgp::sample(std::size_t n, std::uint64_t seed, Assignment assignment) const {
  require_rows(n, kind == DgpKind::kCaseStudy ? "gen_case_study" : "gen_msm");
  Rng rng = make_rng(seed, Stream::kData);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  TabularDataset data;
  data.x = Tensor(n, 1);
  data.covariate_names = {"x1"};
  OracleBlock oracle;
  for (std::size_t i = 0; i < n; ++i) {
    double x = 0, u = 0, y0 = 0, y1 = 0, p = 0;
    if (kind == DgpKind::kCaseStudy) {
      const auto d = draw_case_study(rng, assignment);
      x = d.x, u = d.u, y0 = d.y0, y1 = d.y1, p = d.propensity;
    } else {
      const auto d = draw_msm(rng, msm, assignment);
      x = d.x, u = d.u, y0 = d.y0, y1 = d.y1, p = d.propensity;
    }
    const int t = unit(rng) < p ? 1 : 0;
    data.x[i] = x;
    data.t.push_back(t);
    data.y.push_back(t == 1 ? y1 : y0);
    oracle.u.push_back(u);
    oracle.y0.push_back(y0);
    oracle.y1.push_back(y1);
    oracle.mean_y0.push_back(conditional_mean(x, 0));
    oracle.mean_y1.push_back(conditional_mean(x, 1));
  }
  data.oracle = std::move(oracle);
  return data;
}

Tensor Dgp::sample_covariates(std::size_t n, std::uint64_t seed) const {
  Rng rng = make_rng(seed, Stream::kEval);
  Tensor x(n, 1);
  for (std::size_t i = 0; i < n; ++i) x[i] = sample_covariate(rng);
  return x;
}

TabularDataset gen_case_study(std::size_t n, std::uint64_t seed) {
  return Dgp::case_study().sample(n, seed);
}

TabularDataset gen_msm(std::size_t n, double gamma, std::uint64_t seed) {
  return Dgp::msm_with_gamma(gamma).sample(n, seed);
}

RctOutcomes gen_rct_outcomes(std::size_t n_rct, double treated_probability, const Dgp& dgp,
                             std::uint64_t seed, EmptyArmPolicy policy) {
  require_rows(n_rct, "gen_rct_outcomes");
  if (!(treated_probability > 0.0 && treated_probability < 1.0)) {
    throw DataError("gen_rct_outcomes: treated-arm probability must lie in (0, 1)");
  }
  constexpr std::uint64_t kMaxAttempts = 1000;
  for (std::uint64_t attempt = 0; attempt < kMaxAttempts; ++attempt) {
    Rng rng = make_rng(seed, Stream::kRct, attempt);
    std::bernoulli_distribution arm(treated_probability);
    RctOutcomes rct;
    rct.treated_probability = treated_probability;
    for (std::size_t i = 0; i < n_rct; ++i) {
      const int t = arm(rng) ? 1 : 0;
      const double y = dgp.sample_potential_outcome(t, rng);
      (t == 1 ? rct.treated : rct.control).push_back(y);
    }
    if (!rct.treated.empty() && !rct.control.empty()) return rct;
    if (policy == EmptyArmPolicy::kError) {
      throw DataError("gen_rct_outcomes: sampled an empty " +
                      std::string(rct.treated.empty() ? "treated" : "control") + " arm");
    }
  }
  throw DataError("gen_rct_outcomes: could not sample two non-empty arms");
}

TabularDataset inject_confounding(const TabularDataset& data, double c) {
  if (!(c >= 0.0)) throw DataError("inject_confounding: c must be >= 0");
  std::vector<double> arm_y[2];
  for (std::size_t i = 0; i < data.size(); ++i) arm_y[data.t[i]].push_back(data.y[i]);
  if (arm_y[0].empty() || arm_y[1].empty()) throw DataError("inject_confounding: input has an empty arm");
  const auto [mean0, sd0] = mean_and_sd(arm_y[0]);
  const auto [mean1, sd1] = mean_and_sd(arm_y[1]);
  const double below = mean0 - c * sd0;
  const double above = mean1 + c * sd1;

  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if ((data.t[i] == 0 && data.y[i] < below) || (data.t[i] == 1 && data.y[i] > above)) {
      keep.push_back(i);
    }
  }
  TabularDataset out = data.subset(keep);
  if (out.arm_size(0) == 0) {
    throw DataError("inject_confounding: no control has y < " + report_double(below) + " (c = " +
                    report_double(c) + ")");
  }
  if (out.arm_size(1) == 0) {
    throw DataError("inject_confounding: no treated unit has y > " + report_double(above) + " (c = " +
                    report_double(c) + ")");
  }
  return out;
}

bool CovariateRule::matches(double value) const {
  switch (kind) {
    case Kind::kLess: return value < threshold;
    case Kind::kLessEqual: return value <= threshold;
    case Kind::kGreater: return value > threshold;
    case Kind::kGreaterEqual: return value >= threshold;
    case Kind::kEqual: return value == threshold;
  }
  return false;
}

CovariateRule CovariateRule::parse(const std::string& text) {
  const std::string_view s = trim(text);
  CovariateRule rule;
  std::string_view rest;
  if (s.starts_with("<=")) rule.kind = Kind::kLessEqual, rest = s.substr(2);
  else if (s.starts_with(">=")) rule.kind = Kind::kGreaterEqual, rest = s.substr(2);
  else if (s.starts_with("==")) rule.kind = Kind::kEqual, rest = s.substr(2);
  else if (s.starts_with("<")) rule.kind = Kind::kLess, rest = s.substr(1);
  else if (s.starts_with(">")) rule.kind = Kind::kGreater, rest = s.substr(1);
  else if (s.starts_with("=")) rule.kind = Kind::kEqual, rest = s.substr(1);
  else throw std::invalid_argument("covariate rule must start with <, <=, >, >=, == : '" + text + "'");
  rule.threshold = parse_double(rest);
  return rule;
}

RctSplit split_rct_by_covariate(const TabularDataset& data, const std::string& column,
                                const CovariateRule& rule, std::size_t n_rct, std::uint64_t seed) {
  const auto it = std::find(data.covariate_names.begin(), data.covariate_names.end(), column);
  if (it == data.covariate_names.end()) throw DataError("split_rct_by_covariate: no column '" + column + "'");
  const std::size_t col = static_cast<std::size_t>(it - data.covariate_names.begin());

  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (rule.matches(data.x(i, col))) candidates.push_back(i);
  }
  if (candidates.size() < n_rct) {
    throw DataError("split_rct_by_covariate: rule on '" + column + "' matches " +
                    std::to_string(candidates.size()) + " rows, need " + std::to_string(n_rct));
  }
  if (candidates.size() > n_rct) {
    Rng rng = make_rng(seed, Stream::kRct);
    std::shuffle(candidates.begin(), candidates.end(), rng);
    candidates.resize(n_rct);
    std::sort(candidates.begin(), candidates.end());
  }

  RctSplit split;
  split.rct_rows = candidates;
  std::vector<bool> taken(data.size(), false);
  for (std::size_t r : candidates) {
    taken[r] = true;
    (data.t[r] == 1 ? split.rct.treated : split.rct.control).push_back(data.y[r]);
  }
  split.rct.treated_probability =
      n_rct == 0 ? 0.5 : static_cast<double>(split.rct.treated.size()) / static_cast<double>(n_rct);
  std::vector<std::size_t> rest;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!taken[i]) rest.push_back(i);
  }
  split.observational = data.subset(rest);
  return split;
}

TabularDataset load_csv(const std::string& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  const auto header = split(line, ',');

  std::ptrdiff_t t_col = -1, y_col = -1, m0_col = -1, m1_col = -1;
  std::vector<std::size_t> x_cols;
  TabularDataset data;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const auto& name = header[c];
    if (name == schema.treatment) t_col = static_cast<std::ptrdiff_t>(c);
    else if (name == schema.outcome) y_col = static_cast<std::ptrdiff_t>(c);
    else if (name == schema.mean_y0) m0_col = static_cast<std::ptrdiff_t>(c);
    else if (name == schema.mean_y1) m1_col = static_cast<std::ptrdiff_t>(c);
    else {
      x_cols.push_back(c);
      data.covariate_names.push_back(name);
    }
  }
  if (t_col < 0 || y_col < 0) {
    throw DataError(path + ": header must contain '" + schema.treatment + "' and '" + schema.outcome + "'");
  }
  if ((m0_col < 0) != (m1_col < 0)) {
    throw DataError(path + ": oracle columns '" + schema.mean_y0 + "' and '" + schema.mean_y1 +
                    "' must appear together");
  }
  if (x_cols.empty()) throw DataError(path + ": no covariate columns");
  const bool with_oracle = m0_col >= 0;

  std::vector<double> xs;
  OracleBlock oracle;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = split(line, ',');
    if (fields.size() != header.size()) {
      throw DataError(path + ":" + std::to_string(line_no) + ": expected " +
                      std::to_string(header.size()) + " fields, got " + std::to_string(fields.size()));
    }
    try {
      for (std::size_t c : x_cols) xs.push_back(parse_double(fields[c]));
      const double t = parse_double(fields[static_cast<std::size_t>(t_col)]);
      if (t != 0.0 && t != 1.0) throw DataError("treatment must be 0 or 1, got '" + fields[static_cast<std::size_t>(t_col)] + "'");
      data.t.push_back(static_cast<int>(t));
      data.y.push_back(parse_double(fields[static_cast<std::size_t>(y_col)]));
      if (with_oracle) {
        oracle.mean_y0.push_back(parse_double(fields[static_cast<std::size_t>(m0_col)]));
        oracle.mean_y1.push_back(parse_double(fields[static_cast<std::size_t>(m1_col)]));
      }
    } catch (const std::exception& e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  data.x = Tensor(data.y.size(), x_cols.size(), std::move(xs));
  if (with_oracle) data.oracle = std::move(oracle);
  return data;
}

void save_csv(const std::string& path, const TabularDataset& data, const CsvSchema& schema) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  const bool with_oracle = data.oracle && !data.oracle->mean_y0.empty();
  for (std::size_t c = 0; c < data.dim(); ++c) {
    out << (c < data.covariate_names.size() ? data.covariate_names[c] : "x" + std::to_string(c + 1)) << ',';
  }
  out << schema.treatment << ',' << schema.outcome;
  if (with_oracle) out << ',' << schema.mean_y0 << ',' << schema.mean_y1;
  out << '\n';
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (std::size_t c = 0; c < data.dim(); ++c) out << exact_double(data.x(i, c)) << ',';
    out << data.t[i] << ',' << exact_double(data.y[i]);
    if (with_oracle) {
      out << ',' << exact_double(data.oracle->mean_y0[i]) << ',' << exact_double(data.oracle->mean_y1[i]);
    }
    out << '\n';
  }
}

RctOutcomes load_rct_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file");
  const auto header = split(line, ',');
  if (header.size() != 2 || header[0] != "t" || header[1] != "y") {
    throw DataError(path + ": RCT header must be 't,y'");
  }
  RctOutcomes rct;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = split(line, ',');
    try {
      if (fields.size() != 2) throw DataError("expected 2 fields");
      const double t = parse_double(fields[0]);
      if (t != 0.0 && t != 1.0) throw DataError("treatment must be 0 or 1");
      (t == 1.0 ? rct.treated : rct.control).push_back(parse_double(fields[1]));
    } catch (const std::exception& e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  const double n = static_cast<double>(rct.size());
  rct.treated_probability = n > 0 ? static_cast<double>(rct.treated.size()) / n : 0.5;
  return rct;
}

void save_rct_csv(const std::string& path, const RctOutcomes& rct) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << "t,y\n";
  for (double y : rct.treated) out << "1," << exact_double(y) << '\n';
  for (double y : rct.control) out << "0," << exact_double(y) << '\n';
}

Standardizer Standardizer::fit(const TabularDataset& data, const std::vector<std::size_t>& columns) {
  Standardizer s;
  s.columns = columns;
  for (std::size_t c : columns) {
    if (c >= data.dim()) throw DataError("standardize: column " + std::to_string(c) + " out of range");
    std::vector<double> col(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) col[i] = data.x(i, c);
    const auto [mean, sd] = mean_and_sd(col);
    if (!(sd > 0.0)) {
      const std::string name = c < data.covariate_names.size() ? data.covariate_names[c] : std::to_string(c);
      throw DataError("standardize: column '" + name + "' has zero standard deviation");
    }
    s.mean.push_back(mean);
    s.sd.push_back(sd);
  }
  return s;
}

TabularDataset Standardizer::apply(const TabularDataset& data) const {
  TabularDataset out = data;
  for (std::size_t k = 0; k < columns.size(); ++k) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      out.x(i, columns[k]) = (out.x(i, columns[k]) - mean[k]) / sd[k];
    }
  }
  return out;
}

TabularDataset standardize(const TabularDataset& data, const std::vector<std::size_t>& columns,
                           Standardizer* fitted) {
  Standardizer s = Standardizer::fit(data, columns);
  TabularDataset out = s.apply(data);
  if (fitted) *fitted = std::move(s);
  return out;
}

std::vector<std::size_t> continuous_columns(const TabularDataset& data) {
  std::vector<std::size_t> cols;
  for (std::size_t c = 0; c < data.dim(); ++c) {
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double v = data.x(i, c);
      if (v != 0.0 && v != 1.0) {
        cols.push_back(c);
        break;
      }
    }
  }
  return cols;
}

}  // namespace mbpb
