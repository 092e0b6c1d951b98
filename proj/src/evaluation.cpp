#include "mbpb/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <Eigen/Dense>
#include <boost/multiprecision/cpp_int.hpp>
#include <boost/rational.hpp>

#include "mbpb/adam.hpp"
#include "mbpb/balancing.hpp"
#include "mbpb/text.hpp"

namespace mbpb {

// ---- metrics CSV -----------------------------------------------------------

std::string metrics_csv_header() {
  return "run_id,method,dgp,gamma,n_obs,n_rct,seed,sqrt_pehe,factual_mse,lp_diag";
}

namespace {

std::string optional_field(const std::optional<double>& v) {
  return v ? report_double(*v) : std::string("NA");
}

std::optional<double> parse_optional(const std::string& s) {
  if (s == "NA" || s.empty()) return std::nullopt;
  return parse_double(s);
}

}  // namespace

std::string metrics_csv_row(const MetricsRecord& r) {
  std::ostringstream out;
  out << r.run_id << ',' << r.method << ',' << r.dgp << ',' << optional_field(r.gamma) << ','
      << r.n_obs << ',' << r.n_rct << ',' << r.seed << ',' << optional_field(r.sqrt_pehe) << ','
      << report_double(r.factual_mse) << ',' << optional_field(r.lp_diag);
  return out.str();
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw EvaluationError("cannot write metrics csv: " + path);
  out << metrics_csv_header() << '\n';
  for (const auto& r : records) out << metrics_csv_row(r) << '\n';
  if (!out) throw EvaluationError("write failed: " + path);
}

std::vector<MetricsRecord> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw EvaluationError("cannot read metrics csv: " + path);
  std::string line;
  if (!std::getline(in, line) || std::string(trim(line)) != metrics_csv_header()) {
    throw EvaluationError(path + ": unexpected metrics header");
  }
  std::vector<MetricsRecord> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 10) {
      throw EvaluationError(path + ":" + std::to_string(lineno) + ": expected 10 fields");
    }
    MetricsRecord r;
    r.run_id = f[0];
    r.method = f[1];
    r.dgp = f[2];
    r.gamma = parse_optional(f[3]);
    r.n_obs = static_cast<std::size_t>(parse_int(f[4]));
    r.n_rct = static_cast<std::size_t>(parse_int(f[5]));
    r.seed = static_cast<std::uint64_t>(parse_int(f[6]));
    r.sqrt_pehe = parse_optional(f[7]);
    r.factual_mse = parse_double(f[8]);
    r.lp_diag = parse_optional(f[9]);
    out.push_back(std::move(r));
  }
  return out;
}

// ---- metrics ---------------------------------------------------------------

double sqrt_pehe(const std::vector<double>& estimate, const std::vector<double>& truth) {
  if (estimate.empty()) throw EvaluationError("sqrt_pehe: empty evaluation set");
  if (estimate.size() != truth.size()) throw EvaluationError("sqrt_pehe: length mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < estimate.size(); ++i) {
    const double d = estimate[i] - truth[i];
    sum += d * d;
  }
  return std::sqrt(sum / static_cast<double>(estimate.size()));
}

double sqrt_pehe(const TrainedModel& model, const Tensor& eval_x, const std::vector<double>& true_cate,
                 std::size_t mc_samples, std::uint64_t seed) {
  if (eval_x.rows() == 0) throw EvaluationError("sqrt_pehe: empty evaluation set");
  const Tensor cate = predict_cate(model, eval_x, mc_samples, seed);
  return sqrt_pehe(std::vector<double>(cate.values().begin(), cate.values().end()), true_cate);
}

double factual_error(const std::vector<double>& y1_hat, const std::vector<double>& y0_hat,
                     const std::vector<int>& t, const std::vector<double>& y) {
  if (y.empty()) throw EvaluationError("factual_error: empty split");
  if (y1_hat.size() != y.size() || y0_hat.size() != y.size() || t.size() != y.size()) {
    throw EvaluationError("factual_error: length mismatch");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = (t[i] == 1 ? y1_hat[i] : y0_hat[i]) - y[i];
    sum += d * d;
  }
  return sum / static_cast<double>(y.size());
}

double factual_error(const TrainedModel& model, const TabularDataset& heldout, std::size_t mc_samples,
                     std::uint64_t seed) {
  if (heldout.size() == 0) throw EvaluationError("factual_error: empty split");
  const Tensor y1 = predict_potential_outcomes(model, heldout.x, 1, mc_samples, seed);
  const Tensor y0 = predict_potential_outcomes(model, heldout.x, 0, mc_samples, seed);
  return factual_error(std::vector<double>(y1.values().begin(), y1.values().end()),
                       std::vector<double>(y0.values().begin(), y0.values().end()), heldout.t,
                       heldout.y);
}

// ---- discrete instances ----------------------------------------------------

void DiscreteInstance::validate() const {
  const std::size_t k = x_values.size();
  if (k == 0) throw EvaluationError("instance: empty support");
  if (u_levels == 0) throw EvaluationError("instance: no confounder levels");
  const std::size_t cells = k * u_levels;
  if (p_x.size() != k || p_u_given_x.size() != cells || propensity.size() != cells ||
      outcomes[0].size() != cells || outcomes[1].size() != cells) {
    throw EvaluationError("instance: table sizes disagree with support");
  }
  auto near_one = [](double s) { return std::fabs(s - 1.0) < 1e-9; };
  double total = 0.0;
  for (double p : p_x) {
    if (!(p > 0.0)) throw EvaluationError("instance: support point with non-positive mass");
    total += p;
  }
  if (!near_one(total)) throw EvaluationError("instance: p_x does not sum to 1");
  for (std::size_t i = 0; i < k; ++i) {
    double su = 0.0;
    for (std::size_t u = 0; u < u_levels; ++u) {
      const double pu = p_u_given_x[i * u_levels + u];
      if (pu < 0.0) throw EvaluationError("instance: negative confounder mass");
      su += pu;
      const double e = propensity[i * u_levels + u];
      if (!(e >= 0.0 && e <= 1.0)) throw EvaluationError("instance: propensity outside [0, 1]");
      for (int t : {0, 1}) {
        const auto& atoms = outcomes[t][i * u_levels + u];
        if (atoms.empty()) throw EvaluationError("instance: empty outcome law");
        double sa = 0.0;
        for (const auto& a : atoms) {
          if (a.prob < 0.0 || !std::isfinite(a.value)) throw EvaluationError("instance: bad outcome atom");
          sa += a.prob;
        }
        if (!near_one(sa)) throw EvaluationError("instance: outcome law does not sum to 1");
      }
    }
    if (!near_one(su)) throw EvaluationError("instance: p(u|x) does not sum to 1");
    const double share = treated_share(i);
    if (!(share > 0.0 && share < 1.0)) {
      throw EvaluationError("instance: positivity violated at x = " + report_double(x_values[i]));
    }
  }
}

double DiscreteInstance::cell_mean(int t, std::size_t k, std::size_t u) const {
  double m = 0.0;
  for (const auto& a : outcomes[t][k * u_levels + u]) m += a.prob * a.value;
  return m;
}

double DiscreteInstance::conditional_mean(int t, std::size_t k) const {
  double m = 0.0;
  for (std::size_t u = 0; u < u_levels; ++u) m += p_u_given_x[k * u_levels + u] * cell_mean(t, k, u);
  return m;
}

double DiscreteInstance::treated_share(std::size_t k) const {
  double s = 0.0;
  for (std::size_t u = 0; u < u_levels; ++u) s += p_u_given_x[k * u_levels + u] * propensity[k * u_levels + u];
  return s;
}

double DiscreteInstance::arm_mean(int t, std::size_t k) const {
  double num = 0.0;
  double den = 0.0;
  for (std::size_t u = 0; u < u_levels; ++u) {
    const double e = propensity[k * u_levels + u];
    const double w = p_u_given_x[k * u_levels + u] * (t == 1 ? e : 1.0 - e);
    num += w * cell_mean(t, k, u);
    den += w;
  }
  if (!(den > 0.0)) throw EvaluationError("arm_mean: arm has no mass at this support point");
  return num / den;
}

double DiscreteInstance::marginal_mean(int t) const {
  double m = 0.0;
  for (std::size_t k = 0; k < x_values.size(); ++k) m += p_x[k] * conditional_mean(t, k);
  return m;
}

double DiscreteInstance::marginal_variance(int t) const {
  const double m = marginal_mean(t);
  double v = 0.0;
  for (std::size_t k = 0; k < x_values.size(); ++k) {
    for (std::size_t u = 0; u < u_levels; ++u) {
      const double w = p_x[k] * p_u_given_x[k * u_levels + u];
      for (const auto& a : outcomes[t][k * u_levels + u]) v += w * a.prob * (a.value - m) * (a.value - m);
    }
  }
  return v;
}

namespace {

std::vector<double> random_simplex(Rng& rng, std::size_t n) {
  // integer weights keep the tables readable and well away from zero
  std::uniform_int_distribution<int> weight(1, 9);
  std::vector<double> w(n);
  for (double& v : w) v = weight(rng);
  const double s = std::accumulate(w.begin(), w.end(), 0.0);
  for (double& v : w) v /= s;
  return w;
}

}  // namespace

DiscreteInstance random_instance(Rng& rng, const InstanceOptions& options) {
  if (options.max_support < 1 || options.max_u_levels < 1 || options.max_atoms < 1) {
    throw std::invalid_argument("random_instance: option counts must be positive");
  }
  if (!(options.propensity_floor > 0.0 && options.propensity_floor < 0.5)) {
    throw std::invalid_argument("random_instance: propensity floor must be in (0, 0.5)");
  }
  std::uniform_int_distribution<std::size_t> support(1, options.max_support);
  std::uniform_int_distribution<std::size_t> levels(1, options.max_u_levels);
  std::uniform_int_distribution<std::size_t> atoms(1, options.max_atoms);
  std::uniform_real_distribution<double> prop(options.propensity_floor, 1.0 - options.propensity_floor);
  std::uniform_real_distribution<double> value(-3.0, 3.0);

  DiscreteInstance inst;
  const std::size_t k = support(rng);
  inst.u_levels = levels(rng);
  for (std::size_t i = 0; i < k; ++i) inst.x_values.push_back(static_cast<double>(i) - static_cast<double>(k) / 2.0);
  inst.p_x = random_simplex(rng, k);
  for (std::size_t i = 0; i < k; ++i) {
    const auto pu = random_simplex(rng, inst.u_levels);
    inst.p_u_given_x.insert(inst.p_u_given_x.end(), pu.begin(), pu.end());
    const double shared = prop(rng);
    for (std::size_t u = 0; u < inst.u_levels; ++u) {
      inst.propensity.push_back(options.confounded ? prop(rng) : shared);
      for (int t : {0, 1}) {
        const std::size_t na = atoms(rng);
        const auto probs = random_simplex(rng, na);
        std::vector<DiscreteInstance::Atom> law;
        for (std::size_t a = 0; a < na; ++a) law.push_back({value(rng), probs[a]});
        inst.outcomes[t].push_back(std::move(law));
      }
    }
  }
  inst.validate();
  return inst;
}

DiscreteInstance bernoulli_counterexample_instance() {
  DiscreteInstance inst;
  inst.x_values = {0.0, 1.0};
  inst.p_x = {0.5, 0.5};
  inst.u_levels = 2;  // u = t
  inst.p_u_given_x = {0.5, 0.5, 0.5, 0.5};
  inst.propensity = {0.0, 1.0, 0.0, 1.0};
  for (std::size_t k = 0; k < 2; ++k) {
    for (std::size_t u = 0; u < 2; ++u) {
      const double x = inst.x_values[k];
      const double y = u == 0 ? x : 1.0 - x;
      for (int t : {0, 1}) inst.outcomes[t].push_back({{y, 1.0}});
    }
  }
  inst.validate();
  return inst;
}

// ---- ideal projections balancing oracle --------------------------------------

PbOracleResult ideal_pb_oracle(const DiscreteInstance& instance, double tolerance) {
  instance.validate();
  const std::size_t k = instance.support_size();
  const std::size_t n = 2 * k;  // z index: t * k + i
  using Eigen::MatrixXd;
  using Eigen::VectorXd;

  // E[(Z_T - Y)^2] = sum_{t,i} w_ti (z_ti^2 - 2 z_ti m_ti) + const
  MatrixXd hessian = MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  VectorXd linear = VectorXd::Zero(static_cast<Eigen::Index>(n));
  for (int t : {0, 1}) {
    for (std::size_t i = 0; i < k; ++i) {
      const double share = instance.treated_share(i);
      const double w = instance.p_x[i] * (t == 1 ? share : 1.0 - share);
      const auto idx = static_cast<Eigen::Index>(t * k + i);
      hessian(idx, idx) = 2.0 * w;
      linear(idx) = -2.0 * w * instance.arm_mean(t, i);
    }
  }

  // Indicator critics g_j = 1{X = x_j}: E[Z_t g_j] = p_j z_tj, and the right
  // side E[Y_t g_j] enumerated over the joint law.
  MatrixXd constraints = MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  VectorXd rhs = VectorXd::Zero(static_cast<Eigen::Index>(n));
  for (int t : {0, 1}) {
    for (std::size_t j = 0; j < k; ++j) {
      const auto row = static_cast<Eigen::Index>(t * k + j);
      for (std::size_t i = 0; i < k; ++i) {
        const double g = i == j ? 1.0 : 0.0;
        constraints(row, static_cast<Eigen::Index>(t * k + i)) = instance.p_x[i] * g;
        for (std::size_t u = 0; u < instance.u_levels; ++u) {
          const double w = instance.p_x[i] * instance.p_u_given_x[i * instance.u_levels + u];
          for (const auto& a : instance.outcomes[t][i * instance.u_levels + u]) {
            rhs(row) += w * a.prob * a.value * g;
          }
        }
      }
    }
  }

  const auto m = static_cast<Eigen::Index>(n);
  MatrixXd kkt = MatrixXd::Zero(2 * m, 2 * m);
  kkt.topLeftCorner(m, m) = hessian;
  kkt.topRightCorner(m, m) = constraints.transpose();
  kkt.bottomLeftCorner(m, m) = constraints;
  VectorXd b(2 * m);
  b << -linear, rhs;
  Eigen::FullPivLU<MatrixXd> kkt_lu(kkt);
  if (!kkt_lu.isInvertible()) throw EvaluationError("ideal_pb_oracle: singular KKT system");
  const VectorXd sol = kkt_lu.solve(b);

  PbOracleResult r;
  Eigen::FullPivLU<MatrixXd> c_lu(constraints);
  r.constraint_rank = static_cast<std::size_t>(c_lu.rank());
  r.null_space_dim = n - r.constraint_rank;
  if (r.null_space_dim == 0) {
    r.reduced_min_eigenvalue = std::numeric_limits<double>::infinity();
  } else {
    const MatrixXd basis = c_lu.kernel();
    const MatrixXd reduced = basis.transpose() * hessian * basis;
    r.reduced_min_eigenvalue = Eigen::SelfAdjointEigenSolver<MatrixXd>(reduced).eigenvalues().minCoeff();
  }
  r.hessian_min_eigenvalue = hessian.diagonal().minCoeff();
  r.unique = r.reduced_min_eigenvalue > 0.0;

  for (int t : {0, 1}) {
    for (std::size_t i = 0; i < k; ++i) {
      const double z = sol(static_cast<Eigen::Index>(t * k + i));
      const double truth = instance.conditional_mean(t, i);
      r.z[t].push_back(z);
      r.truth[t].push_back(truth);
      r.max_abs_error = std::max(r.max_abs_error, std::fabs(z - truth));
    }
  }
  r.matches = r.max_abs_error <= tolerance;
  return r;
}

// ---- marginal balancing counterexample -------------------------------------

MbCounterexampleResult mb_counterexample_check() {
  using Q = boost::rational<long long>;
  auto str = [](const Q& q) {
    return q.denominator() == 1 ? std::to_string(q.numerator())
                                : std::to_string(q.numerator()) + "/" + std::to_string(q.denominator());
  };
  const Q half(1, 2);
  struct Cell {
    int x;
    int t;
    Q p;
  };
  std::vector<Cell> cells;
  for (int x : {0, 1}) {
    for (int t : {0, 1}) cells.push_back({x, t, half * half});
  }
  auto y = [](int x, int t) { return (1 - t) * x + t * (1 - x); };
  auto y_tilde = [](int arm, int x) { return arm == 0 ? x : 1 - x; };

  MbCounterexampleResult r;
  // law of a {0,1}-valued variable is P(. = 1)
  bool feasible = true;
  for (int arm : {0, 1}) {
    Q p_true(0);
    Q p_tilde(0);
    for (const auto& c : cells) {
      if (y(c.x, c.t) == 1) p_true += c.p;
      if (y_tilde(arm, c.x) == 1) p_tilde += c.p;
    }
    feasible = feasible && p_true == p_tilde;
  }
  r.constructed_feasible = feasible;

  // E[Y~_t | X] = Y~_t since Y~_t is a function of X
  Q constructed(0);
  for (const auto& c : cells) {
    const Q arm = c.t == 1 ? Q(y_tilde(1, c.x) - y(c.x, 1)) : Q(y_tilde(0, c.x) - y(c.x, 0));
    constructed += c.p * arm * arm;
  }
  r.constructed_objective = str(constructed);

  // E[Y_t | X = x] by enumeration; Y_t does not depend on the arm label here
  std::vector<Q> cond_mean(2, Q(0));
  bool means_half = true;
  for (int x : {0, 1}) {
    Q mass(0);
    Q sum(0);
    for (const auto& c : cells) {
      if (c.x != x) continue;
      mass += c.p;
      sum += c.p * y(c.x, c.t);
    }
    cond_mean[static_cast<std::size_t>(x)] = sum / mass;
    means_half = means_half && cond_mean[static_cast<std::size_t>(x)] == half;
  }
  r.truth_conditional_mean = means_half ? str(half) : str(cond_mean[0]) + "," + str(cond_mean[1]);

  Q treated(0);
  Q control(0);
  for (const auto& c : cells) {
    const Q resid = cond_mean[static_cast<std::size_t>(c.x)] - Q(y(c.x, c.t));
    (c.t == 1 ? treated : control) += c.p * resid * resid;
  }
  r.truth_objective_treated = str(treated);
  r.truth_objective_control = str(control);
  r.passed = feasible && constructed == Q(0) && means_half && treated == Q(1, 8) && control == Q(1, 8);
  return r;
}

// ---- practical projections balancing bound -----------------------------------

PbBoundResult exact_pb_bound_check(const DiscreteInstance& instance, int t, const std::vector<double>& z) {
  using Q = boost::multiprecision::cpp_rational;
  instance.validate();
  if (t != 0 && t != 1) throw std::invalid_argument("exact_pb_bound_check: arm must be 0 or 1");
  const std::size_t k = instance.support_size();
  if (z.size() != k) throw std::invalid_argument("exact_pb_bound_check: one value per support point");

  // exact binary rationals, renormalized so the law is a probability measure
  auto normalized = [](const std::vector<Q>& w) {
    Q s = 0;
    for (const auto& v : w) s += v;
    std::vector<Q> out;
    for (const auto& v : w) out.push_back(v / s);
    return out;
  };
  std::vector<Q> px;
  for (double p : instance.p_x) px.emplace_back(p);
  px = normalized(px);

  const std::size_t ul = instance.u_levels;
  std::vector<Q> mu(k, Q(0));
  std::vector<std::vector<Q>> pu(k);
  std::vector<std::vector<std::vector<std::pair<Q, Q>>>> law(k);
  for (std::size_t i = 0; i < k; ++i) {
    std::vector<Q> row;
    for (std::size_t u = 0; u < ul; ++u) row.emplace_back(instance.p_u_given_x[i * ul + u]);
    pu[i] = normalized(row);
    law[i].resize(ul);
    for (std::size_t u = 0; u < ul; ++u) {
      std::vector<Q> probs;
      for (const auto& a : instance.outcomes[t][i * ul + u]) probs.emplace_back(a.prob);
      probs = normalized(probs);
      const auto& atoms = instance.outcomes[t][i * ul + u];
      for (std::size_t a = 0; a < atoms.size(); ++a) {
        law[i][u].emplace_back(Q(atoms[a].value), probs[a]);
        mu[i] += pu[i][u] * probs[a] * Q(atoms[a].value);
      }
    }
  }
  Q mean = 0;
  for (std::size_t i = 0; i < k; ++i) mean += px[i] * mu[i];
  Q var = 0;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t u = 0; u < ul; ++u) {
      for (const auto& [v, p] : law[i][u]) var += px[i] * pu[i][u] * p * (v - mean) * (v - mean);
    }
  }
  auto qabs = [](const Q& q) { return q < 0 ? Q(-q) : q; };
  Q lhs = 0;
  Q lp = 0;  // sup over g in [-1,1]: sign critic per support point
  for (std::size_t i = 0; i < k; ++i) {
    const Q zi(z[i]);
    lhs += px[i] * qabs(zi - mu[i]);
    lp += px[i] * qabs(zi - mean);
  }

  PbBoundResult r;
  r.lhs = lhs.convert_to<double>();
  r.lp = lp.convert_to<double>();
  r.sd = std::sqrt(var.convert_to<double>());
  r.slack = r.lp + r.sd - r.lhs;
  const Q excess = lhs - lp;
  r.holds = excess <= 0 || excess * excess <= var;
  return r;
}

// ---- empirical L_p diagnostic ------------------------------------------------

LpDiagnostic empirical_lp_diagnostic(const TrainedModel& model, const TabularDataset& obs,
                                     const RctOutcomes& rct, int budget, std::uint64_t seed,
                                     std::size_t mc_samples, double learning_rate) {
  if (budget < 0) throw std::invalid_argument("empirical_lp_diagnostic: negative budget");
  if (obs.size() == 0) throw EvaluationError("empirical_lp_diagnostic: empty observational data");
  rct.validate();
  const std::size_t steps = static_cast<std::size_t>(budget);
  std::vector<double> best_sum(steps + 1, 0.0);
  for (int t : {1, 0}) {
    const Tensor z = predict_potential_outcomes(model, obs.x, t, mc_samples, seed);
    const auto& ys = rct.arm(t);
    const double ybar = std::accumulate(ys.begin(), ys.end(), 0.0) / static_cast<double>(ys.size());
    Tensor centered(z.rows(), 1);
    for (std::size_t i = 0; i < z.rows(); ++i) centered[i] = z[i] - ybar;

    NetworkParams critic = init_params(Role::kProjectionCritic, projection_critic_architecture(obs.dim()),
                                       derive_seed(seed, Stream::kDiagnostic, static_cast<std::uint64_t>(t)));
    AdamState adam = AdamState::like(critic.tensors);
    double best = 0.0;
    for (std::size_t step = 0; step <= steps; ++step) {
      Tape tape;
      const BoundNetwork bound = bind(tape, critic, true);
      const Var g = critic_forward(tape, critic, bound, tape.constant(obs.x));
      const Var gap = tape.abs(tape.mean(tape.mul(g, tape.constant(centered))));
      best = std::max(best, tape.value(gap).item());
      best_sum[step] += best;
      if (step == steps) break;
      tape.backward(tape.scale(gap, -1.0));
      adam_step(critic.tensors, gradients(tape, bound), adam, learning_rate);
    }
  }
  LpDiagnostic out;
  out.trace = std::move(best_sum);
  out.value = out.trace.back();
  return out;
}

// ---- gradient checks -------------------------------------------------------

std::size_t GradientCheckReport::failures() const {
  return static_cast<std::size_t>(std::count_if(cases.begin(), cases.end(), [](const auto& c) { return !c.passed; }));
}

namespace {

Tensor random_tensor(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Tensor out(rows, cols);
  for (double& v : out.values()) v = normal(rng);
  return out;
}

std::vector<double> random_values(Rng& rng, std::size_t n) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> out(n);
  for (double& v : out) v = normal(rng);
  return out;
}

/// A scalar function of several networks, rebuilt on a fresh tape per call.
struct GradientProblem {
  std::string description;
  std::vector<NetworkParams> nets;
  std::function<Var(Tape&, const std::vector<NetworkParams>&, const std::vector<BoundNetwork>&)> build;
};

Activation random_activation(Rng& rng, bool output) {
  static constexpr Activation hidden[] = {Activation::kElu, Activation::kRelu, Activation::kTanh,
                                          Activation::kLogistic};
  static constexpr Activation outputs[] = {Activation::kNone, Activation::kTanh, Activation::kLogistic};
  if (output) return outputs[std::uniform_int_distribution<std::size_t>(0, 2)(rng)];
  return hidden[std::uniform_int_distribution<std::size_t>(0, 3)(rng)];
}

GradientProblem make_problem(std::size_t index, Rng& rng) {
  std::uniform_int_distribution<std::size_t> rows_dist(2, 12);
  std::uniform_int_distribution<std::size_t> dim_dist(1, 3);
  std::uniform_int_distribution<std::size_t> width_dist(1, 6);
  const std::size_t n = rows_dist(rng);
  const std::size_t d = dim_dist(rng);
  auto seed = [&] { return std::uniform_int_distribution<std::uint64_t>()(rng); };

  GradientProblem p;
  switch (index % 6) {
    case 0: {
      Architecture arch;
      arch.input_dim = d;
      const std::size_t layers = std::uniform_int_distribution<std::size_t>(1, 3)(rng);
      for (std::size_t l = 0; l + 1 < layers; ++l) arch.widths.push_back(width_dist(rng));
      arch.widths.push_back(width_dist(rng));
      arch.hidden = random_activation(rng, false);
      arch.output = random_activation(rng, true);
      p.nets.push_back(init_params(Role::kOutcome, arch, seed()));
      const Tensor x = random_tensor(rng, n, d);
      const Tensor target = random_tensor(rng, n, arch.widths.back());
      const bool use_abs = index % 12 == 0;
      p.description = "mlp " + std::to_string(d);
      for (auto w : arch.widths) p.description += "-" + std::to_string(w);
      p.description += " " + std::string(to_string(arch.hidden)) + "/" + std::string(to_string(arch.output)) +
                       (use_abs ? " abs-loss" : " sq-loss");
      p.build = [x, target, use_abs](Tape& tape, const auto& nets, const auto& bound) {
        const Var out = mlp_forward(tape, nets[0], bound[0], tape.constant(x));
        const Var r = tape.sub(out, tape.constant(target));
        return tape.mean(use_abs ? tape.abs(r) : tape.square(r));
      };
      break;
    }
    case 1: {
      p.nets.push_back(init_params(Role::kGenerator, generator_architecture(), seed()));
      p.nets.push_back(init_params(Role::kOutcome, outcome_architecture(d), seed()));
      const Tensor noise = random_tensor(rng, n, kDefaultNoiseDim);
      const Tensor x = random_tensor(rng, n, d);
      Tensor t(n, 1);
      for (std::size_t i = 0; i < n; ++i) t[i] = i % 2 == 0 ? 1.0 : 0.0;
      const Tensor y = random_tensor(rng, n, 1, 2.0);
      p.description = "factual loss through generator, d=" + std::to_string(d);
      p.build = [noise, x, t, y](Tape& tape, const auto& nets, const auto& bound) {
        const Var u = generator_forward(tape, nets[0], bound[0], tape.constant(noise));
        const Var xv = tape.constant(x);
        const Var y1 = outcome_forward(tape, nets[1], bound[1], xv, u, 1);
        const Var y0 = outcome_forward(tape, nets[1], bound[1], xv, u, 0);
        return factual_loss(tape, y1, y0, t, y);
      };
      break;
    }
    case 2: {
      p.nets.push_back(init_params(Role::kOutcome, outcome_architecture(d), seed()));
      p.nets.push_back(init_params(Role::kMarginalCritic, marginal_critic_architecture(), seed()));
      const Tensor x = random_tensor(rng, n, d);
      const Tensor u = random_tensor(rng, n, 1);
      RctOutcomes rct{random_values(rng, 3), random_values(rng, 4), 0.5};
      p.description = "marginal loss, model and critic";
      p.build = [x, u, rct](Tape& tape, const auto& nets, const auto& bound) {
        const Var xv = tape.constant(x);
        const Var uv = tape.constant(u);
        const Var y1 = outcome_forward(tape, nets[0], bound[0], xv, uv, 1);
        const Var y0 = outcome_forward(tape, nets[0], bound[0], xv, uv, 0);
        return marginal_loss(tape, y1, y0, rct, nets[1], bound[1]);
      };
      break;
    }
    case 3: {
      p.nets.push_back(init_params(Role::kOutcome, outcome_architecture(d), seed()));
      p.nets.push_back(init_params(Role::kProjectionCritic, projection_critic_architecture(d), seed()));
      const Tensor x = random_tensor(rng, n, d);
      const Tensor u = random_tensor(rng, n, 1);
      const Tensor pool = random_tensor(rng, n + 5, d);
      RctOutcomes rct{random_values(rng, 4), random_values(rng, 3), 0.5};
      const std::uint64_t pair_seed = seed();
      p.description = "projection loss, model and critic";
      p.build = [x, u, pool, rct, pair_seed](Tape& tape, const auto& nets, const auto& bound) {
        const Var xv = tape.constant(x);
        const Var uv = tape.constant(u);
        const Var y1 = outcome_forward(tape, nets[0], bound[0], xv, uv, 1);
        const Var y0 = outcome_forward(tape, nets[0], bound[0], xv, uv, 0);
        return projection_loss(tape, xv, y1, y0, rct, pool, pair_seed, nets[1], bound[1]);
      };
      break;
    }
    case 4: {
      p.nets.push_back(init_params(Role::kGenerator, generator_architecture(), seed()));
      p.nets.push_back(init_params(Role::kOutcome, outcome_architecture(d), seed()));
      p.nets.push_back(init_params(Role::kMarginalCritic, marginal_critic_architecture(), seed()));
      p.nets.push_back(init_params(Role::kProjectionCritic, projection_critic_architecture(d), seed()));
      const Tensor noise = random_tensor(rng, n, kDefaultNoiseDim);
      const Tensor x = random_tensor(rng, n, d);
      Tensor t(n, 1);
      for (std::size_t i = 0; i < n; ++i) t[i] = i % 3 == 0 ? 1.0 : 0.0;
      const Tensor y = random_tensor(rng, n, 1, 2.0);
      RctOutcomes rct{random_values(rng, 3), random_values(rng, 3), 0.5};
      const std::uint64_t pair_seed = seed();
      const double alpha = std::uniform_real_distribution<double>(0.01, 10.0)(rng);
      p.description = "total loss, alpha=" + report_double(alpha);
      p.build = [=](Tape& tape, const auto& nets, const auto& bound) {
        const Var u = generator_forward(tape, nets[0], bound[0], tape.constant(noise));
        const Var xv = tape.constant(x);
        const Var y1 = outcome_forward(tape, nets[1], bound[1], xv, u, 1);
        const Var y0 = outcome_forward(tape, nets[1], bound[1], xv, u, 0);
        const Var lf = factual_loss(tape, y1, y0, t, y);
        const Var lm = marginal_loss(tape, y1, y0, rct, nets[2], bound[2]);
        const Var lp = projection_loss(tape, xv, y1, y0, rct, x, pair_seed, nets[3], bound[3]);
        return total_loss(tape, lf, lm, lp, alpha);
      };
      break;
    }
    default: {
      p.nets.push_back(init_params(Role::kMarginalCritic, marginal_critic_architecture(), seed()));
      p.nets.push_back(init_params(Role::kProjectionCritic, projection_critic_architecture(d), seed()));
      const Tensor x = random_tensor(rng, n, d);
      const Tensor y1 = random_tensor(rng, n, 1);
      const Tensor y0 = random_tensor(rng, n, 1);
      RctOutcomes rct{random_values(rng, 5), random_values(rng, 2), 0.5};
      const std::uint64_t pair_seed = seed();
      p.description = "critic objective, both critics";
      p.build = [=](Tape& tape, const auto& nets, const auto& bound) {
        const Var xv = tape.constant(x);
        const Var a = tape.constant(y1);
        const Var b = tape.constant(y0);
        const Var lm = marginal_loss(tape, a, b, rct, nets[0], bound[0]);
        const Var lp = projection_loss(tape, xv, a, b, rct, x, pair_seed, nets[1], bound[1]);
        return critic_objective(tape, lm, lp);
      };
      break;
    }
  }
  return p;
}

double evaluate_problem(const GradientProblem& p, const std::vector<NetworkParams>& nets, double* margin) {
  Tape tape;
  std::vector<BoundNetwork> bound;
  for (const auto& net : nets) bound.push_back(bind(tape, net, false));
  const double v = tape.value(p.build(tape, nets, bound)).item();
  if (margin) *margin = tape.kink_margin();
  return v;
}

}  // namespace

GradientCheckReport gradient_check_suite(const GradientCheckOptions& options) {
  constexpr double kKinkMargin = 1e-3;
  GradientCheckReport report;
  Rng rng = make_rng(options.seed, Stream::kDiagnostic);
  for (std::size_t c = 0; c < options.configurations; ++c) {
    GradientProblem problem = make_problem(c, rng);
    double margin = 0.0;
    evaluate_problem(problem, problem.nets, &margin);
    // central differences are meaningless across a kink; redraw
    while (margin < kKinkMargin) {
      problem = make_problem(c, rng);
      evaluate_problem(problem, problem.nets, &margin);
    }

    std::vector<Tensor> analytic;
    {
      Tape tape;
      std::vector<BoundNetwork> bound;
      for (const auto& net : problem.nets) bound.push_back(bind(tape, net, true));
      tape.backward(problem.build(tape, problem.nets, bound));
      for (const auto& b : bound) {
        auto g = gradients(tape, b);
        analytic.insert(analytic.end(), g.begin(), g.end());
      }
    }
    if (options.fault) options.fault(c, analytic);

    GradientCheckCase result;
    result.index = c;
    result.description = problem.description;
    std::vector<NetworkParams> nets = problem.nets;
    std::size_t flat = 0;
    for (std::size_t ni = 0; ni < nets.size(); ++ni) {
      for (std::size_t ti = 0; ti < nets[ni].tensors.size(); ++ti, ++flat) {
        Tensor& param = nets[ni].tensors[ti];
        for (std::size_t e = 0; e < param.size(); ++e) {
          const double saved = param[e];
          param[e] = saved + options.step;
          const double up = evaluate_problem(problem, nets, nullptr);
          param[e] = saved - options.step;
          const double down = evaluate_problem(problem, nets, nullptr);
          param[e] = saved;
          const double numeric = (up - down) / (2.0 * options.step);
          const double a = analytic[flat][e];
          const double err = std::fabs(a - numeric);
          const double allowed =
              std::max(options.absolute_tolerance,
                       options.relative_tolerance * std::max(std::fabs(a), std::fabs(numeric)));
          ++result.entries;
          if (err / allowed > result.worst_error / std::max(result.worst_allowed, 1e-300) ||
              result.entries == 1) {
            result.worst_error = err;
            result.worst_allowed = allowed;
          }
          if (!(err <= allowed)) result.passed = false;
        }
      }
    }
    report.cases.push_back(std::move(result));
  }
  return report;
}

}  // namespace mbpb
