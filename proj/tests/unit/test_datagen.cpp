#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "mbpb/datagen.hpp"

using namespace mbpb;

namespace {

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

double odds(double p) { return p / (1.0 - p); }

TabularDataset small_dataset(std::vector<double> x, std::vector<int> t, std::vector<double> y) {
  TabularDataset d;
  d.x = Tensor::column(std::move(x));
  d.t = std::move(t);
  d.y = std::move(y);
  d.covariate_names = {"x1"};
  return d;
}

}  // namespace

TEST_CASE("case study: true effect and covariate law") {
  CHECK(Dgp::case_study().true_cate(0.5) == -4.0);
  CHECK(Dgp::case_study().conditional_mean(2.0, 1) == -7.0);
  CHECK(Dgp::case_study().conditional_mean(2.0, 0) == 9.0);

  const std::size_t n = 100000;
  const auto d = gen_case_study(n, 1);
  const double mx = mean_of({d.x.values().begin(), d.x.values().end()});
  CHECK(std::fabs(mx - 1.0) <= 4 * 0.2 / std::sqrt(double(n)));
  CHECK_THROWS_AS(gen_case_study(1, 0), DataError);
}

TEST_CASE("case study: oracle consistency and confounding direction") {
  const auto d = gen_case_study(5000, 2);
  REQUIRE(d.oracle);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double expect = d.t[i] ? d.oracle->y1[i] : d.oracle->y0[i];
    CHECK(d.y[i] == expect);
    CHECK(d.oracle->true_cate(i) == doctest::Approx(-8.0 * d.x[i]));
  }
  // treated units carry larger U, which raises Y1 and lowers Y0
  double u_treated = 0, u_control = 0;
  for (std::size_t i = 0; i < d.size(); ++i) (d.t[i] ? u_treated : u_control) += d.oracle->u[i];
  CHECK(u_treated / d.arm_size(1) > 0.3);
  CHECK(u_control / d.arm_size(0) < -0.3);
}

TEST_CASE("generators are seeded") {
  const auto a = gen_msm(300, 3.0, 9), b = gen_msm(300, 3.0, 9), c = gen_msm(300, 3.0, 10);
  CHECK(a.x == b.x);
  CHECK(a.y == b.y);
  CHECK(a.t == b.t);
  CHECK_FALSE(a.y == c.y);
  CHECK(gen_case_study(50, 4).y == gen_case_study(50, 4).y);
}

TEST_CASE("nominal propensity") {
  CHECK(nominal_propensity(0.0) == doctest::Approx(0.62246).epsilon(1e-5));
  CHECK(nominal_propensity(0.0) == doctest::Approx(1.0 / (1.0 + std::exp(-0.5))));
  double prev = 0.0;
  for (double x = -3; x <= 3; x += 0.25) {
    const double e = nominal_propensity(x);
    CHECK(e > prev);
    CHECK(e + (1 - e) == 1.0);
    prev = e;
  }
  CHECK(nominal_propensity(-60.0) < 1e-15);
  CHECK(nominal_propensity(60.0) > 1 - 1e-15);
}

TEST_CASE("complete propensity: reference values and sensitivity bounds") {
  for (double x = -2; x <= 2; x += 0.5) {
    CHECK(complete_propensity(x, 0, 1.0) == doctest::Approx(nominal_propensity(x)).epsilon(1e-14));
    CHECK(complete_propensity(x, 1, 1.0) == doctest::Approx(nominal_propensity(x)).epsilon(1e-14));
  }
  const double g = std::exp(2.0);
  CHECK(1.0 / complete_propensity(0.0, 1, g) == doctest::Approx(1.0 + std::exp(-2.5)).epsilon(1e-12));
  CHECK(complete_propensity(0.0, 1, g) == doctest::Approx(0.92414).epsilon(1e-5));
  CHECK_THROWS_AS(complete_propensity(0.0, 1, 0.9), std::invalid_argument);
  CHECK_THROWS_AS(complete_propensity(0.0, 2, 2.0), std::invalid_argument);

  // each complete propensity's odds sit within [1/G, G] of the nominal odds,
  // attaining G for u = 1 and 1/G for u = 0
  for (double G : {1.0, 1.5, std::exp(1.0), std::exp(3.0), std::exp(5.0)}) {
    for (double x = -2; x <= 2; x += 0.1) {
      const double e = nominal_propensity(x);
      const double e1 = complete_propensity(x, 1, G), e0 = complete_propensity(x, 0, G);
      CHECK(e1 > 0.0);
      CHECK(e1 <= 1.0);
      CHECK(e0 > 0.0);
      CHECK(e0 <= 1.0);
      CHECK(odds(e1) / odds(e) == doctest::Approx(G).epsilon(1e-9));
      CHECK(odds(e0) / odds(e) == doctest::Approx(1.0 / G).epsilon(1e-9));
    }
  }
}

TEST_CASE("msm: effect at zero, consistency, propensity at gamma 1") {
  const Dgp d = Dgp::msm_with_gamma(2.0);
  CHECK(d.true_cate(0.0) == doctest::Approx(4.0));
  CHECK_THROWS_AS(gen_msm(10, 0.5, 0), std::invalid_argument);

  const auto s = gen_msm(2000, 5.0, 3);
  REQUIRE(s.oracle);
  for (std::size_t i = 0; i < s.size(); ++i) {
    CHECK(s.y[i] == (s.t[i] ? s.oracle->y1[i] : s.oracle->y0[i]));
    CHECK(s.oracle->mean_y1[i] == doctest::Approx(d.conditional_mean(s.x[i], 1)));
  }

  const auto big = gen_msm(200000, 1.0, 4);
  for (double x0 : {-1.5, 0.0, 1.5}) {
    double n = 0, treated = 0;
    for (std::size_t i = 0; i < big.size(); ++i) {
      if (std::fabs(big.x[i] - x0) <= 0.05) {
        n += 1;
        treated += big.t[i];
      }
    }
    const double p = nominal_propensity(x0);
    CHECK(std::fabs(treated / n - p) <= 4 * std::sqrt(p * (1 - p) / n) + 0.01);
  }
}

TEST_CASE("oracle curves match binned regressions of the potential outcomes") {
  const Dgp d = Dgp::msm_with_gamma(std::exp(3.0));
  const auto s = d.sample(400000, 11);
  for (double x0 : {-1.8, -0.6, 0.4, 1.2}) {
    double n = 0, s1 = 0, s0 = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (std::fabs(s.x[i] - x0) <= 0.02) {
        n += 1;
        s1 += s.oracle->y1[i];
        s0 += s.oracle->y0[i];
      }
    }
    // bin width adds at most ~0.1 of curvature error; MC error ~ 2.3/sqrt(n)
    CHECK(std::fabs(s1 / n - d.conditional_mean(x0, 1)) < 0.15 + 4 * 2.3 / std::sqrt(n));
    CHECK(std::fabs(s0 / n - d.conditional_mean(x0, 0)) < 0.15 + 4 * 2.3 / std::sqrt(n));
  }
}

TEST_CASE("assignment variants") {
  const Dgp d = Dgp::msm_with_gamma(std::exp(4.0));
  const auto conf = d.sample(20000, 5, Assignment::kConfounded);
  const auto unconf = d.sample(20000, 5, Assignment::kUnconfounded);
  const auto rand = d.sample(20000, 5, Assignment::kRandomized);
  auto treated_u = [](const TabularDataset& s) {
    double a = 0;
    for (std::size_t i = 0; i < s.size(); ++i) a += s.t[i] * s.oracle->u[i];
    return a / s.arm_size(1);
  };
  CHECK(treated_u(conf) > 0.7);
  CHECK(std::fabs(treated_u(unconf) - 0.5) < 0.03);
  CHECK(std::fabs(treated_u(rand) - 0.5) < 0.03);
  CHECK(std::fabs(rand.arm_size(1) / 20000.0 - 0.5) < 0.02);
}

TEST_CASE("rct outcomes") {
  const auto r = gen_rct_outcomes(50, 0.5, Dgp::case_study(), 3);
  CHECK(r.size() == 50);
  CHECK(!r.treated.empty());
  CHECK(!r.control.empty());
  CHECK(r.treated_probability == 0.5);

  const auto big = gen_rct_outcomes(200000, 0.5, Dgp::case_study(), 4);
  CHECK(mean_of(big.treated) == doctest::Approx(-3.5).epsilon(0.01));
  CHECK(mean_of(big.control) == doctest::Approx(4.5).epsilon(0.01));

  CHECK_THROWS_AS(gen_rct_outcomes(50, 1.0, Dgp::case_study(), 0), DataError);
  CHECK_THROWS_AS(gen_rct_outcomes(2, 0.01, Dgp::case_study(), 0, EmptyArmPolicy::kError), DataError);
  const auto resampled = gen_rct_outcomes(2, 0.01, Dgp::case_study(), 0, EmptyArmPolicy::kResample);
  CHECK(resampled.treated.size() == 1);

  // drawn independently of any observational sample with the same seed
  const auto obs = Dgp::case_study().sample(50, 3);
  for (double v : r.treated) CHECK(std::find(obs.y.begin(), obs.y.end(), v) == obs.y.end());
}

TEST_CASE("inject_confounding") {
  auto d = small_dataset({0, 1, 2, 3, 4, 5, 6, 7, 8, 9}, {0, 0, 0, 0, 0, 1, 1, 1, 1, 1},
                         {-2, -1, 0, 1, 2, 10, 11, 12, 13, 14});
  const auto out = inject_confounding(d, 0.0);
  std::vector<double> controls, treated;
  for (std::size_t i = 0; i < out.size(); ++i) (out.t[i] ? treated : controls).push_back(out.y[i]);
  CHECK(controls == std::vector<double>{-2, -1});
  CHECK(treated == std::vector<double>{13, 14});
  CHECK(mean_of(controls) < 0.0);
  CHECK(mean_of(treated) > 12.0);

  // sample sd of {-2..2} is sqrt(2.5); c = 0.7 keeps y < -1.107
  const auto tight = inject_confounding(d, 0.7);
  CHECK(tight.arm_size(0) == 1);

  try {
    inject_confounding(d, 100.0);
    FAIL("expected an empty-arm error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("c = 100") != std::string::npos);
  }
  CHECK_THROWS_AS(inject_confounding(d, -1.0), DataError);
}

TEST_CASE("split_rct_by_covariate") {
  auto d = small_dataset({0, 1, 0, 1, 0, 1, 0, 1}, {0, 1, 1, 0, 0, 1, 1, 0}, {1, 2, 3, 4, 5, 6, 7, 8});
  const auto rule = CovariateRule::parse("==1");
  const auto s = split_rct_by_covariate(d, "x1", rule, 4, 3);
  CHECK(s.rct_rows == std::vector<std::size_t>{1, 3, 5, 7});
  CHECK(s.observational.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(s.observational.x[i] == 0.0);
  CHECK(s.rct.treated == std::vector<double>{2, 6});
  CHECK(s.rct.control == std::vector<double>{4, 8});

  const auto partial = split_rct_by_covariate(d, "x1", CovariateRule::parse(">=0"), 3, 5);
  std::set<std::size_t> rct(partial.rct_rows.begin(), partial.rct_rows.end());
  CHECK(rct.size() == 3);
  CHECK(partial.observational.size() == 5);
  std::multiset<double> remaining(partial.observational.y.begin(), partial.observational.y.end());
  for (auto r : rct) CHECK(remaining.count(d.y[r]) == 0);

  CHECK_THROWS_AS(split_rct_by_covariate(d, "x1", rule, 5, 0), DataError);
  CHECK_THROWS_AS(split_rct_by_covariate(d, "nope", rule, 1, 0), DataError);
  CHECK_THROWS_AS(CovariateRule::parse("~3"), std::invalid_argument);
  CHECK(CovariateRule::parse("<=2").matches(2.0));
  CHECK_FALSE(CovariateRule::parse("<2").matches(2.0));
}

TEST_CASE("csv round trip and schema errors") {
  const auto dir = testing::scratch_dir("csv");
  const auto d = gen_msm(100, 2.0, 8);
  save_csv((dir / "a.csv").string(), d);
  const auto back = load_csv((dir / "a.csv").string());
  CHECK(back.x == d.x);
  CHECK(back.y == d.y);
  CHECK(back.t == d.t);
  REQUIRE(back.oracle);
  CHECK(back.oracle->mean_y1 == d.oracle->mean_y1);
  save_csv((dir / "b.csv").string(), back);
  const auto again = load_csv((dir / "b.csv").string());
  CHECK(again.y == back.y);

  {
    std::ofstream f(dir / "bad_t.csv");
    f << "x1,t,y\n0.5,1,2\n0.1,2,3\n";
  }
  try {
    load_csv((dir / "bad_t.csv").string());
    FAIL("expected a schema error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find(":3:") != std::string::npos);
  }
  {
    std::ofstream f(dir / "short.csv");
    f << "x1,t,y\n0.5,1,2\n0.1,0\n";
  }
  CHECK_THROWS_AS(load_csv((dir / "short.csv").string()), DataError);

  RctOutcomes r;
  r.treated = {1.5, 2.25};
  r.control = {-0.125};
  save_rct_csv((dir / "r.csv").string(), r);
  const auto rb = load_rct_csv((dir / "r.csv").string());
  CHECK(rb.treated == r.treated);
  CHECK(rb.control == r.control);
}

TEST_CASE("standardize") {
  auto d = small_dataset({1, 2, 3, 4, 5, 6}, {0, 1, 0, 1, 0, 1}, {0, 0, 0, 0, 0, 0});
  Standardizer s;
  const auto z = standardize(d, {0}, &s);
  std::vector<double> col(z.x.values().begin(), z.x.values().end());
  CHECK(mean_of(col) == doctest::Approx(0.0).epsilon(1e-12));
  double ss = 0;
  for (double v : col) ss += v * v;
  CHECK(std::sqrt(ss / (col.size() - 1)) == doctest::Approx(1.0));
  // fitted statistics are reused on other splits
  auto other = small_dataset({3.5, 9}, {0, 1}, {0, 0});
  const auto zo = s.apply(other);
  CHECK(zo.x[0] == doctest::Approx(0.0));

  auto constant = small_dataset({2, 2, 2}, {0, 1, 0}, {0, 1, 2});
  CHECK_THROWS_AS(standardize(constant, {0}, nullptr), DataError);

  TabularDataset mixed;
  mixed.x = Tensor(4, 2, {0.5, 1, 1.5, 0, 2.5, 1, 3.5, 0});
  mixed.t = {0, 1, 0, 1};
  mixed.y = {0, 0, 0, 0};
  mixed.covariate_names = {"age", "female"};
  CHECK(continuous_columns(mixed) == std::vector<std::size_t>{0});
}

TEST_CASE("dataset validation") {
  auto d = small_dataset({1, 2}, {1, 1}, {0, 0});
  CHECK_THROWS_AS(d.validate(), DataError);
  RctOutcomes r;
  r.treated = {1.0};
  CHECK_THROWS_AS(r.validate(), DataError);
}
