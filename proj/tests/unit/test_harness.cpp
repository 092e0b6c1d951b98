#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "mbpb/harness.hpp"

using namespace mbpb;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

// a configuration small enough to train in well under a second per run
ExperimentConfig tiny(ExperimentKind kind, const fs::path& out) {
  ExperimentConfig c;
  c.kind = kind;
  c.output_dir = out.string();
  c.seeds = {0, 1};
  c.n_obs = 120;
  c.n_rct = 30;
  c.eval_size = 50;
  apply_config_text(c, "epochs = 6\nramp_start = 2\nramp_end = 4\nbatch_size = 64\nmc_samples = 5\n");
  return c;
}

}  // namespace

TEST_CASE("config text round trip, comments and overrides") {
  ExperimentConfig c;
  c.kind = ExperimentKind::kGammaSweep;
  c.seeds = {3, 9};
  c.methods = {RunMethod::kBaseline, RunMethod::kObsOracle};
  c.log_gammas = {0, 2.5};
  c.train.learning_rate = 0.002;
  ExperimentConfig back;
  apply_config_text(back, config_to_text(c));
  CHECK(config_to_text(back) == config_to_text(c));

  ExperimentConfig d;
  apply_config_text(d, "# comment\nn_rct = 50   # trailing\n\nn_rct = 25\nmethods = MB, PB\n");
  CHECK(d.n_rct == 25);
  CHECK(d.methods == std::vector<RunMethod>{RunMethod::kMB, RunMethod::kPB});
}

TEST_CASE("config errors carry the origin and line") {
  ExperimentConfig c;
  try {
    apply_config_text(c, "n_rct = 5\nwidth = 3\n", "my.cfg");
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("my.cfg:2") != std::string::npos);
    CHECK(std::string(e.what()).find("width") != std::string::npos);
  }
  CHECK_THROWS_AS(apply_config_text(c, "n_rct = many\n"), ConfigError);
  CHECK_THROWS_AS(apply_config_text(c, "just words\n"), ConfigError);
  CHECK_THROWS_AS(apply_config_text(c, "methods = CorNet\n"), ConfigError);
  CHECK_THROWS_AS(apply_config_text(c, "figures = maybe\n"), ConfigError);
  CHECK_THROWS_AS(load_config_file("/nonexistent/x.cfg"), ConfigError);
}

TEST_CASE("config validation") {
  ExperimentConfig c;
  CHECK_NOTHROW(c.validate());
  c.seeds.clear();
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ExperimentConfig{};
  c.kind = ExperimentKind::kGammaSweep;
  c.log_gammas.clear();
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ExperimentConfig{};
  c.kind = ExperimentKind::kRctSizeSweep;
  c.rct_sizes.clear();
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ExperimentConfig{};
  c.kind = ExperimentKind::kCsvRun;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.csv_path = "a.csv";
  c.rct_csv = "r.csv";
  CHECK_NOTHROW(c.validate());
  c.methods = {RunMethod::kRctOracle};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ExperimentConfig{};
  c.train.epochs = 10;  // schedule still spans 2000
  c.train.alpha.total_epochs = 2000;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("dataset profiles") {
  ExperimentConfig c;
  apply_profile(c, "star");
  CHECK(c.confounding_c == 1.0);
  CHECK(c.n_rct == 128);
  CHECK(c.train.batch_size == 256);
  apply_profile(c, "actg");
  CHECK(c.confounding_c == 0.0);
  CHECK(c.n_rct == 50);
  CHECK(c.train.batch_size == 200);
  apply_config_text(c, "profile = nsw\n");
  CHECK(c.confounding_c == 0.25);
  CHECK(c.n_rct == 50);
  CHECK(c.train.batch_size == 200);
  CHECK_THROWS_AS(apply_profile(c, "ihdp"), ConfigError);
}

TEST_CASE("output root environment variable") {
  ExperimentConfig c;
  c.output_dir = "res";
  ::unsetenv(kOutputRootEnv);
  CHECK(resolve_output_dir(c) == "res");
  ::setenv(kOutputRootEnv, "/tmp/root", 1);
  CHECK(resolve_output_dir(c) == "/tmp/root/res");
  c.output_dir = "/abs";
  CHECK(resolve_output_dir(c) == "/abs");
  ::unsetenv(kOutputRootEnv);
}

TEST_CASE("run plans") {
  ExperimentConfig c;
  const auto cs = plan_case_study(c);
  CHECK(cs.size() == 4 * 5);
  CHECK(cs.front().n_obs == 1000);
  CHECK(cs.front().n_train == 1000);

  c.methods = {RunMethod::kBaseline, RunMethod::kMB, RunMethod::kPB, RunMethod::kMBPB, RunMethod::kObsOracle,
               RunMethod::kRctOracle};
  const auto gs = plan_gamma_sweep(c);
  CHECK(gs.size() == 6 * 5 * 6);
  for (const auto& s : gs) {
    REQUIRE(s.log_gamma);
    CHECK(s.dgp.msm.gamma == doctest::Approx(std::exp(*s.log_gamma)));
    if (s.method == RunMethod::kRctOracle) CHECK(s.n_train == 1100);
  }

  c.methods = {RunMethod::kBaseline, RunMethod::kMBPB, RunMethod::kRctOracle};
  const auto rs = plan_rct_size_sweep(c);
  CHECK(c.rct_sizes == std::vector<std::size_t>{25, 50, 100});
  CHECK(rs.size() == 3 * 1 * 5 * 3);
  for (const auto& s : rs) {
    if (s.method == RunMethod::kMBPB) CHECK(s.n_train == s.n_obs);
    else CHECK(s.n_train == s.n_obs + s.n_rct);
  }
  // every method at a grid point shares the data stream
  CHECK(rs[0].grid_label == rs[1].grid_label);
}

TEST_CASE("case study: outputs, figures, manifests and reruns") {
  const auto dir = testing::scratch_dir("case_study");
  const auto c = tiny(ExperimentKind::kCaseStudy, dir / "a");
  const auto r = run_case_study(c);
  CHECK(r.records.size() == 4 * 2);
  for (const auto& m : r.records) {
    CHECK(m.sqrt_pehe.has_value());
    CHECK(*m.sqrt_pehe >= 0.0);
    CHECK(m.dgp == "case-study");
  }
  for (const char* f : {"metrics.csv", "summary.csv", "manifest.txt", "fig_cate.svg", "fig_cate.csv",
                        "fig_potential_outcomes.svg", "fig_potential_outcomes.csv"}) {
    CHECK(fs::exists(dir / "a" / f));
  }
  // truth plus four method curves
  const std::string cate = slurp(dir / "a" / "fig_cate.svg");
  std::size_t curves = 0;
  for (auto pos = cate.find("<polyline"); pos != std::string::npos; pos = cate.find("<polyline", pos + 1)) ++curves;
  CHECK(curves == 5);
  CHECK(cate.find("series \"MB+PB\"") != std::string::npos);

  // whole experiment rerun: byte-identical metrics
  auto again = c;
  again.output_dir = (dir / "b").string();
  run_case_study(again);
  CHECK(slurp(dir / "a" / "metrics.csv") == slurp(dir / "b" / "metrics.csv"));

  // one run rerun from its own manifest
  const auto run_dir = dir / "a" / "runs" / "case-study_PB_s1";
  REQUIRE(fs::exists(run_dir / "manifest.txt"));
  CHECK(fs::exists(run_dir / "loss_history.csv"));
  const auto single = load_config_file((run_dir / "manifest.txt").string());
  const auto rerun = run_case_study(single);
  REQUIRE(rerun.records.size() == 1);
  CHECK(metrics_csv_row(rerun.records[0]) == metrics_csv_row(r.records[6]));
}

TEST_CASE("worker count does not change results") {
  const auto dir = testing::scratch_dir("workers");
  auto c = tiny(ExperimentKind::kGammaSweep, dir / "one");
  c.log_gammas = {0, 3};
  c.methods = {RunMethod::kBaseline, RunMethod::kMBPB, RunMethod::kObsOracle};
  c.figures = false;
  const auto serial = run_gamma_sweep(c);
  CHECK(serial.records.size() == 2 * 2 * 3);
  c.output_dir = (dir / "three").string();
  c.workers = 3;
  run_gamma_sweep(c);
  CHECK(slurp(dir / "one" / "metrics.csv") == slurp(dir / "three" / "metrics.csv"));
  CHECK(slurp(dir / "one" / "summary.csv") == slurp(dir / "three" / "summary.csv"));
}

TEST_CASE("rct-size sweep emits one figure per rct size") {
  const auto dir = testing::scratch_dir("rct_size");
  auto c = tiny(ExperimentKind::kRctSizeSweep, dir);
  c.seeds = {0};
  c.rct_sizes = {25, 50};
  c.obs_sizes = {100, 150};
  c.methods = {RunMethod::kBaseline, RunMethod::kMBPB};
  const auto r = run_rct_size_sweep(c);
  CHECK(r.records.size() == 2 * 2 * 2);
  CHECK(fs::exists(dir / "fig_rct_size_25.svg"));
  CHECK(fs::exists(dir / "fig_rct_size_50.csv"));
  for (const auto& m : r.records) {
    if (m.method == "baseline") CHECK((m.n_obs == 125 || m.n_obs == 150 || m.n_obs == 175 || m.n_obs == 200));
  }
}

TEST_CASE("csv run with and without oracle columns") {
  const auto dir = testing::scratch_dir("csv_run");
  auto data = gen_msm(400, 5.0, 2);
  save_csv((dir / "with.csv").string(), data);
  data.oracle.reset();
  save_csv((dir / "without.csv").string(), data);
  save_rct_csv((dir / "rct.csv").string(), gen_rct_outcomes(40, 0.5, Dgp::msm_with_gamma(5.0), 3));

  auto c = tiny(ExperimentKind::kCsvRun, dir / "out1");
  c.seeds = {0};
  c.methods = {RunMethod::kBaseline, RunMethod::kMBPB};
  c.csv_path = (dir / "without.csv").string();
  c.rct_csv = (dir / "rct.csv").string();
  const auto r = run_csv(c);
  REQUIRE(r.records.size() == 2);
  for (const auto& m : r.records) {
    CHECK_FALSE(m.sqrt_pehe.has_value());
    CHECK(m.factual_mse > 0.0);
  }
  CHECK(slurp(dir / "out1" / "metrics.csv").find(",NA,") != std::string::npos);

  c.output_dir = (dir / "out2").string();
  c.csv_path = (dir / "with.csv").string();
  c.rct_csv.clear();
  c.split_column = "x1";
  c.split_rule = ">1";
  c.confounding_c = 0.1;
  const auto s = run_csv(c);
  for (const auto& m : s.records) CHECK(m.sqrt_pehe.has_value());
  CHECK(s.records[1].n_rct == 30);
}

TEST_CASE("verify: per-check runtime, named failures, exit codes") {
  VerifyOptions opts;
  opts.gradients.configurations = 8;
  opts.pb_oracle_instances = 10;
  opts.pb_bound_pairs = 40;
  const auto ok = run_verify(opts);
  CHECK(ok.passed());
  REQUIRE(ok.checks.size() == 4);
  for (const auto& c : ok.checks) CHECK(c.seconds >= 0.0);
  CHECK(ok.to_text().find("gradient-suite (") != std::string::npos);

  opts.gradients.fault = [](std::size_t config, std::vector<Tensor>& g) {
    if (config == 2) g.back()[0] *= -3.0;
  };
  const auto bad = run_verify(opts);
  CHECK_FALSE(bad.passed());
  CHECK_FALSE(bad.checks[0].passed);
  const std::string text = bad.to_text();
  CHECK(text.find("FAIL gradient-suite") != std::string::npos);
  CHECK(text.find("#2") != std::string::npos);
  CHECK(text.find("1 check(s) failed") != std::string::npos);

  ExperimentConfig v;
  v.kind = ExperimentKind::kVerify;
  std::ostringstream log;
  CHECK(run_experiment(v, log) == 0);
}

TEST_CASE("figures and summaries") {
  FigureSpec bad{"t", "x", "y", {{"s", {1, 2}, {1}, {}, false}}};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  FigureSpec band{"t", "x", "y", {{"s", {1, 2}, {1, 2}, {0.5}, false}}};
  CHECK_THROWS_AS(band.validate(), std::invalid_argument);

  FigureSpec fig{"a < b", "x", "y", {{"m", {0, 1}, {2, 3}, {0.1, 0.2}, false}, {"p", {0.5}, {1}, {}, true}}};
  const std::string svg = render_svg(fig);
  CHECK(svg.find("<svg") == 0);
  CHECK(svg.find("a &lt; b") != std::string::npos);
  CHECK(svg.find("series \"m\" x,y,band: 0,2,0.1 1,3,0.2") != std::string::npos);
  CHECK(svg.find("<circle") != std::string::npos);

  const auto dir = testing::scratch_dir("figure");
  write_figure((dir / "f.svg").string(), (dir / "f.csv").string(), fig);
  CHECK(slurp(dir / "f.csv") == "series,x,y,band\nm,0,2,0.1\nm,1,3,0.2\np,0.5,1,NA\n");

  CHECK(median({3, 1, 2}) == 2);
  CHECK(median({4, 1, 3, 2}) == 2.5);
  CHECK_THROWS(median({}));
  std::vector<MetricsRecord> recs(3);
  recs[0].method = recs[1].method = "MB";
  recs[2].method = "PB";
  recs[0].sqrt_pehe = 1.0;
  recs[1].sqrt_pehe = 3.0;
  recs[2].sqrt_pehe = 2.0;
  const auto rows = summarize(recs, [](const MetricsRecord&) { return std::string("g"); });
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].method == "MB");
  CHECK(rows[0].mean == 2.0);
  CHECK(rows[0].sd == doctest::Approx(std::sqrt(2.0)));
  CHECK(rows[0].median == 2.0);
  CHECK(rows[1].count == 1);
  CHECK(rows[1].sd == 0.0);
}

TEST_CASE("names") {
  for (auto k : {ExperimentKind::kCaseStudy, ExperimentKind::kGammaSweep, ExperimentKind::kRctSizeSweep,
                 ExperimentKind::kCsvRun, ExperimentKind::kVerify}) {
    CHECK(parse_experiment_kind(to_string(k)) == k);
  }
  CHECK(parse_run_method("Obs-Oracle") == RunMethod::kObsOracle);
  CHECK(training_method(RunMethod::kRctOracle) == Method::kBaseline);
  CHECK(training_method(RunMethod::kPB) == Method::kPB);
  CHECK_THROWS_AS(parse_experiment_kind("sweep"), ConfigError);
}
