#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "helpers.hpp"
#include "mbpb/trainer.hpp"

using namespace mbpb;

namespace {

TrainConfig quick(Method m, int epochs = 12) {
  TrainConfig c;
  c.method = m;
  c.epochs = epochs;
  c.alpha.total_epochs = epochs;
  c.alpha.ramp_start = epochs / 2;
  c.alpha.ramp_end = std::min(epochs, epochs / 2 + 2);
  c.batch_size = 64;
  c.mc_samples = 20;
  c.seed = 3;
  return c;
}

struct Data {
  TabularDataset obs = gen_case_study(200, 1);
  RctOutcomes rct = gen_rct_outcomes(40, 0.5, Dgp::case_study(), 2);
};

const Data& data() {
  static const Data d;
  return d;
}

}  // namespace

TEST_CASE("inner step schedule") {
  const TrainConfig c;
  CHECK(inner_balancing_steps(c, 0) == 5);
  CHECK(inner_balancing_steps(c, 1229) == 5);
  CHECK(inner_balancing_steps(c, 1230) == 50);
  CHECK(inner_balancing_steps(c, 1430) == 50);
}

TEST_CASE("config validation and key-value round trip") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.epochs = 3000;  // schedule still ends at 2000
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.mc_samples = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);

  TrainConfig a = quick(Method::kPB);
  a.learning_rate = 0.0025;
  a.fixed_noise = false;
  TrainConfig b;
  for (const auto& [k, v] : config_entries(a)) CHECK(apply_config_entry(b, k, v));
  CHECK(config_entries(b) == config_entries(a));
  CHECK_FALSE(apply_config_entry(b, "colour", "blue"));
  CHECK(apply_config_entry(b, "epochs", "77"));
  CHECK(b.alpha.total_epochs == 77);
  CHECK(parse_method("MB+PB") == Method::kMBPB);
  CHECK_THROWS_AS(parse_method("CorNet"), std::invalid_argument);
}

TEST_CASE("training is deterministic and records one finite entry per epoch") {
  const auto a = train(data().obs, data().rct, quick(Method::kMBPB));
  const auto b = train(data().obs, data().rct, quick(Method::kMBPB));
  REQUIRE(a.history.size() == 12);
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].factual == b.history[i].factual);
    CHECK(a.history[i].marginal == b.history[i].marginal);
    CHECK(a.history[i].projection == b.history[i].projection);
    CHECK(std::isfinite(a.history[i].total()));
    CHECK(a.history[i].marginal >= 0.0);
    CHECK(a.history[i].projection >= 0.0);
  }
  CHECK(a.outcome == b.outcome);
  CHECK(a.generator == b.generator);
  CHECK(a.history[0].alpha == 0.01);
  CHECK(a.history[11].alpha == 100.0);

  auto other = quick(Method::kMBPB);
  other.seed = 4;
  CHECK_FALSE(train(data().obs, data().rct, other).outcome == a.outcome);
  auto redraw = quick(Method::kMBPB);
  redraw.fixed_noise = false;
  CHECK_FALSE(train(data().obs, data().rct, redraw).outcome == a.outcome);
}

TEST_CASE("method gating") {
  auto check_gate = [&](Method m, bool marginal, bool projection) {
    Trainer trainer(data().obs, data().rct, quick(m, 6));
    const auto m0 = trainer.model().marginal_critic;
    const auto p0 = trainer.model().projection_critic;
    const auto g0 = trainer.model().generator;
    const auto model = trainer.run();
    for (const auto& h : model.history) {
      CHECK((h.marginal != 0.0) == marginal);
      CHECK((h.projection != 0.0) == projection);
    }
    CHECK((model.marginal_critic == m0) == !marginal);
    CHECK((model.projection_critic == p0) == !projection);
    // the baseline trains no generator
    CHECK((model.generator == g0) == (m == Method::kBaseline));
  };
  check_gate(Method::kBaseline, false, false);
  check_gate(Method::kMB, true, false);
  check_gate(Method::kPB, false, true);
  check_gate(Method::kMBPB, true, true);
}

TEST_CASE("gradient isolation between model and critic steps") {
  Trainer trainer(data().obs, data().rct, quick(Method::kMBPB));
  std::vector<std::size_t> rows(50);
  std::iota(rows.begin(), rows.end(), 0);
  const Pairing pairing = trainer.draw_pairing();

  auto before = trainer.model();
  trainer.model_step(rows, pairing, 1.0);
  auto after = trainer.model();
  CHECK_FALSE(after.outcome == before.outcome);
  CHECK_FALSE(after.generator == before.generator);
  CHECK(after.marginal_critic == before.marginal_critic);
  CHECK(after.projection_critic == before.projection_critic);

  before = after;
  const double reg = trainer.critic_steps(rows, pairing, 3);
  after = trainer.model();
  CHECK(reg >= 0.0);
  CHECK(after.outcome == before.outcome);
  CHECK(after.generator == before.generator);
  CHECK_FALSE(after.marginal_critic == before.marginal_critic);
  CHECK_FALSE(after.projection_critic == before.projection_critic);
}

TEST_CASE("training input errors") {
  auto one_arm = data().obs;
  for (auto& t : one_arm.t) t = 1;
  one_arm.oracle.reset();
  CHECK_THROWS_AS(train(one_arm, data().rct, quick(Method::kBaseline)), DataError);

  RctOutcomes no_control = data().rct;
  no_control.control.clear();
  CHECK_THROWS_AS(train(data().obs, no_control, quick(Method::kMB)), DataError);
  // the baseline never touches the RCT
  CHECK_NOTHROW(train(data().obs, no_control, quick(Method::kBaseline, 2)));

  auto huge = data().obs;
  huge.oracle.reset();
  for (auto& y : huge.y) y = 1e200;
  try {
    train(huge, data().rct, quick(Method::kBaseline, 2));
    FAIL("expected divergence");
  } catch (const TrainingError& e) {
    CHECK(std::string(e.what()).find("epoch 0") != std::string::npos);
  }
}

TEST_CASE("prediction: zero nets, antisymmetry, Monte-Carlo spread, baseline invariance") {
  auto model = train(data().obs, data().rct, quick(Method::kMBPB, 4));
  const Tensor x = Tensor::column({0.8, 1.0, 1.2});

  const Tensor y1 = predict_potential_outcomes(model, x, 1, 30, 5);
  const Tensor y0 = predict_potential_outcomes(model, x, 0, 30, 5);
  const Tensor cate = predict_cate(model, x, 30, 5);
  for (std::size_t i = 0; i < 3; ++i) CHECK(cate[i] == y1[i] - y0[i]);
  // swapping the arms negates the effect
  for (std::size_t i = 0; i < 3; ++i) CHECK(y0[i] - y1[i] == -cate[i]);
  CHECK_THROWS_AS(predict_potential_outcomes(model, x, 2, 30, 5), std::invalid_argument);
  CHECK_THROWS_AS(predict_potential_outcomes(model, x, 1, 0, 5), std::invalid_argument);

  // spread of the estimate over seeds shrinks like 1/sqrt(mc)
  auto spread = [&](std::size_t mc) {
    std::vector<double> v;
    for (std::uint64_t s = 0; s < 200; ++s) v.push_back(predict_potential_outcomes(model, x, 1, mc, s)[1]);
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
    double ss = 0;
    for (double e : v) ss += (e - m) * (e - m);
    return std::sqrt(ss / (v.size() - 1));
  };
  const double ratio = spread(1) / spread(100);
  CHECK(ratio > 7.0);
  CHECK(ratio < 14.0);

  auto zero = model;
  zero.outcome.set_zero();
  const Tensor zc = predict_cate(zero, x, 10, 1);
  const Tensor z0 = predict_potential_outcomes(zero, x, 0, 10, 1);
  for (double v : zc.values()) CHECK(v == 0.0);
  for (double v : z0.values()) CHECK(v == 0.0);

  const auto base = train(data().obs, data().rct, quick(Method::kBaseline, 3));
  CHECK(predict_potential_outcomes(base, x, 1, 1, 0) == predict_potential_outcomes(base, x, 1, 500, 9));
}

TEST_CASE("checkpoint round trip is bit-identical") {
  const auto model = train(data().obs, data().rct, quick(Method::kMBPB, 4));
  const auto dir = testing::scratch_dir("checkpoint");
  save_model(dir.string(), model);
  const auto back = load_model(dir.string());
  CHECK(back.outcome == model.outcome);
  CHECK(back.generator == model.generator);
  CHECK(back.marginal_critic == model.marginal_critic);
  CHECK(back.projection_critic == model.projection_critic);
  CHECK(config_entries(back.config) == config_entries(model.config));
  REQUIRE(back.history.size() == model.history.size());
  CHECK(back.history.back().factual == model.history.back().factual);
  const Tensor x = Tensor::column({0.7, 1.3});
  CHECK(predict_cate(back, x, 25, 8) == predict_cate(model, x, 25, 8));
  CHECK_THROWS(load_model((dir / "missing").string()));
}

TEST_CASE("baseline on the case study fits the biased factual regression") {
  // full default schedule; the baseline is cheap
  const auto obs = gen_case_study(1000, 10);
  TrainConfig c;
  c.method = Method::kBaseline;
  c.seed = 1;
  const auto model = train(obs, {}, c);

  double first = 0, last = 0;
  for (int i = 0; i < 10; ++i) first += model.history[i].factual / 10;
  for (int i = 1800; i < 2000; ++i) last += model.history[i].factual / 200;
  CHECK(last < first);

  // arm-wise least squares on a huge sample is the oracle for E[Y | X, T = t]
  const auto big = gen_case_study(400000, 11);
  for (int t : {0, 1}) {
    double n = 0, sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < big.size(); ++i) {
      if (big.t[i] != t) continue;
      const double x = big.x[i], y = big.y[i];
      n += 1, sx += x, sy += y, sxx += x * x, sxy += x * y;
    }
    const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    const double icept = (sy - slope * sx) / n;
    const double factual = icept + slope * 1.0;
    const double fitted = predict_potential_outcomes(model, Tensor::column({1.0}), t, 1, 0)[0];
    const double truth = Dgp::case_study().conditional_mean(1.0, t);
    CAPTURE(t);
    // U shifts E[Y1 | X, T = 1] by 3 E[U | T = 1] and E[Y0 | X, T = 0] by -0.6 E[U | T = 0]
    CHECK(std::fabs(factual - truth) > (t ? 1.0 : 0.2));
    CHECK(std::fabs(fitted - factual) < 0.5 * std::fabs(fitted - truth));
  }
}
