#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "mbpb/adam.hpp"
#include "mbpb/balancing.hpp"
#include "mbpb/network.hpp"
#include "mbpb/tape.hpp"

using namespace mbpb;

TEST_CASE("forward: activation values at the reference points") {
  Tape tape;
  auto zero = tape.constant(Tensor::scalar(0.0));
  CHECK(tape.value(tape.logistic(zero)).item() == 0.5);
  CHECK(tape.value(tape.tanh(zero)).item() == 0.0);
  auto neg_zero = tape.constant(Tensor::scalar(-0.0));
  CHECK(tape.value(tape.elu(neg_zero)).item() == 0.0);
  CHECK(tape.value(tape.elu(tape.constant(Tensor::scalar(1.0)))).item() == 1.0);
  CHECK(tape.value(tape.elu(tape.constant(Tensor::scalar(-1.0)))).item() == doctest::Approx(std::expm1(-1.0)));
  CHECK(tape.value(tape.relu(tape.constant(Tensor::scalar(-2.0)))).item() == 0.0);
  CHECK(tape.value(tape.abs(tape.constant(Tensor::scalar(-2.5)))).item() == 2.5);
}

TEST_CASE("forward: affine and concat shapes") {
  Tape tape;
  auto x = tape.constant(Tensor(3, 2, {1, 2, 3, 4, 5, 6}));
  auto w = tape.constant(Tensor(2, 1, {1, -1}));
  auto b = tape.constant(Tensor(1, 1, {10}));
  const Tensor& y = tape.value(tape.affine(x, w, b));
  CHECK(y.rows() == 3);
  CHECK(y.cols() == 1);
  CHECK(y[0] == 9);
  CHECK(y[2] == 9);
  Var parts[] = {x, tape.affine(x, w, b)};
  CHECK(tape.value(tape.concat_cols(parts)).cols() == 3);
}

TEST_CASE("forward: shape mismatch names the operation") {
  Tape tape;
  auto a = tape.constant(Tensor(2, 1));
  auto b = tape.constant(Tensor(3, 1));
  try {
    tape.add(a, b);
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("add") != std::string::npos);
  }
  auto w = tape.constant(Tensor(4, 1));
  auto bias = tape.constant(Tensor(1, 1));
  CHECK_THROWS_AS(tape.affine(a, w, bias), ShapeError);
  CHECK_THROWS_AS(tape.mean(tape.constant(Tensor(0, 1))), ShapeError);
}

TEST_CASE("forward: identical inputs give bit-identical outputs") {
  std::mt19937_64 rng(3);
  const NetworkParams p = init_params(Role::kOutcome, outcome_architecture(2), 11);
  const Tensor x = testing::random_tensor(20, 4, rng);
  CHECK(evaluate(p, x) == evaluate(p, x));
}

TEST_CASE("backward: reference derivatives") {
  Tape tape;
  auto x = tape.parameter(Tensor::scalar(3.0));
  tape.backward(tape.square(x));
  CHECK(tape.grad(x).item() == 6.0);

  Tape t2;
  auto v = t2.parameter(Tensor(5, 1, {1, 2, 3, 4, 5}));
  t2.backward(t2.mean(v));
  const Tensor gv = t2.grad(v);
  for (double g : gv.values()) CHECK(g == doctest::Approx(0.2));
}

TEST_CASE("backward: misuse is rejected") {
  Tape empty;
  CHECK_THROWS_AS(empty.backward(Var{0}), TapeError);

  Tape tape;
  auto x = tape.parameter(Tensor::scalar(1.0));
  auto y = tape.square(x);
  CHECK_THROWS_AS(tape.grad(x), TapeError);  // before backward
  tape.backward(y);
  CHECK_THROWS_AS(tape.backward(y), TapeError);

  Tape vec;
  auto z = vec.parameter(Tensor(2, 1));
  CHECK_THROWS_AS(vec.backward(z), ShapeError);
  CHECK_THROWS_AS(vec.value(Var{99}), TapeError);
}

TEST_CASE("backward: constants carry no gradient") {
  Tape tape;
  auto c = tape.constant(Tensor::scalar(2.0));
  auto p = tape.parameter(Tensor::scalar(1.5));
  CHECK_FALSE(tape.requires_grad(c));
  tape.backward(tape.mul(c, p));
  CHECK(tape.grad(c).item() == 0.0);
  CHECK(tape.grad(p).item() == 2.0);
}

TEST_CASE("backward: every primitive matches central differences") {
  std::mt19937_64 rng(17);
  Tensor a = testing::random_tensor(4, 3, rng);
  Tensor b = testing::random_tensor(4, 3, rng);
  Tensor w = testing::random_tensor(3, 2, rng);
  Tensor bias = testing::random_tensor(1, 2, rng);
  // keep relu/abs arguments away from their kinks
  for (auto& v : a.values()) v += v >= 0 ? 0.1 : -0.1;
  for (auto& v : b.values()) v += v >= 0 ? 0.1 : -0.1;

  auto build = [&](Tape& t, Var va, Var vb, Var vw, Var vbias) {
    Var h = t.affine(t.add(va, t.scale(vb, 0.5)), vw, vbias);
    Var parts[] = {t.elu(h), t.tanh(h), t.logistic(h)};
    Var cat = t.concat_cols(parts);
    Var m = t.mul(t.relu(t.sub(va, vb)), t.abs(vb));
    Var s1 = t.mean(t.square(cat));
    Var s2 = t.mean(m);
    return t.add(s1, t.scale(s2, 3.0));
  };
  auto loss = [&] {
    Tape t;
    return t.value(build(t, t.constant(a), t.constant(b), t.constant(w), t.constant(bias))).item();
  };

  Tape tape;
  Var va = tape.parameter(a), vb = tape.parameter(b), vw = tape.parameter(w), vbias = tape.parameter(bias);
  tape.backward(build(tape, va, vb, vw, vbias));
  REQUIRE(tape.kink_margin() > 1e-3);
  std::pair<Tensor*, Var> all[] = {{&a, va}, {&b, vb}, {&w, vw}, {&bias, vbias}};
  for (auto& [tensor, var] : all) {
    const Tensor g = tape.grad(var);
    for (std::size_t i = 0; i < tensor->size(); ++i) {
      const double numeric = testing::central_difference(*tensor, i, loss);
      CHECK(testing::grad_close(g[i], numeric));
    }
  }
}

TEST_CASE("backward: full MB+PB loss on a 5-sample batch matches central differences") {
  std::mt19937_64 rng(5);
  NetworkParams gen = init_params(Role::kGenerator, generator_architecture(), 1);
  NetworkParams out = init_params(Role::kOutcome, outcome_architecture(2), 2);
  const NetworkParams mcrit = init_params(Role::kMarginalCritic, marginal_critic_architecture(), 3);
  const NetworkParams pcrit = init_params(Role::kProjectionCritic, projection_critic_architecture(2), 4);
  const Tensor x = testing::random_tensor(5, 2, rng);
  const Tensor noise = testing::random_tensor(5, 4, rng);
  const Tensor t = Tensor::column({1, 0, 1, 0, 0});
  const Tensor y = testing::random_tensor(5, 1, rng);
  RctOutcomes rct;
  rct.treated = {0.3, -1.2, 0.8};
  rct.control = {1.1, -0.4};
  const Pairing pairing{{0, 3, 4}, {2, 2}};

  auto run = [&](Tape& tape, BoundNetwork& bg, BoundNetwork& bo) {
    bg = bind(tape, gen, true);
    bo = bind(tape, out, true);
    auto bm = bind(tape, mcrit, false);
    auto bp = bind(tape, pcrit, false);
    Var vx = tape.constant(x);
    Var u = generator_forward(tape, gen, bg, tape.constant(noise));
    Var y1 = outcome_forward(tape, out, bo, vx, u, 1);
    Var y0 = outcome_forward(tape, out, bo, vx, u, 0);
    Var lf = factual_loss(tape, y1, y0, t, y);
    Var lm = marginal_loss(tape, y1, y0, rct, mcrit, bm);
    Var lp = projection_loss(tape, vx, y1, y0, rct, x, pairing, pcrit, bp);
    return total_loss(tape, lf, lm, lp, 7.0);
  };
  auto loss = [&] {
    Tape tape;
    BoundNetwork bg, bo;
    return tape.value(run(tape, bg, bo)).item();
  };

  Tape tape;
  BoundNetwork bg, bo;
  tape.backward(run(tape, bg, bo));
  const auto gg = gradients(tape, bg);
  const auto go = gradients(tape, bo);
  std::size_t checked = 0;
  for (std::size_t k = 0; k < gen.tensors.size(); ++k) {
    for (std::size_t i = 0; i < gen.tensors[k].size(); ++i, ++checked) {
      CHECK(testing::grad_close(gg[k][i], testing::central_difference(gen.tensors[k], i, loss)));
    }
  }
  for (std::size_t k = 0; k < out.tensors.size(); ++k) {
    for (std::size_t i = 0; i < out.tensors[k].size(); ++i, ++checked) {
      CHECK(testing::grad_close(go[k][i], testing::central_difference(out.tensors[k], i, loss)));
    }
  }
  CHECK(checked == gen.parameter_count() + out.parameter_count());
}

TEST_CASE("forward/backward: finite for inputs bounded by 1e6") {
  NetworkParams out = init_params(Role::kOutcome, outcome_architecture(1), 9);
  const NetworkParams pcrit = init_params(Role::kProjectionCritic, projection_critic_architecture(1), 4);
  Tape tape;
  auto bo = bind(tape, out, true);
  auto bp = bind(tape, pcrit, false);
  Var x = tape.constant(Tensor::column({1e6, -1e6, 0.0}));
  Var u = tape.constant(Tensor::column({-1e6, 1e6, 1e6}));
  Var y1 = outcome_forward(tape, out, bo, x, u, 1);
  Var g = critic_forward(tape, pcrit, bp, x);
  CHECK(tape.value(y1).all_finite());
  CHECK(tape.value(g).all_finite());
  tape.backward(tape.mean(tape.square(tape.mul(y1, g))));
  for (const auto& gr : gradients(tape, bo)) CHECK(gr.all_finite());
}

TEST_CASE("kink margin tracks the closest relu or abs argument") {
  Tape tape;
  CHECK(tape.kink_margin() == std::numeric_limits<double>::infinity());
  tape.relu(tape.constant(Tensor::column({0.5, -0.02})));
  tape.abs(tape.constant(Tensor::column({3.0})));
  CHECK(tape.kink_margin() == 0.02);
}

TEST_CASE("uninitialized tensors have the requested shape and are fully overwritten by ops") {
  Tensor u = Tensor::uninitialized(3, 4);
  CHECK(u.rows() == 3);
  CHECK(u.cols() == 4);
  CHECK(u.size() == 12);
  Tape tape;
  auto v = tape.constant(Tensor(3, 4, 2.0));
  const Tensor& s = tape.value(tape.add(v, v));
  for (double e : s.values()) CHECK(e == 4.0);
  CHECK_THROWS_AS(Tensor(2, 2, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST_CASE("adam: zero gradient leaves parameters and decays moments") {
  Tensor p = Tensor::column({1.0, -2.0});
  std::vector<Tensor> params{p};
  AdamState state = AdamState::like(params);
  state.first_moment[0] = Tensor::column({0.5, 0.5});
  state.second_moment[0] = Tensor::column({0.25, 0.25});
  const std::vector<Tensor> grads{Tensor::column({0.0, 0.0})};
  // a zero gradient with non-zero moments still moves params; from fresh state it must not
  AdamState fresh = AdamState::like(params);
  std::vector<Tensor> q{p};
  adam_step(q, grads, fresh, 1e-3);
  CHECK(q[0] == p);
  adam_step(params, grads, state, 1e-3);
  CHECK(state.first_moment[0][0] == doctest::Approx(0.45));
  CHECK(state.second_moment[0][0] == doctest::Approx(0.25 * 0.999));
  CHECK(state.step == 1);
}

TEST_CASE("adam: first step matches the bias-corrected formula") {
  std::vector<Tensor> params{Tensor::scalar(0.0)};
  const std::vector<Tensor> grads{Tensor::scalar(1.0)};
  AdamState state = AdamState::like(params);
  adam_step(params, grads, state, 0.001);
  // m_hat = 1, v_hat = 1
  CHECK(params[0].item() == doctest::Approx(-0.001 / (1.0 + 1e-8)).epsilon(1e-14));
  CHECK(state.step == 1);
  adam_step(params, grads, state, 0.001);
  CHECK(state.step == 2);
}

TEST_CASE("adam: deterministic, and non-finite gradients abort without mutation") {
  std::vector<Tensor> a{Tensor::column({0.3, 0.7})}, b = a;
  const std::vector<Tensor> grads{Tensor::column({0.1, -0.4})};
  AdamState sa = AdamState::like(a), sb = AdamState::like(b);
  adam_step(a, grads, sa, 1e-3);
  adam_step(b, grads, sb, 1e-3);
  CHECK(a[0] == b[0]);
  CHECK(sa.first_moment[0] == sb.first_moment[0]);

  const std::vector<Tensor> bad{Tensor::column({0.1, std::nan("")})};
  const Tensor before = a[0];
  CHECK_THROWS_AS(adam_step(a, bad, sa, 1e-3), NonFiniteGradient);
  CHECK(a[0] == before);
  CHECK(sa.step == 1);

  const std::vector<Tensor> wrong{Tensor::column({0.1})};
  CHECK_THROWS_AS(adam_step(a, wrong, sa, 1e-3), ShapeError);
}
