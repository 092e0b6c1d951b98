#include "mbpb/balancing.hpp"

#include <stdexcept>
#include <string>

namespace mbpb {

void AlphaSchedule::validate() const {
  if (!(alpha_start > 0.0 && alpha_start <= alpha_end)) {
    throw std::invalid_argument("alpha schedule: need 0 < alpha_start <= alpha_end");
  }
  if (!(0 <= ramp_start && ramp_start < ramp_end && ramp_end <= total_epochs)) {
    throw std::invalid_argument("alpha schedule: need 0 <= ramp_start < ramp_end <= total_epochs");
  }
}

double alpha_at(const AlphaSchedule& schedule, int epoch) {
  if (epoch < 0 || epoch >= schedule.total_epochs) {
    throw std::out_of_range("alpha_at: epoch " + std::to_string(epoch) + " outside [0, " +
                            std::to_string(schedule.total_epochs) + ")");
  }
  if (epoch < schedule.ramp_start) return schedule.alpha_start;
  if (epoch >= schedule.ramp_end) return schedule.alpha_end;
  const double frac = static_cast<double>(epoch - schedule.ramp_start) /
                      static_cast<double>(schedule.ramp_end - schedule.ramp_start);
  return schedule.alpha_start + frac * (schedule.alpha_end - schedule.alpha_start);
}

Pairing draw_pairing(const RctOutcomes& rct, std::size_t pool_size, Rng& rng) {
  if (pool_size == 0) throw std::invalid_argument("draw_pairing: empty observational pool");
  std::uniform_int_distribution<std::size_t> pick(0, pool_size - 1);
  Pairing p;
  p.treated.reserve(rct.treated.size());
  p.control.reserve(rct.control.size());
  for (std::size_t i = 0; i < rct.treated.size(); ++i) p.treated.push_back(pick(rng));
  for (std::size_t i = 0; i < rct.control.size(); ++i) p.control.push_back(pick(rng));
  return p;
}

Var factual_loss(Tape& tape, Var y1_hat, Var y0_hat, const Tensor& t, const Tensor& y) {
  if (y.rows() == 0) throw std::invalid_argument("factual_loss: empty batch");
  Tensor control_mask(t.rows(), 1);
  for (std::size_t i = 0; i < t.rows(); ++i) control_mask[i] = 1.0 - t[i];
  const Var treated = tape.mul(y1_hat, tape.constant(t));
  const Var control = tape.mul(y0_hat, tape.constant(std::move(control_mask)));
  const Var residual = tape.sub(tape.add(treated, control), tape.constant(y));
  return tape.mean(tape.square(residual));
}

namespace {

void require_arms(const RctOutcomes& rct, const char* what) {
  if (rct.treated.empty() || rct.control.empty()) {
    throw std::invalid_argument(std::string(what) + ": RCT arm is empty");
  }
}

}  // namespace

Var marginal_loss(Tape& tape, Var y1_hat, Var y0_hat, const RctOutcomes& rct,
                  const NetworkParams& critic, const BoundNetwork& bound) {
  require_arms(rct, "marginal_loss");
  if (tape.value(y1_hat).rows() == 0) throw std::invalid_argument("marginal_loss: empty batch");
  Var sum{};
  for (int t : {1, 0}) {
    const Var rct_scores = critic_forward(tape, critic, bound, tape.constant(Tensor::column(rct.arm(t))));
    const Var obs_scores = critic_forward(tape, critic, bound, t == 1 ? y1_hat : y0_hat);
    const Var gap = tape.square(tape.sub(tape.mean(rct_scores), tape.mean(obs_scores)));
    sum = t == 1 ? gap : tape.add(sum, gap);
  }
  return sum;
}

Var projection_loss(Tape& tape, Var x_batch, Var y1_hat, Var y0_hat, const RctOutcomes& rct,
                    const Tensor& x_pool, const Pairing& pairing, const NetworkParams& critic,
                    const BoundNetwork& bound) {
  require_arms(rct, "projection_loss");
  if (tape.value(x_batch).rows() == 0) throw std::invalid_argument("projection_loss: empty batch");
  const Var g_batch = critic_forward(tape, critic, bound, x_batch);
  Var sum{};
  for (int t : {1, 0}) {
    const auto& ys = rct.arm(t);
    const auto& rows = pairing.arm(t);
    if (rows.size() != ys.size()) throw std::invalid_argument("projection_loss: pairing size mismatch");
    const Var g_paired = critic_forward(tape, critic, bound, tape.constant(x_pool.gather_rows(rows)));
    const Var rct_term = tape.mean(tape.mul(g_paired, tape.constant(Tensor::column(ys))));
    const Var obs_term = tape.mean(tape.mul(g_batch, t == 1 ? y1_hat : y0_hat));
    const Var gap = tape.square(tape.sub(rct_term, obs_term));
    sum = t == 1 ? gap : tape.add(sum, gap);
  }
  return sum;
}

Var projection_loss(Tape& tape, Var x_batch, Var y1_hat, Var y0_hat, const RctOutcomes& rct,
                    const Tensor& x_pool, std::uint64_t seed, const NetworkParams& critic,
                    const BoundNetwork& bound) {
  Rng rng = make_rng(seed, Stream::kPairing);
  const Pairing pairing = draw_pairing(rct, x_pool.rows(), rng);
  return projection_loss(tape, x_batch, y1_hat, y0_hat, rct, x_pool, pairing, critic, bound);
}

Var critic_objective(Tape& tape, std::optional<Var> marginal, std::optional<Var> projection) {
  if (!marginal && !projection) throw std::invalid_argument("critic_objective: no active regularizer");
  Var reg = marginal && projection ? tape.add(*marginal, *projection) : (marginal ? *marginal : *projection);
  return tape.scale(reg, -1.0);
}

Var total_loss(Tape& tape, Var factual, std::optional<Var> marginal, std::optional<Var> projection,
               double alpha) {
  if (!marginal && !projection) return factual;
  Var reg = marginal && projection ? tape.add(*marginal, *projection) : (marginal ? *marginal : *projection);
  return tape.add(factual, tape.scale(reg, alpha));
}

}  // namespace mbpb
