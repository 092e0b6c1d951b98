#pragma once

#include <optional>
#include <vector>

#include "mbpb/datagen.hpp"
#include "mbpb/network.hpp"
#include "mbpb/rng.hpp"
#include "mbpb/tape.hpp"

namespace mbpb {

/// Loss components of one model step. total = factual + alpha (marginal + projection).
struct LossBreakdown {
  double factual = 0.0;
  double marginal = 0.0;
  double projection = 0.0;
  double alpha = 0.0;

  double total() const { return factual + alpha * (marginal + projection); }
};

/// Constant alpha_start, linear ramp on [ramp_start, ramp_end], then alpha_end.
struct AlphaSchedule {
  double alpha_start = 0.01;
  double alpha_end = 100.0;
  int ramp_start = 1230;
  int ramp_end = 1430;
  int total_epochs = 2000;

  void validate() const;
};

double alpha_at(const AlphaSchedule& schedule, int epoch);

/// Observational row index paired with each RCT outcome, drawn uniformly
/// with replacement from [0, pool_size).
struct Pairing {
  std::vector<std::size_t> treated;
  std::vector<std::size_t> control;

  const std::vector<std::size_t>& arm(int t) const { return t == 1 ? treated : control; }
};

Pairing draw_pairing(const RctOutcomes& rct, std::size_t pool_size, Rng& rng);

/// Mean squared error of the factual prediction t * y1_hat + (1 - t) * y0_hat.
/// `t` and `y` are n x 1 columns.
Var factual_loss(Tape& tape, Var y1_hat, Var y0_hat, const Tensor& t, const Tensor& y);

/// Sum over arms of (mean critic(rct outcomes) - mean critic(predictions))^2.
Var marginal_loss(Tape& tape, Var y1_hat, Var y0_hat, const RctOutcomes& rct,
                  const NetworkParams& critic, const BoundNetwork& bound);

/// Sum over arms of (mean g(x_pool[pair(i)]) y_i - mean g(x_batch) y_hat)^2,
/// where the first mean runs over the arm's RCT outcomes.
Var projection_loss(Tape& tape, Var x_batch, Var y1_hat, Var y0_hat, const RctOutcomes& rct,
                    const Tensor& x_pool, const Pairing& pairing, const NetworkParams& critic,
                    const BoundNetwork& bound);

/// Same, with the pairing drawn from `seed`.
Var projection_loss(Tape& tape, Var x_batch, Var y1_hat, Var y0_hat, const RctOutcomes& rct,
                    const Tensor& x_pool, std::uint64_t seed, const NetworkParams& critic,
                    const BoundNetwork& bound);

/// Adversarial objective -(L_m + L_p); absent components count as zero.
Var critic_objective(Tape& tape, std::optional<Var> marginal, std::optional<Var> projection);

/// L_f + alpha (L_m + L_p) on the tape.
Var total_loss(Tape& tape, Var factual, std::optional<Var> marginal, std::optional<Var> projection,
               double alpha);

}  // namespace mbpb
