#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mbpb/adam.hpp"
#include "mbpb/balancing.hpp"
#include "mbpb/datagen.hpp"
#include "mbpb/network.hpp"

namespace mbpb {

enum class Method { kBaseline, kMB, kPB, kMBPB };

std::string_view to_string(Method m);
Method parse_method(std::string_view s);
bool uses_marginal(Method m);
bool uses_projection(Method m);

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  Method method = Method::kMBPB;
  int epochs = 2000;
  double learning_rate = 0.001;
  std::size_t batch_size = 256;
  AlphaSchedule alpha;
  /// Critic ascent steps per model step before / from the ramp start.
  int inner_steps_low = 5;
  int inner_steps_high = 50;
  std::size_t noise_dim = kDefaultNoiseDim;
  std::size_t mc_samples = 100;
  std::uint64_t seed = 0;
  /// Draw each training row's noise once before training (true) or redraw
  /// it for every batch (false).
  bool fixed_noise = true;

  /// Throws std::invalid_argument on non-positive counts or a schedule that
  /// does not cover `epochs`.
  void validate() const;
};

/// Critic steps to run in `epoch`.
int inner_balancing_steps(const TrainConfig& config, int epoch);

struct TrainedModel {
  NetworkParams generator;
  NetworkParams outcome;
  NetworkParams marginal_critic;
  NetworkParams projection_critic;
  TrainConfig config;
  /// One entry per epoch, averaged over the epoch's mini-batches.
  std::vector<LossBreakdown> history;
};

/// Per-epoch observer; receives the epoch index and its loss breakdown.
using EpochCallback = std::function<void(int, const LossBreakdown&)>;

/// Stateful runner of the alternating minimizer / critic schedule. Exposes the
/// individual steps so callers can inspect or drive them.
class Trainer {
 public:
  Trainer(TabularDataset obs, RctOutcomes rct, TrainConfig config);

  /// Runs all remaining epochs.
  TrainedModel run(const EpochCallback& on_epoch = {});

  LossBreakdown run_epoch(int epoch);

  /// One Adam step on outcome and generator parameters for the given rows.
  LossBreakdown model_step(const std::vector<std::size_t>& rows, const Pairing& pairing,
                           double alpha);
  /// `count` Adam steps on the critics, ascending L_m + L_p for the given rows.
  /// Returns the regularizer value before the last step.
  double critic_steps(const std::vector<std::size_t>& rows, const Pairing& pairing, int count);

  Pairing draw_pairing();
  const TrainedModel& model() const { return model_; }
  const TabularDataset& observational() const { return obs_; }

 private:
  Tensor noise_rows(const std::vector<std::size_t>& rows);
  Var pseudo_confounder(Tape& tape, const BoundNetwork& generator, const std::vector<std::size_t>& rows,
                        const Tensor& noise);

  TabularDataset obs_;
  RctOutcomes rct_;
  TrainedModel model_;
  Tensor noise_;
  Tensor t_col_;
  Tensor y_col_;
  AdamState generator_adam_;
  AdamState outcome_adam_;
  AdamState marginal_adam_;
  AdamState projection_adam_;
  Rng shuffle_rng_;
  Rng pairing_rng_;
  Rng noise_rng_;
  int next_epoch_ = 0;
};

TrainedModel train(const TabularDataset& obs, const RctOutcomes& rct, const TrainConfig& config,
                   const EpochCallback& on_epoch = {});

/// Monte-Carlo estimate of E[mu(x, psi(eta), t)] over `mc_samples` noise
/// draws, shared across rows. Returns an n x 1 column.
Tensor predict_potential_outcomes(const TrainedModel& model, const Tensor& x, int t,
                                  std::size_t mc_samples, std::uint64_t seed);

/// Difference of the two potential-outcome estimates under shared noise draws.
Tensor predict_cate(const TrainedModel& model, const Tensor& x, std::size_t mc_samples,
                    std::uint64_t seed);

/// Checkpoint directory: four network files, manifest.txt and loss_history.csv.
void save_model(const std::string& dir, const TrainedModel& model);
TrainedModel load_model(const std::string& dir);

/// Key-value lines describing a TrainConfig (also used inside run manifests).
std::vector<std::pair<std::string, std::string>> config_entries(const TrainConfig& config);
/// Applies one key; returns false when the key is not a TrainConfig key.
bool apply_config_entry(TrainConfig& config, const std::string& key, const std::string& value);

void write_loss_history(const std::string& path, const std::vector<LossBreakdown>& history);

}  // namespace mbpb
