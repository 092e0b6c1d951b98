#include "mbpb/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "mbpb/text.hpp"

namespace mbpb {

std::string_view to_string(Method m) {
  switch (m) {
    case Method::kBaseline: return "baseline";
    case Method::kMB: return "MB";
    case Method::kPB: return "PB";
    case Method::kMBPB: return "MB+PB";
  }
  return "baseline";
}

Method parse_method(std::string_view s) {
  for (auto m : {Method::kBaseline, Method::kMB, Method::kPB, Method::kMBPB}) {
    if (to_string(m) == s) return m;
  }
  if (s == "mb") return Method::kMB;
  if (s == "pb") return Method::kPB;
  if (s == "mb+pb" || s == "mbpb") return Method::kMBPB;
  throw std::invalid_argument("unknown method '" + std::string(s) + "'");
}

bool uses_marginal(Method m) { return m == Method::kMB || m == Method::kMBPB; }
bool uses_projection(Method m) { return m == Method::kPB || m == Method::kMBPB; }

void TrainConfig::validate() const {
  if (epochs <= 0) throw std::invalid_argument("train config: epochs must be positive");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("train config: learning rate must be positive");
  if (batch_size == 0) throw std::invalid_argument("train config: batch size must be positive");
  if (inner_steps_low < 0 || inner_steps_high < 0) {
    throw std::invalid_argument("train config: inner step counts must be non-negative");
  }
  if (noise_dim == 0) throw std::invalid_argument("train config: noise dimension must be positive");
  if (mc_samples == 0) throw std::invalid_argument("train config: mc_samples must be positive");
  alpha.validate();
  if (alpha.total_epochs != epochs) {
    throw std::invalid_argument("train config: alpha schedule covers " +
                                std::to_string(alpha.total_epochs) + " epochs, training runs " +
                                std::to_string(epochs));
  }
}

int inner_balancing_steps(const TrainConfig& config, int epoch) {
  return epoch < config.alpha.ramp_start ? config.inner_steps_low : config.inner_steps_high;
}

namespace {

Tensor zeros_column(std::size_t n) { return Tensor(n, 1); }

void check_finite(const LossBreakdown& loss, int epoch) {
  if (!std::isfinite(loss.factual) || !std::isfinite(loss.marginal) ||
      !std::isfinite(loss.projection)) {
    throw TrainingError("training diverged: non-finite loss at epoch " + std::to_string(epoch));
  }
}

}  // namespace

Trainer::Trainer(TabularDataset obs, RctOutcomes rct, TrainConfig config)
    : obs_(std::move(obs)), rct_(std::move(rct)) {
  config.validate();
  obs_.validate();
  if (config.method != Method::kBaseline) rct_.validate();

  const std::size_t d = obs_.dim();
  model_.config = config;
  model_.generator = init_params(Role::kGenerator, generator_architecture(config.noise_dim),
                                 derive_seed(config.seed, Stream::kInit, 0));
  model_.outcome = init_params(Role::kOutcome, outcome_architecture(d),
                               derive_seed(config.seed, Stream::kInit, 1));
  model_.marginal_critic = init_params(Role::kMarginalCritic, marginal_critic_architecture(),
                                       derive_seed(config.seed, Stream::kInit, 2));
  model_.projection_critic = init_params(Role::kProjectionCritic, projection_critic_architecture(d),
                                         derive_seed(config.seed, Stream::kInit, 3));

  generator_adam_ = AdamState::like(model_.generator.tensors);
  outcome_adam_ = AdamState::like(model_.outcome.tensors);
  marginal_adam_ = AdamState::like(model_.marginal_critic.tensors);
  projection_adam_ = AdamState::like(model_.projection_critic.tensors);

  shuffle_rng_ = make_rng(config.seed, Stream::kShuffle);
  pairing_rng_ = make_rng(config.seed, Stream::kPairing);
  noise_rng_ = make_rng(config.seed, Stream::kNoise);

  noise_ = Tensor(obs_.size(), config.noise_dim);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& v : noise_.values()) v = normal(noise_rng_);
  t_col_ = obs_.t_column();
  y_col_ = obs_.y_column();
}

Pairing Trainer::draw_pairing() { return mbpb::draw_pairing(rct_, obs_.size(), pairing_rng_); }

Tensor Trainer::noise_rows(const std::vector<std::size_t>& rows) {
  if (model_.config.fixed_noise) return noise_.gather_rows(rows);
  Tensor fresh(rows.size(), model_.config.noise_dim);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& v : fresh.values()) v = normal(noise_rng_);
  return fresh;
}

Var Trainer::pseudo_confounder(Tape& tape, const BoundNetwork& generator,
                               const std::vector<std::size_t>& rows, const Tensor& noise) {
  if (model_.config.method == Method::kBaseline) return tape.constant(zeros_column(rows.size()));
  return generator_forward(tape, model_.generator, generator, tape.constant(noise));
}

LossBreakdown Trainer::model_step(const std::vector<std::size_t>& rows, const Pairing& pairing,
                                  double alpha) {
  const Method method = model_.config.method;
  const bool baseline = method == Method::kBaseline;
  const Tensor noise = baseline ? Tensor() : noise_rows(rows);

  Tape tape;
  const BoundNetwork gen = bind(tape, model_.generator, !baseline);
  const BoundNetwork mu = bind(tape, model_.outcome, true);
  const Var x = tape.constant(obs_.x.gather_rows(rows));
  const Var u = pseudo_confounder(tape, gen, rows, noise);
  const Var y1 = outcome_forward(tape, model_.outcome, mu, x, u, 1);
  const Var y0 = outcome_forward(tape, model_.outcome, mu, x, u, 0);
  const Var lf = factual_loss(tape, y1, y0, t_col_.gather_rows(rows), y_col_.gather_rows(rows));

  std::optional<Var> lm;
  std::optional<Var> lp;
  if (uses_marginal(method)) {
    const BoundNetwork g = bind(tape, model_.marginal_critic, false);
    lm = marginal_loss(tape, y1, y0, rct_, model_.marginal_critic, g);
  }
  if (uses_projection(method)) {
    const BoundNetwork g = bind(tape, model_.projection_critic, false);
    lp = projection_loss(tape, x, y1, y0, rct_, obs_.x, pairing, model_.projection_critic, g);
  }
  const Var total = total_loss(tape, lf, lm, lp, alpha);

  LossBreakdown loss;
  loss.factual = tape.value(lf).item();
  loss.marginal = lm ? tape.value(*lm).item() : 0.0;
  loss.projection = lp ? tape.value(*lp).item() : 0.0;
  loss.alpha = alpha;
  if (!std::isfinite(tape.value(total).item())) return loss;

  tape.backward(total);
  const double lr = model_.config.learning_rate;
  adam_step(model_.outcome.tensors, gradients(tape, mu), outcome_adam_, lr);
  if (!baseline) adam_step(model_.generator.tensors, gradients(tape, gen), generator_adam_, lr);
  return loss;
}

double Trainer::critic_steps(const std::vector<std::size_t>& rows, const Pairing& pairing,
                             int count) {
  const Method method = model_.config.method;
  if (method == Method::kBaseline || count <= 0) return 0.0;

  // Predictions do not depend on critic parameters; evaluate them once.
  Tensor x_rows = obs_.x.gather_rows(rows);
  Tensor y1_values;
  Tensor y0_values;
  {
    Tape tape;
    const BoundNetwork gen = bind(tape, model_.generator, false);
    const BoundNetwork mu = bind(tape, model_.outcome, false);
    const Tensor noise = noise_rows(rows);
    const Var x = tape.constant(x_rows);
    const Var u = pseudo_confounder(tape, gen, rows, noise);
    y1_values = tape.value(outcome_forward(tape, model_.outcome, mu, x, u, 1));
    y0_values = tape.value(outcome_forward(tape, model_.outcome, mu, x, u, 0));
  }

  double last = 0.0;
  const double lr = model_.config.learning_rate;
  for (int step = 0; step < count; ++step) {
    Tape tape;
    const Var x = tape.constant(x_rows);
    const Var y1 = tape.constant(y1_values);
    const Var y0 = tape.constant(y0_values);
    std::optional<Var> lm;
    std::optional<Var> lp;
    std::optional<BoundNetwork> gm;
    std::optional<BoundNetwork> gp;
    if (uses_marginal(method)) {
      gm = bind(tape, model_.marginal_critic, true);
      lm = marginal_loss(tape, y1, y0, rct_, model_.marginal_critic, *gm);
    }
    if (uses_projection(method)) {
      gp = bind(tape, model_.projection_critic, true);
      lp = projection_loss(tape, x, y1, y0, rct_, obs_.x, pairing, model_.projection_critic, *gp);
    }
    const Var objective = critic_objective(tape, lm, lp);
    last = -tape.value(objective).item();
    tape.backward(objective);
    if (gm) adam_step(model_.marginal_critic.tensors, gradients(tape, *gm), marginal_adam_, lr);
    if (gp) adam_step(model_.projection_critic.tensors, gradients(tape, *gp), projection_adam_, lr);
  }
  return last;
}

LossBreakdown Trainer::run_epoch(int epoch) {
  const TrainConfig& config = model_.config;
  const double alpha = alpha_at(config.alpha, epoch);
  const int inner = inner_balancing_steps(config, epoch);

  std::vector<std::size_t> order(obs_.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), shuffle_rng_);

  LossBreakdown mean;
  mean.alpha = alpha;
  std::size_t batches = 0;
  try {
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                          order.begin() + static_cast<std::ptrdiff_t>(end));
      const Pairing pairing = config.method == Method::kBaseline ? Pairing{} : draw_pairing();
      const LossBreakdown loss = model_step(rows, pairing, alpha);
      check_finite(loss, epoch);
      critic_steps(rows, pairing, inner);
      mean.factual += loss.factual;
      mean.marginal += loss.marginal;
      mean.projection += loss.projection;
      ++batches;
    }
  } catch (const NonFiniteGradient& e) {
    throw TrainingError("training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
  }
  const double b = static_cast<double>(batches);
  mean.factual /= b;
  mean.marginal /= b;
  mean.projection /= b;
  return mean;
}

TrainedModel Trainer::run(const EpochCallback& on_epoch) {
  for (; next_epoch_ < model_.config.epochs; ++next_epoch_) {
    const LossBreakdown loss = run_epoch(next_epoch_);
    model_.history.push_back(loss);
    if (on_epoch) on_epoch(next_epoch_, loss);
  }
  return model_;
}

TrainedModel train(const TabularDataset& obs, const RctOutcomes& rct, const TrainConfig& config,
                   const EpochCallback& on_epoch) {
  Trainer trainer(obs, rct, config);
  return trainer.run(on_epoch);
}

Tensor predict_potential_outcomes(const TrainedModel& model, const Tensor& x, int t,
                                  std::size_t mc_samples, std::uint64_t seed) {
  if (t != 0 && t != 1) throw std::invalid_argument("predict: treatment must be 0 or 1");
  if (mc_samples == 0) throw std::invalid_argument("predict: mc_samples must be positive");
  const std::size_t n = x.rows();
  Tape tape;
  const BoundNetwork mu = bind(tape, model.outcome, false);
  const Var xv = tape.constant(x);
  if (model.config.method == Method::kBaseline) {
    return tape.value(outcome_forward(tape, model.outcome, mu, xv, tape.constant(zeros_column(n)), t));
  }

  Rng rng = make_rng(seed, Stream::kInference);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor noise(mc_samples, model.generator.architecture.input_dim);
  for (double& v : noise.values()) v = normal(rng);
  const Tensor u = evaluate(model.generator, noise);

  Tensor sum(n, 1);
  for (std::size_t k = 0; k < mc_samples; ++k) {
    const Var uk = tape.constant(Tensor(n, 1, u[k]));
    const Tensor& pred = tape.value(outcome_forward(tape, model.outcome, mu, xv, uk, t));
    for (std::size_t i = 0; i < n; ++i) sum[i] += pred[i];
  }
  for (double& v : sum.values()) v /= static_cast<double>(mc_samples);
  return sum;
}

Tensor predict_cate(const TrainedModel& model, const Tensor& x, std::size_t mc_samples,
                    std::uint64_t seed) {
  Tensor y1 = predict_potential_outcomes(model, x, 1, mc_samples, seed);
  const Tensor y0 = predict_potential_outcomes(model, x, 0, mc_samples, seed);
  for (std::size_t i = 0; i < y1.size(); ++i) y1[i] -= y0[i];
  return y1;
}

std::vector<std::pair<std::string, std::string>> config_entries(const TrainConfig& c) {
  return {
      {"method", std::string(to_string(c.method))},
      {"epochs", std::to_string(c.epochs)},
      {"learning_rate", exact_double(c.learning_rate)},
      {"batch_size", std::to_string(c.batch_size)},
      {"alpha_start", exact_double(c.alpha.alpha_start)},
      {"alpha_end", exact_double(c.alpha.alpha_end)},
      {"ramp_start", std::to_string(c.alpha.ramp_start)},
      {"ramp_end", std::to_string(c.alpha.ramp_end)},
      {"inner_steps_low", std::to_string(c.inner_steps_low)},
      {"inner_steps_high", std::to_string(c.inner_steps_high)},
      {"noise_dim", std::to_string(c.noise_dim)},
      {"mc_samples", std::to_string(c.mc_samples)},
      {"seed", std::to_string(c.seed)},
      {"fixed_noise", c.fixed_noise ? "true" : "false"},
  };
}

namespace {

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("not a boolean: '" + v + "'");
}

}  // namespace

bool apply_config_entry(TrainConfig& c, const std::string& key, const std::string& value) {
  if (key == "method") c.method = parse_method(value);
  else if (key == "epochs") {
    c.epochs = static_cast<int>(parse_int(value));
    c.alpha.total_epochs = c.epochs;
  } else if (key == "learning_rate") c.learning_rate = parse_double(value);
  else if (key == "batch_size") c.batch_size = static_cast<std::size_t>(parse_int(value));
  else if (key == "alpha_start") c.alpha.alpha_start = parse_double(value);
  else if (key == "alpha_end") c.alpha.alpha_end = parse_double(value);
  else if (key == "ramp_start") c.alpha.ramp_start = static_cast<int>(parse_int(value));
  else if (key == "ramp_end") c.alpha.ramp_end = static_cast<int>(parse_int(value));
  else if (key == "inner_steps_low") c.inner_steps_low = static_cast<int>(parse_int(value));
  else if (key == "inner_steps_high") c.inner_steps_high = static_cast<int>(parse_int(value));
  else if (key == "noise_dim") c.noise_dim = static_cast<std::size_t>(parse_int(value));
  else if (key == "mc_samples") c.mc_samples = static_cast<std::size_t>(parse_int(value));
  else if (key == "seed") c.seed = static_cast<std::uint64_t>(parse_int(value));
  else if (key == "fixed_noise") c.fixed_noise = parse_bool(value);
  else return false;
  return true;
}

void write_loss_history(const std::string& path, const std::vector<LossBreakdown>& history) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "epoch,alpha,factual,marginal,projection,total\n";
  for (std::size_t e = 0; e < history.size(); ++e) {
    const auto& h = history[e];
    out << e << ',' << exact_double(h.alpha) << ',' << exact_double(h.factual) << ','
        << exact_double(h.marginal) << ',' << exact_double(h.projection) << ','
        << exact_double(h.total()) << '\n';
  }
}

void save_model(const std::string& dir, const TrainedModel& model) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  save_network((fs::path(dir) / "generator.net").string(), model.generator);
  save_network((fs::path(dir) / "outcome.net").string(), model.outcome);
  save_network((fs::path(dir) / "marginal_critic.net").string(), model.marginal_critic);
  save_network((fs::path(dir) / "projection_critic.net").string(), model.projection_critic);
  std::ofstream manifest(fs::path(dir) / "manifest.txt");
  if (!manifest) throw std::runtime_error("cannot write manifest in " + dir);
  for (const auto& [k, v] : config_entries(model.config)) manifest << k << " = " << v << '\n';
  write_loss_history((fs::path(dir) / "loss_history.csv").string(), model.history);
}

TrainedModel load_model(const std::string& dir) {
  namespace fs = std::filesystem;
  TrainedModel model;
  model.generator = load_network((fs::path(dir) / "generator.net").string());
  model.outcome = load_network((fs::path(dir) / "outcome.net").string());
  model.marginal_critic = load_network((fs::path(dir) / "marginal_critic.net").string());
  model.projection_critic = load_network((fs::path(dir) / "projection_critic.net").string());

  std::ifstream manifest(fs::path(dir) / "manifest.txt");
  if (!manifest) throw std::runtime_error("cannot read manifest in " + dir);
  std::string line;
  while (std::getline(manifest, line)) {
    const auto eq = line.find('=');
    if (trim(line).empty() || line.front() == '#' || eq == std::string::npos) continue;
    const std::string key(trim(std::string_view(line).substr(0, eq)));
    const std::string value(trim(std::string_view(line).substr(eq + 1)));
    apply_config_entry(model.config, key, value);
  }

  std::ifstream hist(fs::path(dir) / "loss_history.csv");
  if (hist && std::getline(hist, line)) {
    while (std::getline(hist, line)) {
      const auto f = split(line, ',');
      if (f.size() != 6) continue;
      LossBreakdown b;
      b.alpha = parse_double(f[1]);
      b.factual = parse_double(f[2]);
      b.marginal = parse_double(f[3]);
      b.projection = parse_double(f[4]);
      model.history.push_back(b);
    }
  }
  return model;
}

}  // namespace mbpb
