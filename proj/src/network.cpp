#include "mbpb/network.hpp"

#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "mbpb/text.hpp"

namespace mbpb {

namespace {

constexpr std::string_view kCheckpointMagic = "mbpb-network";
constexpr int kCheckpointVersion = 1;

Var apply_activation(Tape& tape, Var v, Activation a) {
  switch (a) {
    case Activation::kNone: return v;
    case Activation::kElu: return tape.elu(v);
    case Activation::kRelu: return tape.relu(v);
    case Activation::kTanh: return tape.tanh(v);
    case Activation::kLogistic: return tape.logistic(v);
  }
  return v;
}

void expect_role(const NetworkParams& params, Role role, std::string_view what) {
  if (params.role != role) {
    throw std::invalid_argument(std::string(what) + ": expected a " + std::string(to_string(role)) +
                                " network, got " + std::string(to_string(params.role)));
  }
}

}  // namespace

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::kNone: return "none";
    case Activation::kElu: return "elu";
    case Activation::kRelu: return "relu";
    case Activation::kTanh: return "tanh";
    case Activation::kLogistic: return "logistic";
  }
  return "none";
}

std::string_view to_string(Role r) {
  switch (r) {
    case Role::kGenerator: return "generator";
    case Role::kOutcome: return "outcome";
    case Role::kMarginalCritic: return "marginal-critic";
    case Role::kProjectionCritic: return "projection-critic";
  }
  return "outcome";
}

Activation parse_activation(std::string_view s) {
  for (auto a : {Activation::kNone, Activation::kElu, Activation::kRelu, Activation::kTanh,
                 Activation::kLogistic}) {
    if (to_string(a) == s) return a;
  }
  throw std::invalid_argument("unknown activation '" + std::string(s) + "'");
}

Role parse_role(std::string_view s) {
  for (auto r : {Role::kGenerator, Role::kOutcome, Role::kMarginalCritic, Role::kProjectionCritic}) {
    if (to_string(r) == s) return r;
  }
  throw std::invalid_argument("unknown network role '" + std::string(s) + "'");
}

void Architecture::validate() const {
  if (input_dim == 0) throw std::invalid_argument("architecture: input dimension must be positive");
  if (widths.empty()) throw std::invalid_argument("architecture: no layers");
  for (std::size_t w : widths) {
    if (w == 0) throw std::invalid_argument("architecture: layer widths must be positive");
  }
  if (output != Activation::kNone && output != Activation::kTanh &&
      output != Activation::kLogistic) {
    throw std::invalid_argument("architecture: output activation must be none, tanh or logistic");
  }
}

Architecture generator_architecture(std::size_t noise_dim) {
  return {noise_dim, {16, 16, 1}, Activation::kElu, Activation::kNone};
}

Architecture outcome_architecture(std::size_t covariate_dim) {
  return {covariate_dim + 2, {32, 32, 1}, Activation::kElu, Activation::kNone};
}

Architecture marginal_critic_architecture() {
  return {1, {8, 8, 1}, Activation::kRelu, Activation::kLogistic};
}

Architecture projection_critic_architecture(std::size_t covariate_dim) {
  return {covariate_dim, {8, 8, 1}, Activation::kRelu, Activation::kTanh};
}

std::size_t role_input_dim(Role role, std::size_t dim) {
  switch (role) {
    case Role::kGenerator: return dim;
    case Role::kOutcome: return dim + 2;
    case Role::kMarginalCritic: return 1;
    case Role::kProjectionCritic: return dim;
  }
  return dim;
}

std::size_t NetworkParams::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor& t : tensors) n += t.size();
  return n;
}

void NetworkParams::set_zero() {
  for (Tensor& t : tensors) t.fill(0.0);
}

void NetworkParams::validate() const {
  architecture.validate();
  if (tensors.size() != 2 * architecture.widths.size()) {
    throw ShapeError("network: expected " + std::to_string(2 * architecture.widths.size()) +
                     " tensors, got " + std::to_string(tensors.size()));
  }
  std::size_t in = architecture.input_dim;
  for (std::size_t k = 0; k < architecture.widths.size(); ++k) {
    const std::size_t out = architecture.widths[k];
    if (weight(k).rows() != in || weight(k).cols() != out || bias(k).rows() != 1 ||
        bias(k).cols() != out) {
      throw ShapeError("network: layer " + std::to_string(k) + " has weight " +
                       weight(k).shape_string() + " and bias " + bias(k).shape_string());
    }
    in = out;
  }
  if (architecture.widths.back() != 1) {
    throw ShapeError("network: output width must be 1");
  }
}

NetworkParams init_params(Role role, const Architecture& arch, Rng& rng) {
  arch.validate();
  NetworkParams params{role, arch, {}};
  std::size_t in = arch.input_dim;
  for (std::size_t out : arch.widths) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor w(in, out);
    Tensor b(1, out);
    for (double& v : w.values()) v = dist(rng);
    for (double& v : b.values()) v = dist(rng);
    params.tensors.push_back(std::move(w));
    params.tensors.push_back(std::move(b));
    in = out;
  }
  return params;
}

NetworkParams init_params(Role role, const Architecture& arch, std::uint64_t seed) {
  Rng rng(seed);
  return init_params(role, arch, rng);
}

BoundNetwork bind(Tape& tape, const NetworkParams& params, bool trainable) {
  BoundNetwork bound;
  bound.tensors.reserve(params.tensors.size());
  for (const Tensor& t : params.tensors) {
    bound.tensors.push_back(trainable ? tape.parameter(t) : tape.constant(t));
  }
  return bound;
}

std::vector<Tensor> gradients(const Tape& tape, const BoundNetwork& bound) {
  std::vector<Tensor> grads;
  grads.reserve(bound.tensors.size());
  for (Var v : bound.tensors) grads.push_back(tape.grad(v));
  return grads;
}

Var mlp_forward(Tape& tape, const NetworkParams& params, const BoundNetwork& bound, Var input) {
  const auto& arch = params.architecture;
  if (tape.value(input).cols() != arch.input_dim) {
    throw ShapeError(std::string(to_string(params.role)) + ": input has " +
                     std::to_string(tape.value(input).cols()) + " columns, network expects " +
                     std::to_string(arch.input_dim));
  }
  Var h = input;
  const std::size_t layers = arch.widths.size();
  for (std::size_t k = 0; k < layers; ++k) {
    h = tape.affine(h, bound.tensors[2 * k], bound.tensors[2 * k + 1]);
    h = apply_activation(tape, h, k + 1 == layers ? arch.output : arch.hidden);
  }
  return h;
}

Var generator_forward(Tape& tape, const NetworkParams& params, const BoundNetwork& bound,
                      Var noise) {
  expect_role(params, Role::kGenerator, "generator_forward");
  return mlp_forward(tape, params, bound, noise);
}

Var outcome_forward(Tape& tape, const NetworkParams& params, const BoundNetwork& bound, Var x,
                    Var u, int t) {
  expect_role(params, Role::kOutcome, "outcome_forward");
  if (t != 0 && t != 1) {
    throw std::invalid_argument("outcome_forward: treatment must be 0 or 1, got " +
                                std::to_string(t));
  }
  const std::size_t n = tape.value(x).rows();
  if (tape.value(u).rows() != n || tape.value(u).cols() != 1) {
    throw ShapeError("outcome_forward: pseudo-confounder " + tape.value(u).shape_string() +
                     " does not match " + std::to_string(n) + " rows");
  }
  const Var treatment = tape.constant(Tensor(n, 1, static_cast<double>(t)));
  const Var parts[] = {x, u, treatment};
  return mlp_forward(tape, params, bound, tape.concat_cols(parts));
}

Var critic_forward(Tape& tape, const NetworkParams& params, const BoundNetwork& bound, Var input) {
  if (params.role != Role::kMarginalCritic && params.role != Role::kProjectionCritic) {
    throw std::invalid_argument("critic_forward: not a critic network");
  }
  return mlp_forward(tape, params, bound, input);
}

Tensor evaluate(const NetworkParams& params, const Tensor& input) {
  Tape tape;
  const BoundNetwork bound = bind(tape, params, false);
  return tape.value(mlp_forward(tape, params, bound, tape.constant(input)));
}

void save_network(std::ostream& out, const NetworkParams& params) {
  params.validate();
  const auto& arch = params.architecture;
  out << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  out << "role " << to_string(params.role) << '\n';
  out << "input " << arch.input_dim << '\n';
  out << "hidden " << to_string(arch.hidden) << '\n';
  out << "output " << to_string(arch.output) << '\n';
  out << "widths";
  for (std::size_t w : arch.widths) out << ' ' << w;
  out << '\n';
  for (const Tensor& t : params.tensors) {
    out << "tensor " << t.rows() << ' ' << t.cols() << '\n';
    for (std::size_t r = 0; r < t.rows(); ++r) {
      for (std::size_t c = 0; c < t.cols(); ++c) {
        if (c > 0) out << ' ';
        out << exact_double(t(r, c));
      }
      out << '\n';
    }
  }
  out << "end\n";
}

NetworkParams load_network(std::istream& in) {
  auto fail = [](const std::string& msg) -> NetworkParams {
    throw std::runtime_error("network checkpoint: " + msg);
  };
  std::string word;
  int version = 0;
  if (!(in >> word >> version) || word != kCheckpointMagic) return fail("bad header");
  if (version != kCheckpointVersion) return fail("unsupported version " + std::to_string(version));

  NetworkParams params;
  std::string value;
  in >> word >> value;
  if (word != "role") return fail("expected 'role'");
  params.role = parse_role(value);
  in >> word >> params.architecture.input_dim;
  if (word != "input") return fail("expected 'input'");
  in >> word >> value;
  if (word != "hidden") return fail("expected 'hidden'");
  params.architecture.hidden = parse_activation(value);
  in >> word >> value;
  if (word != "output") return fail("expected 'output'");
  params.architecture.output = parse_activation(value);
  in >> word;
  if (word != "widths") return fail("expected 'widths'");
  std::string line;
  std::getline(in, line);
  for (const auto& w : split(trim(line), ' ')) {
    params.architecture.widths.push_back(static_cast<std::size_t>(parse_int(w)));
  }
  while (in >> word && word == "tensor") {
    std::size_t rows = 0;
    std::size_t cols = 0;
    in >> rows >> cols;
    Tensor t(rows, cols);
    for (double& v : t.values()) {
      in >> value;
      v = parse_double(value);
    }
    params.tensors.push_back(std::move(t));
  }
  if (word != "end") return fail("missing 'end' marker");
  params.validate();
  return params;
}

void save_network(const std::string& path, const NetworkParams& params) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  save_network(out, params);
}

NetworkParams load_network(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  return load_network(in);
}

}  // namespace mbpb
