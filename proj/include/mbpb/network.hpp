#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "mbpb/rng.hpp"
#include "mbpb/tape.hpp"
#include "mbpb/tensor.hpp"

namespace mbpb {

enum class Activation { kNone, kElu, kRelu, kTanh, kLogistic };

/// The four networks trained by the balancing method.
enum class Role {
  kGenerator,         // noise -> pseudo-confounder
  kOutcome,           // (x, pseudo-confounder, t) -> outcome, S-learner
  kMarginalCritic,    // outcome value -> [0, 1]
  kProjectionCritic,  // covariates -> [-1, 1]
};

std::string_view to_string(Activation a);
std::string_view to_string(Role r);
Activation parse_activation(std::string_view s);
Role parse_role(std::string_view s);

struct Architecture {
  std::size_t input_dim = 0;
  /// Width of every layer; the last entry is the output width.
  std::vector<std::size_t> widths;
  Activation hidden = Activation::kElu;
  Activation output = Activation::kNone;

  void validate() const;
  friend bool operator==(const Architecture&, const Architecture&) = default;
};

inline constexpr std::size_t kDefaultNoiseDim = 4;

Architecture generator_architecture(std::size_t noise_dim = kDefaultNoiseDim);
Architecture outcome_architecture(std::size_t covariate_dim);
Architecture marginal_critic_architecture();
Architecture projection_critic_architecture(std::size_t covariate_dim);

/// Required input width for a role given the covariate (or noise) dimension.
std::size_t role_input_dim(Role role, std::size_t dim);

/// Weights and biases of one MLP. `tensors` interleaves W0, b0, W1, b1, ...
/// with W_k of shape in_k x out_k and b_k of shape 1 x out_k.
struct NetworkParams {
  Role role = Role::kOutcome;
  Architecture architecture;
  std::vector<Tensor> tensors;

  std::size_t layer_count() const { return architecture.widths.size(); }
  const Tensor& weight(std::size_t layer) const { return tensors[2 * layer]; }
  const Tensor& bias(std::size_t layer) const { return tensors[2 * layer + 1]; }
  std::size_t parameter_count() const;
  void set_zero();
  void validate() const;

  friend bool operator==(const NetworkParams&, const NetworkParams&) = default;
};

/// Uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for
/// weights and biases.
NetworkParams init_params(Role role, const Architecture& arch, Rng& rng);
NetworkParams init_params(Role role, const Architecture& arch, std::uint64_t seed);

/// Parameters placed on a tape.
struct BoundNetwork {
  std::vector<Var> tensors;
};

BoundNetwork bind(Tape& tape, const NetworkParams& params, bool trainable);
std::vector<Tensor> gradients(const Tape& tape, const BoundNetwork& bound);

/// Generic MLP forward pass on the tape.
Var mlp_forward(Tape& tape, const NetworkParams& params, const BoundNetwork& bound, Var input);

/// noise: n x l -> pseudo-confounder: n x 1.
Var generator_forward(Tape& tape, const NetworkParams& params, const BoundNetwork& bound,
                      Var noise);
/// Potential-outcome prediction mu(x, u, t): x n x d, u n x 1, t in {0, 1}.
Var outcome_forward(Tape& tape, const NetworkParams& params, const BoundNetwork& bound, Var x,
                    Var u, int t);
Var critic_forward(Tape& tape, const NetworkParams& params, const BoundNetwork& bound, Var input);

/// Tape-free evaluation convenience.
Tensor evaluate(const NetworkParams& params, const Tensor& input);

/// Versioned text checkpoint. Values are written in shortest round-trip
/// decimal form, so save -> load is exact.
void save_network(std::ostream& out, const NetworkParams& params);
NetworkParams load_network(std::istream& in);
void save_network(const std::string& path, const NetworkParams& params);
NetworkParams load_network(const std::string& path);

}  // namespace mbpb
