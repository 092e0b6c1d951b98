#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "mbpb/tensor.hpp"

namespace mbpb {

struct AdamConstants {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Moment accumulators for one group of parameter tensors.
struct AdamState {
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::int64_t step = 0;
  AdamConstants constants;

  /// Zeroed accumulators shaped like `params`.
  static AdamState like(std::span<const Tensor> params, AdamConstants constants = {});
};

/// One bias-corrected Adam update, in place. Throws NonFiniteGradient (and
/// leaves params and state untouched) if any gradient entry is not finite.
void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state,
               double learning_rate);

}  // namespace mbpb
