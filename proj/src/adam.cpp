#include "mbpb/adam.hpp"

#include <cmath>
#include <string>

namespace mbpb {

AdamState AdamState::like(std::span<const Tensor> params, AdamConstants constants) {
  AdamState state;
  state.constants = constants;
  for (const Tensor& p : params) {
    state.first_moment.emplace_back(p.rows(), p.cols());
    state.second_moment.emplace_back(p.rows(), p.cols());
  }
  return state;
}

void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state,
               double learning_rate) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size() ||
      params.size() != state.second_moment.size()) {
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " params, " +
                     std::to_string(grads.size()) + " grads, " +
                     std::to_string(state.first_moment.size()) + " moment slots");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].same_shape(grads[i]) || !params[i].same_shape(state.first_moment[i]) ||
        !params[i].same_shape(state.second_moment[i])) {
      throw ShapeError("adam_step: tensor " + std::to_string(i) + " has param " +
                       params[i].shape_string() + " grad " + grads[i].shape_string());
    }
    if (!grads[i].all_finite()) {
      throw NonFiniteGradient("adam_step: non-finite gradient in tensor " + std::to_string(i) +
                              " at step " + std::to_string(state.step + 1));
    }
  }

  const auto& c = state.constants;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(c.beta1, t);
  const double correction2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    double* p = params[i].data();
    const double* g = grads[i].data();
    double* m = state.first_moment[i].data();
    double* v = state.second_moment[i].data();
    for (std::size_t k = 0; k < params[i].size(); ++k) {
      m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
      v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
      const double m_hat = m[k] / correction1;
      const double v_hat = v[k] / correction2;
      p[k] -= learning_rate * m_hat / (std::sqrt(v_hat) + c.epsilon);
    }
  }
}

}  // namespace mbpb
