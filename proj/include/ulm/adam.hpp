#pragma once

#include "ulm/types.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace ulm {

/// First/second moment state for one parameter block.
template <typename Scalar>
struct AdamState {
  VectorX<Scalar> m;
  VectorX<Scalar> v;
  std::int64_t step = 0;

  explicit AdamState(Eigen::Index n = 0)
      : m(VectorX<Scalar>::Zero(n)), v(VectorX<Scalar>::Zero(n)) {}
};

/// One Adam update with bias correction. Throws on non-finite gradients so
/// divergence surfaces immediately instead of poisoning the state.
template <typename Scalar>
void adam_step(Eigen::Ref<VectorX<Scalar>> params,
               const Eigen::Ref<const VectorX<Scalar>>& grads,
               AdamState<Scalar>& state, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8) {
  if (params.size() != grads.size() || state.m.size() != params.size())
    throw std::invalid_argument("adam shape mismatch");
  if (!grads.allFinite()) throw std::runtime_error("non-finite gradient");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    const double g = static_cast<double>(grads[i]);
    const double m = beta1 * static_cast<double>(state.m[i]) + (1.0 - beta1) * g;
    const double v = beta2 * static_cast<double>(state.v[i]) + (1.0 - beta2) * g * g;
    state.m[i] = static_cast<Scalar>(m);
    state.v[i] = static_cast<Scalar>(v);
    const double mhat = m / bc1;
    const double vhat = v / bc2;
    params[i] -= static_cast<Scalar>(lr * mhat / (std::sqrt(vhat) + eps));
  }
}

}  // namespace ulm
