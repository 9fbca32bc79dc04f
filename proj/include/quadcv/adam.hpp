#ifndef QUADCV_ADAM_HPP
#define QUADCV_ADAM_HPP

#include "quadcv/linalg.hpp"

#include <cmath>
#include <stdexcept>

namespace quadcv {

struct AdamState {
  Vector m;
  Vector v;
  long step = 0;
  double alpha = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  AdamState() = default;
  AdamState(Index size, double step_size) : m(Vector::Zero(size)), v(Vector::Zero(size)), alpha(step_size) {}
};

/// One bias-corrected Adam update of params in place. ascend = true moves
/// along grad, false against it.
inline void adam_step(AdamState& s, Vector& params, const Vector& grad, bool ascend) {
  if (params.size() != grad.size() || s.m.size() != grad.size() || s.v.size() != grad.size())
    throw std::invalid_argument("adam_step: size mismatch (params " + std::to_string(params.size()) + ", grad " +
                                std::to_string(grad.size()) + ", state " + std::to_string(s.m.size()) + ")");
  ++s.step;
  s.m = s.beta1 * s.m + (1.0 - s.beta1) * grad;
  s.v = s.beta2 * s.v + (1.0 - s.beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  const double sign = ascend ? 1.0 : -1.0;
  params.array() += sign * s.alpha * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + s.eps);
}

}  // namespace quadcv

#endif  // QUADCV_ADAM_HPP
