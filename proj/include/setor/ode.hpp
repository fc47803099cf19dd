#pragma once

#include "setor/attention.hpp"
#include "setor/parameters.hpp"
#include "setor/tensor.hpp"

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace setor {

enum class SolverMethod { kEuler, kRk4 };
enum class GradientMode { kBackprop, kAdjoint };

struct SolverConfig {
  SolverMethod method = SolverMethod::kRk4;
  int steps_per_unit_time = 2;
  GradientMode gradient_mode = GradientMode::kBackprop;
};

class TimeOrderError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// ceil(steps_per_unit_time * |dt|), at least one.
inline int segment_steps(double dt, int steps_per_unit_time) {
  const double raw = std::ceil(static_cast<double>(steps_per_unit_time) * std::abs(dt));
  return raw < 1.0 ? 1 : static_cast<int>(raw);
}

template <typename Dynamics, typename Derived>
typename Derived::PlainObject euler_step(Dynamics&& f, const Eigen::MatrixBase<Derived>& h, double dt) {
  return h + dt * f(h.eval());
}

template <typename Dynamics, typename Derived>
typename Derived::PlainObject rk4_step(Dynamics&& f, const Eigen::MatrixBase<Derived>& h, double dt) {
  using State = typename Derived::PlainObject;
  const State k1 = f(State(h));
  const State k2 = f(State(h + 0.5 * dt * k1));
  const State k3 = f(State(h + 0.5 * dt * k2));
  const State k4 = f(State(h + dt * k3));
  return h + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

/// Fixed-step integration over [0, span] split into `steps` equal steps.
template <typename Dynamics, typename Derived>
typename Derived::PlainObject integrate_segment(Dynamics&& f, const Eigen::MatrixBase<Derived>& h0, double span,
                                                int steps, SolverMethod method) {
  typename Derived::PlainObject h = h0;
  const double dt = span / steps;
  for (int s = 0; s < steps; ++s) {
    h = method == SolverMethod::kRk4 ? rk4_step(f, h, dt) : euler_step(f, h, dt);
  }
  return h;
}

inline void check_nondecreasing(std::span<const double> times) {
  if (times.empty()) throw TimeOrderError("ode_solve: no time points");
  for (std::size_t i = 1; i < times.size(); ++i) {
    if (times[i] < times[i - 1]) {
      throw TimeOrderError("ode_solve: time " + std::to_string(times[i]) + " at index " + std::to_string(i) +
                           " precedes " + std::to_string(times[i - 1]));
    }
  }
}

/// States at every requested time; the first entry is h0 itself.
template <typename Dynamics, typename Derived>
std::vector<typename Derived::PlainObject> integrate(Dynamics&& f, const Eigen::MatrixBase<Derived>& h0,
                                                     std::span<const double> times, const SolverConfig& cfg) {
  check_nondecreasing(times);
  std::vector<typename Derived::PlainObject> out;
  out.reserve(times.size());
  out.emplace_back(h0);
  for (std::size_t i = 1; i < times.size(); ++i) {
    const double span = times[i] - times[i - 1];
    out.push_back(integrate_segment(f, out.back(), span, segment_steps(span, cfg.steps_per_unit_time), cfg.method));
  }
  return out;
}

/// Time-invariant dynamics f(h) = tanh(h W1 + b1) W2 + b2, a d -> d -> d perceptron.
struct OdeFunc {
  Tensor w1;  // d x d
  Tensor b1;  // 1 x d
  Tensor w2;  // d x d
  Tensor b2;  // 1 x d

  /// W2 is drawn at `output_scale` times the Glorot bound, or set to
  /// -decay * W1^T when `decay` is positive.
  static OdeFunc create(ParameterStore& store, const std::string& prefix, Index d, std::mt19937_64& rng,
                        double output_scale = 0.1, double decay = 0.0);

  Index dim() const { return w1.rows(); }
  RowVector operator()(const RowVector& h) const;

  struct ParamGrads {
    Matrix w1, b1, w2, b2;
    explicit ParamGrads(Index d);
  };
  /// Returns c * df/dh at h and accumulates c * df/dtheta into `grads`.
  RowVector vjp(const RowVector& h, const RowVector& cotangent, ParamGrads& grads) const;
};

/// Differentiable fixed-step solve. Row i of the result is the state at
/// times[i]; row 0 is h0. Gradients reach h0 and the dynamics parameters.
Tensor ode_solve(const Tensor& h0, const OdeFunc& func, std::span<const double> times, const SolverConfig& cfg);

/// Discharge state: solve from the admission time to the discharge time.
Tensor los_state(const Tensor& admitted, double admit_time, double discharge_time, const OdeFunc& func,
                 const SolverConfig& cfg);

/// Hidden states at every admission time, starting from `initial` at admits[0].
Tensor interval_states(const Tensor& initial, std::span<const double> admits, const OdeFunc& func,
                       const SolverConfig& cfg);

/// LayerNorm(v + v_dis + h); undefined terms are skipped (ablations).
Tensor fuse(const Tensor& pooled, const Tensor& discharge, const Tensor& interval, const LayerNormParams& norm);

/// Learnable per-position rows used in place of the ODE terms.
struct PositionTable {
  Tensor table;  // max_len x d

  static PositionTable create(ParameterStore& store, const std::string& prefix, Index max_len, Index d,
                              std::mt19937_64& rng);
};

Tensor positional_encoding(const PositionTable& positions, int position);

}  // namespace setor
