#include "setor/ode.hpp"

namespace setor {

OdeFunc OdeFunc::create(ParameterStore& store, const std::string& prefix, Index d, std::mt19937_64& rng,
                        double output_scale, double decay) {
  OdeFunc f;
  f.w1 = store.uniform(prefix + ".w1", d, d, glorot_bound(d, d), rng);
  f.b1 = store.zeros(prefix + ".b1", 1, d);
  if (decay > 0) {
    // W2 = -decay * W1^T gives f(h) ~ -decay * h W1 W1^T near the origin:
    // a contracting flow whose state stays bounded over long gaps.
    f.w2 = store.add(prefix + ".w2", -decay * f.w1.value().transpose());
  } else {
    // Small output layer: the flow starts close to the identity map.
    f.w2 = store.uniform(prefix + ".w2", d, d, output_scale * glorot_bound(d, d), rng);
  }
  f.b2 = store.zeros(prefix + ".b2", 1, d);
  return f;
}

RowVector OdeFunc::operator()(const RowVector& h) const {
  const RowVector hidden = (h * w1.value() + b1.value()).array().tanh().matrix();
  return hidden * w2.value() + b2.value();
}

OdeFunc::ParamGrads::ParamGrads(Index d)
    : w1(Matrix::Zero(d, d)), b1(Matrix::Zero(1, d)), w2(Matrix::Zero(d, d)), b2(Matrix::Zero(1, d)) {}

RowVector OdeFunc::vjp(const RowVector& h, const RowVector& cotangent, ParamGrads& grads) const {
  const RowVector hidden = (h * w1.value() + b1.value()).array().tanh().matrix();
  grads.w2.noalias() += hidden.transpose() * cotangent;
  grads.b2 += cotangent;
  const RowVector dz = ((cotangent * w2.value().transpose()).array() * (1.0 - hidden.array().square())).matrix();
  grads.w1.noalias() += h.transpose() * dz;
  grads.b1 += dz;
  return dz * w1.value().transpose();
}

namespace {

// Stage inputs of one step: {h} for Euler, {h, h + dt/2 k1, h + dt/2 k2, h + dt k3} for RK4.
struct StepRecord {
  double dt;
  std::vector<RowVector> stages;
};

RowVector step_forward(const OdeFunc& f, const RowVector& h, double dt, SolverMethod method, StepRecord& rec) {
  rec.dt = dt;
  if (method == SolverMethod::kEuler) {
    rec.stages = {h};
    return h + dt * f(h);
  }
  const RowVector k1 = f(h);
  const RowVector x2 = h + 0.5 * dt * k1;
  const RowVector k2 = f(x2);
  const RowVector x3 = h + 0.5 * dt * k2;
  const RowVector k3 = f(x3);
  const RowVector x4 = h + dt * k3;
  const RowVector k4 = f(x4);
  rec.stages = {h, x2, x3, x4};
  return h + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

// Reverse of one step: maps dL/dh_{n+1} to dL/dh_n.
RowVector step_backward(const OdeFunc& f, const StepRecord& rec, const RowVector& gbar, SolverMethod method,
                        OdeFunc::ParamGrads& grads) {
  const double dt = rec.dt;
  if (method == SolverMethod::kEuler) return gbar + f.vjp(rec.stages[0], dt * gbar, grads);
  RowVector hbar = gbar;
  RowVector k1bar = (dt / 6.0) * gbar;
  RowVector k2bar = (dt / 3.0) * gbar;
  RowVector k3bar = (dt / 3.0) * gbar;
  const RowVector k4bar = (dt / 6.0) * gbar;
  const RowVector x4bar = f.vjp(rec.stages[3], k4bar, grads);
  hbar += x4bar;
  k3bar += dt * x4bar;
  const RowVector x3bar = f.vjp(rec.stages[2], k3bar, grads);
  hbar += x3bar;
  k2bar += 0.5 * dt * x3bar;
  const RowVector x2bar = f.vjp(rec.stages[1], k2bar, grads);
  hbar += x2bar;
  k1bar += 0.5 * dt * x2bar;
  hbar += f.vjp(rec.stages[0], k1bar, grads);
  return hbar;
}

Eigen::VectorXd flatten(const OdeFunc::ParamGrads& g) {
  Eigen::VectorXd out(g.w1.size() + g.b1.size() + g.w2.size() + g.b2.size());
  Index at = 0;
  for (const Matrix* m : {&g.w1, &g.b1, &g.w2, &g.b2}) {
    out.segment(at, m->size()) = Eigen::Map<const Eigen::VectorXd>(m->data(), m->size());
    at += m->size();
  }
  return out;
}

void unflatten_add(const Eigen::VectorXd& flat, OdeFunc::ParamGrads& g) {
  Index at = 0;
  for (Matrix* m : {&g.w1, &g.b1, &g.w2, &g.b2}) {
    Eigen::Map<Eigen::VectorXd>(m->data(), m->size()) += flat.segment(at, m->size());
    at += m->size();
  }
}

void push_param_grads(Node& self, const OdeFunc::ParamGrads& g) {
  // inputs: h0, w1, b1, w2, b2
  accumulate_grad(*self.inputs[1], g.w1);
  accumulate_grad(*self.inputs[2], g.b1);
  accumulate_grad(*self.inputs[3], g.w2);
  accumulate_grad(*self.inputs[4], g.b2);
}

}  // namespace

Tensor ode_solve(const Tensor& h0, const OdeFunc& func, std::span<const double> times, const SolverConfig& cfg) {
  check_nondecreasing(times);
  const Index d = func.dim();
  if (h0.rows() != 1 || h0.cols() != d) {
    throw ShapeError("ode_solve", "initial state must be 1x" + std::to_string(d));
  }
  if (cfg.steps_per_unit_time <= 0) throw std::invalid_argument("ode_solve: steps_per_unit_time must be positive");

  const std::size_t points = times.size();
  Matrix out(static_cast<Index>(points), d);
  std::vector<std::vector<StepRecord>> records(points > 0 ? points - 1 : 0);
  RowVector h = h0.value();
  out.row(0) = h;
  for (std::size_t s = 1; s < points; ++s) {
    const double span = times[s] - times[s - 1];
    const int steps = segment_steps(span, cfg.steps_per_unit_time);
    const double dt = span / steps;
    auto& segment = records[s - 1];
    segment.resize(steps);
    for (int k = 0; k < steps; ++k) h = step_forward(func, h, dt, cfg.method, segment[k]);
    out.row(static_cast<Index>(s)) = h;
  }

  const OdeFunc f = func;
  const SolverConfig config = cfg;
  auto backward_fn = [f, config, records = std::move(records)](Node& self) {
    const Index d = f.dim();
    OdeFunc::ParamGrads grads(d);
    const Index last = self.value.rows() - 1;
    RowVector hbar = self.grad.row(last);
    if (config.gradient_mode == GradientMode::kBackprop) {
      for (Index s = last; s >= 1; --s) {
        const auto& segment = records[s - 1];
        for (auto it = segment.rbegin(); it != segment.rend(); ++it) {
          hbar = step_backward(f, *it, hbar, config.method, grads);
        }
        hbar += self.grad.row(s - 1);
      }
    } else {
      // Continuous adjoint: integrate [h, a, a df/dtheta] backwards in time,
      // restarting h from the stored forward state at every output time.
      const Index np = 2 * d * d + 2 * d;
      for (Index s = last; s >= 1; --s) {
        const auto& segment = records[s - 1];
        const int steps = static_cast<int>(segment.size());
        const double dt = segment.front().dt;
        RowVector z(2 * d + np);
        z.setZero();
        z.head(d) = self.value.row(s);
        z.segment(d, d) = hbar;
        auto augmented = [&f, d, np](const RowVector& state) {
          OdeFunc::ParamGrads g(d);
          const RowVector h = state.head(d);
          const RowVector a = state.segment(d, d);
          RowVector dz(state.size());
          dz.head(d) = f(h);
          dz.segment(d, d) = -f.vjp(h, a, g);
          dz.tail(np) = -flatten(g).transpose();
          return dz;
        };
        for (int k = 0; k < steps; ++k) {
          z = config.method == SolverMethod::kRk4 ? rk4_step(augmented, z, -dt) : euler_step(augmented, z, -dt);
        }
        hbar = z.segment(d, d);
        unflatten_add(z.tail(np).transpose(), grads);
        hbar += self.grad.row(s - 1);
      }
    }
    accumulate_grad(*self.inputs[0], hbar);
    push_param_grads(self, grads);
  };
  return make_op("ode_solve", std::move(out), {h0, func.w1, func.b1, func.w2, func.b2}, std::move(backward_fn));
}

Tensor los_state(const Tensor& admitted, double admit_time, double discharge_time, const OdeFunc& func,
                 const SolverConfig& cfg) {
  if (discharge_time < admit_time) {
    throw TimeOrderError("los_state: discharge " + std::to_string(discharge_time) + " precedes admission " +
                         std::to_string(admit_time));
  }
  const double times[] = {admit_time, discharge_time};
  return slice_rows(ode_solve(admitted, func, times, cfg), 1, 1);
}

Tensor interval_states(const Tensor& initial, std::span<const double> admits, const OdeFunc& func,
                       const SolverConfig& cfg) {
  return ode_solve(initial, func, admits, cfg);
}

Tensor fuse(const Tensor& pooled, const Tensor& discharge, const Tensor& interval, const LayerNormParams& norm) {
  Tensor total = pooled;
  if (discharge.defined()) total = add(total, discharge);
  if (interval.defined()) total = add(total, interval);
  return norm(total);
}

PositionTable PositionTable::create(ParameterStore& store, const std::string& prefix, Index max_len, Index d,
                                    std::mt19937_64& rng) {
  return {store.uniform(prefix + ".table", max_len, d, 0.1, rng)};
}

Tensor positional_encoding(const PositionTable& positions, int position) {
  if (position < 0 || position >= positions.table.rows()) {
    throw std::out_of_range("positional_encoding: position " + std::to_string(position) + " outside [0," +
                            std::to_string(positions.table.rows()) + ")");
  }
  const int ids[] = {position};
  return gather_rows(positions.table, ids);
}

}  // namespace setor
