#pragma once

// Web-tension tracking problem: quadratic tracking residual, box constraints
// on tensions/velocities/torques (hard), and an asymmetric tension band
// (soft class 0 = over-tension, soft class 1 = under-tension).

#include <string>
#include <utility>
#include <vector>

#include "atbm/bundle.hpp"
#include "atbm/plant.hpp"
#include "atbm/types.hpp"

namespace atbm {

/// Piecewise-constant signal: `initial` until the first event, then the
/// value of the latest event whose time has passed.
struct StepSchedule {
  struct Event {
    double time = 0;
    double value = 0;
  };
  double initial = 0;
  std::vector<Event> events;

  double at(double t) const {
    double v = initial;
    for (const Event& e : events) {
      if (t + 1e-9 >= e.time) v = e.value;
    }
    return v;
  }
};

struct R2RProblem {
  PlantParams plant;
  Index horizon = 15;
  Vector q;  // diag Q, 2N
  Vector r;  // diag R, N
  Vector s;  // diag S, N
  double tension_min = 1.0;
  double tension_max = 60.0;
  double velocity_min = 0.0;
  double velocity_max = 1.0;
  double torque_limit = 30.0;
  Vector soft_tension_max;  // over-tension edge per span
  Vector soft_tension_min;  // under-tension edge per span
  std::vector<StepSchedule> tension_refs;
  StepSchedule upstream;

  static constexpr Index kSoftClasses = 2;

  Index state_dim() const { return plant.state_dim(); }
  Index control_dim() const { return plant.control_dim(); }
  Index residual_dim() const { return 4 * plant.rollers; }
  Index hard_dim() const { return 6 * plant.rollers; }

  void validate() const {
    plant.validate();
    const Index n = plant.rollers;
    require(horizon >= 1, "R2RProblem: horizon must be positive");
    require(q.size() == 2 * n && r.size() == n && s.size() == n, "R2RProblem: weight dimensions");
    require((q.array() >= 0).all() && (r.array() >= 0).all() && (s.array() >= 0).all(),
            "R2RProblem: weights must be positive semidefinite");
    require(tension_min < tension_max && velocity_min < velocity_max && torque_limit > 0,
            "R2RProblem: bounds must be ordered");
    require(soft_tension_max.size() == n && soft_tension_min.size() == n, "R2RProblem: soft band dimensions");
    require((soft_tension_min.array() < soft_tension_max.array()).all(), "R2RProblem: soft band must be ordered");
    require(static_cast<Index>(tension_refs.size()) == n, "R2RProblem: one tension schedule per span");
  }

  double upstream_velocity(double t) const { return upstream.at(t); }

  Vector tension_reference(double t) const {
    Vector tr(plant.rollers);
    for (Index i = 0; i < plant.rollers; ++i) tr[i] = tension_refs[static_cast<std::size_t>(i)].at(t);
    return tr;
  }

  Vector state_reference(double t) const {
    const Vector tr = tension_reference(t);
    return make_state(tr, reference_velocities(tr, upstream_velocity(t), plant));
  }

  Vector control_reference(double t) const { return equilibrium_torques(state_reference(t), plant); }
};

struct ResidualWeights {
  Vector q, r, s;
};

/// r = [Q^1/2 (x - x_ref); R^1/2 (u - u_ref); S^1/2 (u - u_prev)].
inline Vector stage_residual(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& u,
                             const Eigen::Ref<const Vector>& u_prev, const Eigen::Ref<const Vector>& x_ref,
                             const Eigen::Ref<const Vector>& u_ref, const ResidualWeights& w) {
  require(x.size() == x_ref.size() && x.size() == w.q.size(), "stage_residual: state dimension mismatch");
  require(u.size() == u_ref.size() && u.size() == u_prev.size() && u.size() == w.r.size() &&
              u.size() == w.s.size(),
          "stage_residual: control dimension mismatch");
  Vector res(x.size() + 2 * u.size());
  res << w.q.cwiseSqrt().cwiseProduct(x - x_ref), w.r.cwiseSqrt().cwiseProduct(u - u_ref),
      w.s.cwiseSqrt().cwiseProduct(u - u_prev);
  return res;
}

inline Vector hard_constraints(const R2RProblem& p, const Eigen::Ref<const Vector>& x,
                               const Eigen::Ref<const Vector>& u) {
  const Index n = p.plant.rollers;
  Vector c(6 * n);
  const auto t = x.head(n).array();
  const auto v = x.tail(n).array();
  const auto tq = u.array();
  c << t - p.tension_min, p.tension_max - t, v - p.velocity_min, p.velocity_max - v, tq + p.torque_limit,
      p.torque_limit - tq;
  return c;
}

inline Vector soft_constraints(const R2RProblem& p, Index cls, const Eigen::Ref<const Vector>& x) {
  const Index n = p.plant.rollers;
  if (cls == 0) return p.soft_tension_max - x.head(n);
  return x.head(n) - p.soft_tension_min;
}

/// Stage references over one horizon starting at time index `step`.
struct HorizonReferences {
  std::vector<Vector> states;
  std::vector<Vector> controls;
  std::vector<double> upstream;
};

inline HorizonReferences horizon_references(const R2RProblem& p, Index step) {
  HorizonReferences h;
  for (Index k = 0; k < p.horizon; ++k) {
    const double t = static_cast<double>(step + k) * p.plant.dt;
    h.states.push_back(p.state_reference(t));
    h.controls.push_back(equilibrium_torques(h.states.back(), p.plant));
    h.upstream.push_back(p.upstream_velocity(t));
  }
  return h;
}

/// Stage functions for one outer iteration. The rate term of stage k uses the
/// iterate's control at k-1 (and `u_applied` for k = 0) as a frozen u_prev,
/// which keeps every stage function a function of (x_k, u_k) alone.
inline ProblemFunctions make_functions(const R2RProblem& p, const HorizonReferences& refs,
                                       const Vector& u_applied, const Trajectory& iterate) {
  require(static_cast<Index>(refs.states.size()) == p.horizon, "make_functions: reference horizon mismatch");
  require(iterate.horizon() == p.horizon, "make_functions: iterate horizon mismatch");
  std::vector<Vector> u_prev;
  u_prev.push_back(u_applied);
  for (Index k = 1; k < p.horizon; ++k) u_prev.push_back(iterate.controls[k - 1]);

  ProblemFunctions f;
  f.state_dim = p.state_dim();
  f.control_dim = p.control_dim();
  f.residual_dim = p.residual_dim();
  f.hard_dim = p.hard_dim();
  f.soft_dims = {p.plant.rollers, p.plant.rollers};
  const ResidualWeights w{p.q, p.r, p.s};
  f.dynamics = [&p, refs](Index k, const Vector& x, const Vector& u) {
    return propagate(x, u, p.plant, refs.upstream[static_cast<std::size_t>(k)]);
  };
  f.residual = [refs, w, u_prev = std::move(u_prev)](Index k, const Vector& x, const Vector& u) {
    const auto i = static_cast<std::size_t>(k);
    return stage_residual(x, u, u_prev[i], refs.states[i], refs.controls[i], w);
  };
  f.hard = [&p](Index, const Vector& x, const Vector& u) { return hard_constraints(p, x, u); };
  f.soft = [&p](Index, Index j, const Vector& x, const Vector&) { return soft_constraints(p, j, x); };
  return f;
}

/// Constant-state initial guess with torques balancing the velocity drift.
inline Trajectory hold_trajectory(const R2RProblem& p, const Vector& x) {
  Trajectory z;
  const Vector u = equilibrium_torques(x, p.plant);
  for (Index k = 0; k < p.horizon; ++k) {
    z.states.push_back(x);
    z.controls.push_back(u);
  }
  return z;
}

/// Receding-horizon warm start: drop the first stage, repeat the last one,
/// and pin the first state to the new measurement.
inline Trajectory shift_trajectory(const Trajectory& z, const Vector& x_measured) {
  Trajectory s;
  for (Index k = 1; k < z.horizon(); ++k) {
    s.states.push_back(z.states[k]);
    s.controls.push_back(z.controls[k]);
  }
  s.states.push_back(z.states.back());
  s.controls.push_back(z.controls.back());
  s.states.front() = x_measured;
  return s;
}

}  // namespace atbm
