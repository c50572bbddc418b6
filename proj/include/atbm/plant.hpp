#pragma once

// Multi-span web transport model: tension/velocity drift, the deterministic
// Euler propagation map used to build bundles, an Euler-Maruyama stepper for
// closed-loop simulation, and the mass-conservation velocity references.
//
// State layout is x = [T_1..T_N, v_1..v_N], control u = [u_1..u_N].

#include <random>
#include <string>

#include "atbm/rng.hpp"
#include "atbm/types.hpp"

namespace atbm {

struct PlantParams {
  Index rollers = 0;     // N
  double stiffness = 0;  // EA [N]
  Vector span_lengths;   // L_i [m]
  Vector inertias;       // J_i [kg m^2]
  Vector frictions;      // f_i, viscous gain on v_i
  Vector radii;          // R_i [m]
  Vector noise_gains;    // b_i [(m/s)/sqrt(s)]
  double dt = 0;         // [s]

  Index state_dim() const { return 2 * rollers; }
  Index control_dim() const { return rollers; }

  void validate() const {
    require(rollers >= 2, "PlantParams: need at least 2 rollers");
    require(stiffness > 0 && std::isfinite(stiffness), "PlantParams: EA must be positive");
    require(dt > 0 && std::isfinite(dt), "PlantParams: dt must be positive");
    auto positive = [&](const Vector& v, const char* name) {
      require(v.size() == rollers, std::string("PlantParams: ") + name + " must have N entries");
      require(v.allFinite() && (v.array() > 0).all(),
              std::string("PlantParams: ") + name + " must be strictly positive");
    };
    positive(span_lengths, "span_lengths");
    positive(inertias, "inertias");
    positive(frictions, "frictions");
    positive(radii, "radii");
    require(noise_gains.size() == rollers, "PlantParams: noise_gains must have N entries");
    require(noise_gains.allFinite() && (noise_gains.array() >= 0).all(),
            "PlantParams: noise_gains must be non-negative");
  }

  /// Uniform line; handy for tests.
  static PlantParams uniform(Index n, double ea, double length, double inertia, double friction,
                             double radius, double dt_s, double noise = 0.0) {
    PlantParams p;
    p.rollers = n;
    p.stiffness = ea;
    p.span_lengths = Vector::Constant(n, length);
    p.inertias = Vector::Constant(n, inertia);
    p.frictions = Vector::Constant(n, friction);
    p.radii = Vector::Constant(n, radius);
    p.noise_gains = Vector::Constant(n, noise);
    p.dt = dt_s;
    return p;
  }
};

/// Reference tensions at or above EA make the velocity chain singular.
class SingularReferenceError : public ContractViolation {
 public:
  using ContractViolation::ContractViolation;
};

namespace detail {
inline void check_state(const PlantParams& p, Index size) {
  require(size == p.state_dim(), "state dimension " + std::to_string(size) + " != 2N = " +
                                     std::to_string(p.state_dim()));
}
inline void check_control(const PlantParams& p, Index size) {
  require(size == p.control_dim(),
          "control dimension " + std::to_string(size) + " != N = " + std::to_string(p.rollers));
}
}  // namespace detail

/// Control-free time derivative. Boundary tensions T_0 and T_{N+1} are zero;
/// v_0 is the exogenous unwind velocity.
inline Vector drift(const Eigen::Ref<const Vector>& x, const PlantParams& p, double upstream_velocity) {
  detail::check_state(p, x.size());
  const Index n = p.rollers;
  const double ea = p.stiffness;
  Vector dx(2 * n);
  for (Index i = 0; i < n; ++i) {
    const double t_prev = i == 0 ? 0.0 : x[i - 1];
    const double v_prev = i == 0 ? upstream_velocity : x[n + i - 1];
    const double t_next = i + 1 < n ? x[i + 1] : 0.0;
    const double t = x[i];
    const double v = x[n + i];
    const double len = p.span_lengths[i];
    dx[i] = ea / len * (v - v_prev) + (t_prev * v_prev - t * v) / len;
    const double r = p.radii[i];
    const double j = p.inertias[i];
    dx[n + i] = r * r / j * (t_next - t) - p.frictions[i] / j * v;
  }
  return dx;
}

/// F(x, u) = x + (f(x) + G u) dt with G u entering dv_i as (R_i / J_i) u_i.
inline Vector propagate(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& u,
                        const PlantParams& p, double upstream_velocity) {
  detail::check_control(p, u.size());
  Vector rate = drift(x, p, upstream_velocity);
  const Index n = p.rollers;
  for (Index i = 0; i < n; ++i) rate[n + i] += p.radii[i] / p.inertias[i] * u[i];
  return x + rate * p.dt;
}

/// One Euler-Maruyama step. Velocities receive b_i sqrt(dt) xi_i; a zero gain
/// leaves the deterministic result untouched bit for bit. One normal draw is
/// consumed per roller regardless of the gain so streams stay aligned.
inline Vector step_stochastic(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& u,
                              const PlantParams& p, double upstream_velocity, Rng& rng) {
  Vector next = propagate(x, u, p, upstream_velocity);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double sqrt_dt = std::sqrt(p.dt);
  for (Index i = 0; i < p.rollers; ++i) {
    const double xi = normal(rng);
    if (p.noise_gains[i] != 0.0) next[p.rollers + i] += p.noise_gains[i] * sqrt_dt * xi;
  }
  return next;
}

/// Mass-conservation velocity chain v_i = (EA - T_{i-1}) / (EA - T_i) v_{i-1},
/// with T_0 = 0 and v_0 the unwind velocity.
inline Vector reference_velocities(const Eigen::Ref<const Vector>& tensions, double upstream_velocity,
                                   const PlantParams& p) {
  detail::check_control(p, tensions.size());
  Vector v(p.rollers);
  double t_prev = 0.0;
  double v_prev = upstream_velocity;
  for (Index i = 0; i < p.rollers; ++i) {
    if (!(tensions[i] < p.stiffness)) {
      throw SingularReferenceError("reference tension of span " + std::to_string(i + 1) +
                                   " is not below EA");
    }
    v[i] = (p.stiffness - t_prev) / (p.stiffness - tensions[i]) * v_prev;
    t_prev = tensions[i];
    v_prev = v[i];
  }
  return v;
}

/// Torques that zero the velocity derivative at state x.
inline Vector equilibrium_torques(const Eigen::Ref<const Vector>& x, const PlantParams& p) {
  detail::check_state(p, x.size());
  const Index n = p.rollers;
  Vector u(n);
  for (Index i = 0; i < n; ++i) {
    const double t_next = i + 1 < n ? x[i + 1] : 0.0;
    const double r = p.radii[i];
    u[i] = (p.frictions[i] * x[n + i] - r * r * (t_next - x[i])) / r;
  }
  return u;
}

/// Stack tensions and velocities into a state vector.
inline Vector make_state(const Eigen::Ref<const Vector>& tensions, const Eigen::Ref<const Vector>& velocities) {
  require(tensions.size() == velocities.size(), "make_state: tension/velocity size mismatch");
  Vector x(tensions.size() * 2);
  x << tensions, velocities;
  return x;
}

}  // namespace atbm
