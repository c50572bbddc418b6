#pragma once

// Discrete LQR baseline around a reference operating point. The plant is
// linearized by central differences of the propagation map.

#include <Eigen/LU>

#include <cmath>
#include <string>

#include "atbm/plant.hpp"
#include "atbm/types.hpp"

namespace atbm {

class BaselineUnavailable : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Linearization {
  Matrix a;
  Matrix b;
};

inline Linearization linearize(const PlantParams& p, const Vector& x, const Vector& u, double upstream) {
  const Index nx = p.state_dim();
  const Index nu = p.control_dim();
  Linearization lin{Matrix(nx, nx), Matrix(nx, nu)};
  for (Index i = 0; i < nx; ++i) {
    const double h = 1e-6 * std::max(1.0, std::abs(x[i]));
    Vector xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    lin.a.col(i) = (propagate(xp, u, p, upstream) - propagate(xm, u, p, upstream)) / (2.0 * h);
  }
  for (Index i = 0; i < nu; ++i) {
    const double h = 1e-6 * std::max(1.0, std::abs(u[i]));
    Vector up = u, um = u;
    up[i] += h;
    um[i] -= h;
    lin.b.col(i) = (propagate(x, up, p, upstream) - propagate(x, um, p, upstream)) / (2.0 * h);
  }
  return lin;
}

struct RiccatiResult {
  Matrix gain;   // K, u = -K x
  Matrix cost;   // P
  int iterations = 0;
};

/// Iterate P <- Q + A'P A - A'P B (R + B'P B)^-1 B'P A from P = Q until the
/// update falls below tol relative to |P|.
inline RiccatiResult solve_riccati(const Matrix& a, const Matrix& b, const Matrix& q, const Matrix& r,
                                   double tol = 1e-10, int max_iterations = 1000000) {
  require(a.rows() == a.cols() && b.rows() == a.rows(), "solve_riccati: A/B shape mismatch");
  require(q.rows() == a.rows() && q.cols() == a.cols(), "solve_riccati: Q shape mismatch");
  require(r.rows() == b.cols() && r.cols() == b.cols(), "solve_riccati: R shape mismatch");
  RiccatiResult out;
  Matrix p = q;
  for (int it = 1; it <= max_iterations; ++it) {
    const Matrix s = r + b.transpose() * p * b;
    const Matrix k = s.partialPivLu().solve(b.transpose() * p * a);
    Matrix next = q + a.transpose() * p * a - a.transpose() * p * b * k;
    next = 0.5 * (next + next.transpose());
    if (!next.allFinite()) throw BaselineUnavailable("solve_riccati: iteration diverged");
    const double change = (next - p).lpNorm<Eigen::Infinity>();
    p = std::move(next);
    if (change <= tol * (1.0 + p.lpNorm<Eigen::Infinity>())) {
      out.cost = p;
      out.gain = (r + b.transpose() * p * b).partialPivLu().solve(b.transpose() * p * a);
      out.iterations = it;
      return out;
    }
  }
  throw BaselineUnavailable("solve_riccati: no fixed point within the iteration limit");
}

/// Gain at the operating point (x_ref, u_eq(x_ref)).
inline Matrix lqr_gain(const PlantParams& p, const Vector& x_ref, double upstream, const Matrix& q, const Matrix& r) {
  p.validate();
  const Vector u = equilibrium_torques(x_ref, p);
  for (Index i = 0; i < p.rollers; ++i) {
    if (!(x_ref[i] < p.stiffness)) throw ContractViolation("lqr_gain: reference tension must stay below EA");
  }
  const Linearization lin = linearize(p, x_ref, u, upstream);
  return solve_riccati(lin.a, lin.b, q, r).gain;
}

/// u = u_eq - K (x - x_ref), clipped to the torque limit.
inline Vector lqr_control(const Matrix& gain, const Vector& x, const Vector& x_ref, const Vector& u_eq, double limit) {
  return (u_eq - gain * (x - x_ref)).cwiseMax(-limit).cwiseMin(limit);
}

}  // namespace atbm
