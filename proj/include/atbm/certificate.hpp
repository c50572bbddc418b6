#pragma once

// Penalized merit function, Lipschitz estimates and the closed-form iteration
// bounds, plus per-iteration monitors for the inequalities the bounds rest on.
// Monitors log; they never stop a run.

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "atbm/adapt.hpp"
#include "atbm/bundle.hpp"
#include "atbm/types.hpp"

namespace atbm {

/// phi = sum_k |r_k|^2 + mu (sum_{k<H-1} |F(x_k,u_k) - x_{k+1}|_1 + |[c_hard,k]_-|_1 + |x_0 - x_init|_1)
///       + sum_j g_j sum_{k<H-1} |[c_j,k]_-|_1
inline double penalized_objective(const Trajectory& z, double mu, const Vector& gammas, const ProblemFunctions& f,
                                  const Vector& x_init) {
  f.validate();
  z.validate(f.state_dim, f.control_dim);
  require(gammas.size() == f.soft_classes(), "penalized_objective: one gamma per soft class");
  require(x_init.size() == f.state_dim, "penalized_objective: x_init dimension mismatch");
  const Index h = z.horizon();
  double cost = 0.0;
  double hard = (z.states.front() - x_init).lpNorm<1>();
  double soft = 0.0;
  for (Index k = 0; k < h; ++k) {
    const Vector& x = z.states[k];
    const Vector& u = z.controls[k];
    cost += f.residual(k, x, u).squaredNorm();
    if (k + 1 == h) break;
    hard += (f.dynamics(k, x, u) - z.states[k + 1]).lpNorm<1>();
    if (f.hard_dim > 0) hard += negative_part(f.hard(k, x, u)).lpNorm<1>();
    for (Index j = 0; j < f.soft_classes(); ++j) soft += gammas[j] * negative_part(f.soft(k, j, x, u)).lpNorm<1>();
  }
  return cost + mu * hard + soft;
}

struct LipschitzEstimates {
  double l_r = 0;
  double l_f = 0;
  double l_c = 0;
  double r_bound = 0;  // R
  std::string method = "user-supplied";

  void validate() const {
    require(l_r > 0 && l_f > 0 && l_c > 0 && r_bound > 0, "LipschitzEstimates: constants must be positive");
    require(std::isfinite(l_r) && std::isfinite(l_f) && std::isfinite(l_c) && std::isfinite(r_bound),
            "LipschitzEstimates: constants must be finite");
  }
};

/// Box over stacked [x; u] points and the stage range to draw from.
struct SampleDomain {
  Vector lower;
  Vector upper;
  Index horizon = 1;
};

inline constexpr double kLipschitzInflation = 1.5;

/// Largest finite-difference slope over random pairs, times 1.5. R is the
/// largest residual norm seen, also inflated. Slopes of the constraint
/// classes are pooled into L_c.
inline LipschitzEstimates estimate_lipschitz(const ProblemFunctions& f, const SampleDomain& d, Index pairs,
                                             Rng& rng) {
  f.validate();
  const Index n = f.state_dim + f.control_dim;
  require(d.lower.size() == n && d.upper.size() == n, "estimate_lipschitz: domain dimension mismatch");
  require(d.horizon >= 1 && pairs >= 1, "estimate_lipschitz: need a stage and at least one pair");
  if (!((d.upper - d.lower).array() >= 0).all() || (d.upper - d.lower).norm() <= 0) {
    throw ValidationError("estimate_lipschitz: degenerate sampling domain");
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<Index> stage(0, d.horizon - 1);
  auto draw = [&] {
    Vector p(n);
    for (Index i = 0; i < n; ++i) p[i] = d.lower[i] + unit(rng) * (d.upper[i] - d.lower[i]);
    return p;
  };
  auto constraints = [&](Index k, const Vector& x, const Vector& u) {
    std::vector<Vector> parts;
    if (f.hard_dim > 0) parts.push_back(f.hard(k, x, u));
    for (Index j = 0; j < f.soft_classes(); ++j) parts.push_back(f.soft(k, j, x, u));
    Index total = 0;
    for (const Vector& v : parts) total += v.size();
    Vector c(total);
    Index at = 0;
    for (const Vector& v : parts) {
      c.segment(at, v.size()) = v;
      at += v.size();
    }
    return c;
  };

  LipschitzEstimates e;
  e.method = "sampled-estimate";
  for (Index i = 0; i < pairs; ++i) {
    const Index k = stage(rng);
    const Vector a = draw();
    const Vector b = draw();
    const double dist = (a - b).norm();
    const Vector xa = a.head(f.state_dim), ua = a.tail(f.control_dim);
    const Vector xb = b.head(f.state_dim), ub = b.tail(f.control_dim);
    const Vector ra = f.residual(k, xa, ua);
    const Vector rb = f.residual(k, xb, ub);
    e.r_bound = std::max({e.r_bound, ra.norm(), rb.norm()});
    if (dist <= 0) continue;
    e.l_r = std::max(e.l_r, (ra - rb).norm() / dist);
    e.l_f = std::max(e.l_f, (f.dynamics(k, xa, ua) - f.dynamics(k, xb, ub)).norm() / dist);
    e.l_c = std::max(e.l_c, (constraints(k, xa, ua) - constraints(k, xb, ub)).norm() / dist);
  }
  e.l_r *= kLipschitzInflation;
  e.l_f *= kLipschitzInflation;
  e.l_c *= kLipschitzInflation;
  e.r_bound *= kLipschitzInflation;
  return e;
}

/// L_phi = 2 H R L_r + (H-1) mu (1 + L_F + L_c) + (H-1) L_c sum_j g_j
inline double lipschitz_bound(const LipschitzEstimates& e, Index horizon, double mu, const Vector& gammas) {
  require(horizon >= 1, "lipschitz_bound: horizon must be positive");
  const double h = static_cast<double>(horizon);
  return 2.0 * h * e.r_bound * e.l_r + (h - 1.0) * mu * (1.0 + e.l_f + e.l_c) + (h - 1.0) * e.l_c * gammas.sum();
}

/// The constant in the bundle approximation bound.
inline constexpr double kApproximationConstant = 2.0;

struct BoundReport {
  double l_phi = 0;
  double delta_bar = 0;
  double mu_bar = 0;
  Index k_star = 0;
  Index k_delta = 0;
  Index n_viol = 0;
  Index k_feas = 0;
  double phi_at_k_star = 0;
  double phi_min = 0;
  std::string phi_min_source = "a priori lower bound 0";
};

struct BoundInputs {
  Index horizon = 1;
  double mu_bar = 0;      // stabilized mu; mu_max for an a priori report
  Vector gamma_bar;       // stabilized gammas; caps for an a priori report
  double phi_at_k_star = 0;
  double phi_min = 0;
  double delta_at_k_star = 0;  // trajectory-level radius
};

/// Ceil of log_rho(cap / initial) summed over mu and every gamma.
inline Index penalty_stabilization_bound(const AdaptConfig& c) {
  Index k = max_increases(c.mu_init, c.mu_max, c.rho_mu);
  for (Index j = 0; j < c.soft_classes(); ++j) k += max_increases(c.gamma_init[j], c.gamma_max[j], c.rho_gamma);
  return k;
}

inline BoundReport complexity_bounds(const AdaptConfig& c, const LipschitzEstimates& e, const BoundInputs& in) {
  c.validate();
  require(in.mu_bar > 0, "complexity_bounds: mu_bar must be positive");
  require(in.gamma_bar.size() == c.soft_classes(), "complexity_bounds: one gamma_bar per soft class");
  require(in.phi_at_k_star >= in.phi_min, "complexity_bounds: phi(z^K*) below phi_min");
  BoundReport r;
  r.mu_bar = in.mu_bar;
  r.l_phi = lipschitz_bound(e, in.horizon, in.mu_bar, in.gamma_bar);
  require(r.l_phi > 0 && std::isfinite(r.l_phi), "complexity_bounds: L_phi must be positive");
  r.delta_bar = in.mu_bar * c.tau_viol / (16.0 * kApproximationConstant * r.l_phi);
  r.k_star = penalty_stabilization_bound(c);
  if (in.delta_at_k_star > r.delta_bar) {
    r.k_delta = static_cast<Index>(std::ceil(std::log(r.delta_bar / in.delta_at_k_star) / std::log(c.beta_con) - 1e-12));
  }
  r.phi_at_k_star = in.phi_at_k_star;
  r.phi_min = in.phi_min;
  r.n_viol = static_cast<Index>(std::floor(4.0 * (in.phi_at_k_star - in.phi_min) / (in.mu_bar * c.tau_viol)));
  r.k_feas = r.k_star + r.k_delta + r.n_viol;
  return r;
}

enum class MonitorOutcome { satisfied, violated, not_applicable };

inline const char* to_string(MonitorOutcome m) {
  switch (m) {
    case MonitorOutcome::satisfied: return "satisfied";
    case MonitorOutcome::violated: return "violated";
    case MonitorOutcome::not_applicable: return "not_applicable";
  }
  return "unknown";
}

struct MonitorCheck {
  std::string name;
  double lhs = 0;
  double rhs = 0;
  MonitorOutcome outcome = MonitorOutcome::not_applicable;
};

struct MonitorRecord {
  MonitorCheck approximation;  // |phi(z+) - J_sub| <= 2 L_phi Delta
  MonitorCheck variation;      // phi(z+) <= phi(z) + 2 L_phi Delta
  MonitorCheck decrease;       // phi(z+) <= phi(z) - mu tau_viol / 4, armed only below Delta_bar
  double phi_prev = 0;
  double phi_next = 0;
  double l_phi = 0;
  double delta_bar = 0;
  double mu = 0;
  Vector gammas;
  double radius = 0;  // sqrt(H) Delta
};

struct MonitorInput {
  const Trajectory* prev = nullptr;
  const Trajectory* next = nullptr;
  const ProblemFunctions* funcs = nullptr;
  Vector x_init;
  double j_sub = 0;
  double delta = 0;  // per-stage radius; scaled by sqrt(H) here
  double mu = 0;
  Vector gammas;
  Violations nu;  // from the subproblem that produced `next`
};

inline MonitorCheck make_check(std::string name, double lhs, double rhs) {
  // Tolerance for round-off when both sides agree to working precision.
  const double tol = 1e-9 * (1.0 + std::abs(lhs) + std::abs(rhs));
  return {std::move(name), lhs, rhs, lhs <= rhs + tol ? MonitorOutcome::satisfied : MonitorOutcome::violated};
}

inline MonitorRecord monitor_iteration(const MonitorInput& in, const LipschitzEstimates& e, const AdaptConfig& c) {
  require(in.prev && in.next && in.funcs, "monitor_iteration: missing trajectory or functions");
  const Index h = in.prev->horizon();
  MonitorRecord r;
  r.phi_prev = penalized_objective(*in.prev, in.mu, in.gammas, *in.funcs, in.x_init);
  r.phi_next = penalized_objective(*in.next, in.mu, in.gammas, *in.funcs, in.x_init);
  r.l_phi = lipschitz_bound(e, h, in.mu, in.gammas);
  const double radius = std::sqrt(static_cast<double>(h)) * in.delta;
  r.mu = in.mu;
  r.gammas = in.gammas;
  r.radius = radius;
  r.approximation = make_check("approximation", std::abs(r.phi_next - in.j_sub), kApproximationConstant * r.l_phi * radius);
  r.variation = make_check("variation", r.phi_next, r.phi_prev + 2.0 * r.l_phi * radius);
  r.delta_bar = r.l_phi > 0 ? in.mu * c.tau_viol / (16.0 * kApproximationConstant * r.l_phi)
                            : std::numeric_limits<double>::infinity();
  const double worst = std::max(in.nu.dynamics, in.nu.hard);
  if (radius <= r.delta_bar && worst >= c.tau_viol) {
    r.decrease = make_check("decrease", r.phi_next, r.phi_prev - in.mu * c.tau_viol / 4.0);
  } else {
    r.decrease = {"decrease", r.phi_next, r.phi_prev - in.mu * c.tau_viol / 4.0, MonitorOutcome::not_applicable};
  }
  return r;
}

}  // namespace atbm
