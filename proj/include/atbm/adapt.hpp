#pragma once

// Violation metrics and the trust-region / penalty schedules driven by them.
// All comparisons are strict; a metric sitting exactly on a threshold falls
// in the "unchanged" branch.

#include <algorithm>
#include <cmath>
#include <deque>
#include <string>

#include "atbm/subproblem.hpp"
#include "atbm/types.hpp"

namespace atbm {

struct AdaptConfig {
  double beta_exp = 1.5;
  double beta_con = 0.5;
  double delta_init = 0.5;
  double delta_min = 0.01;
  double delta_max = 2.0;
  double tau_feas = 1e-4;
  double tau_viol = 1e-2;
  double rho_mu = 2.0;
  double rho_gamma = 2.0;
  double mu_init = 10.0;
  double mu_max = 1e6;
  Vector gamma_init = (Vector(2) << 100.0, 10.0).finished();
  Vector gamma_max = Vector::Constant(2, 1e6);
  Vector tau_soft = Vector::Constant(2, 1e-2);
  double eps_feas = 1e-5;
  double eps_z = 1e-4;

  Index soft_classes() const { return gamma_init.size(); }

  void validate() const {
    auto fail = [](const std::string& msg) { throw ValidationError("AdaptConfig: " + msg); };
    if (!(beta_exp > 1)) fail("beta_exp must exceed 1");
    if (!(beta_con > 0 && beta_con < 1)) fail("beta_con must lie in (0, 1)");
    if (!(delta_min > 0 && delta_min <= delta_max)) fail("need 0 < delta_min <= delta_max");
    if (!(delta_init >= delta_min && delta_init <= delta_max)) fail("delta_init outside [delta_min, delta_max]");
    if (!(eps_feas > 0 && eps_feas < tau_feas && tau_feas < tau_viol)) {
      fail("need 0 < eps_feas < tau_feas < tau_viol");
    }
    if (!(rho_mu > 1 && rho_gamma > 1)) fail("rho_mu and rho_gamma must exceed 1");
    if (!(mu_init > 0 && mu_init <= mu_max)) fail("need 0 < mu_init <= mu_max");
    if (gamma_max.size() != gamma_init.size() || tau_soft.size() != gamma_init.size()) {
      fail("gamma_init, gamma_max and tau_soft must have one entry per soft class");
    }
    for (Index j = 0; j < gamma_init.size(); ++j) {
      if (!(gamma_init[j] > 0 && gamma_init[j] <= gamma_max[j])) fail("need 0 < gamma_init <= gamma_max");
      if (!(tau_soft[j] > 0)) fail("tau_soft must be positive");
    }
    if (!(eps_z > 0)) fail("eps_z must be positive");
  }
};

struct Violations {
  double dynamics = 0;  // nu_dyn
  double hard = 0;      // nu_hard
  Vector soft;          // nu_j
};

struct AdaptState {
  double delta = 0;
  double mu = 0;
  Vector gammas;
  Index iteration = 0;
  Index mu_increases = 0;
  std::vector<Index> gamma_increases;
  std::deque<Violations> history;
  static constexpr std::size_t kHistory = 16;

  static AdaptState initial(const AdaptConfig& c) {
    AdaptState s;
    s.delta = c.delta_init;
    s.mu = c.mu_init;
    s.gammas = c.gamma_init;
    s.gamma_increases.assign(static_cast<std::size_t>(c.gamma_init.size()), 0);
    return s;
  }
};

/// nu_dyn = max_k |s_k|_inf, nu_hard = max_k |w_k|_inf, nu_j = sum_k |d_kj|_1.
inline Violations violations(const SubproblemSolution& sol) {
  Violations v;
  for (const Vector& s : sol.dynamics_slacks) {
    if (s.size()) v.dynamics = std::max(v.dynamics, s.lpNorm<Eigen::Infinity>());
  }
  for (const Vector& w : sol.hard_slacks) {
    if (w.size()) v.hard = std::max(v.hard, w.lpNorm<Eigen::Infinity>());
  }
  const std::size_t classes = sol.soft_slacks.empty() ? 0 : sol.soft_slacks.front().size();
  v.soft = Vector::Zero(static_cast<Index>(classes));
  for (const auto& stage : sol.soft_slacks) {
    for (std::size_t j = 0; j < classes; ++j) v.soft[static_cast<Index>(j)] += stage[j].lpNorm<1>();
  }
  return v;
}

inline double update_trust_region(const AdaptState& state, const AdaptConfig& c, double nu_dyn, double nu_hard) {
  if (nu_dyn < c.tau_feas && nu_hard < c.tau_feas) return std::min(c.beta_exp * state.delta, c.delta_max);
  if (nu_dyn > c.tau_viol || nu_hard > c.tau_viol) return std::max(c.beta_con * state.delta, c.delta_min);
  return state.delta;
}

struct Penalties {
  double mu = 0;
  Vector gammas;
};

inline Penalties update_penalties(const AdaptState& state, const AdaptConfig& c, double nu_dyn, double nu_hard,
                                  const Vector& nu_soft) {
  require(nu_soft.size() == state.gammas.size(), "update_penalties: soft class count mismatch");
  Penalties p{state.mu, state.gammas};
  if (nu_dyn > c.tau_viol || nu_hard > c.tau_viol) p.mu = std::min(c.rho_mu * state.mu, c.mu_max);
  for (Index j = 0; j < p.gammas.size(); ++j) {
    if (nu_soft[j] > c.tau_soft[j]) p.gammas[j] = std::min(c.rho_gamma * state.gammas[j], c.gamma_max[j]);
  }
  return p;
}

inline bool converged(double nu_dyn, double nu_hard, double step_norm, const AdaptConfig& c) {
  return nu_dyn < c.eps_feas && nu_hard < c.eps_feas && step_norm < c.eps_z;
}

/// Apply both update rules and the bookkeeping that goes with them.
inline AdaptState advance(const AdaptState& state, const AdaptConfig& c, const Violations& v) {
  AdaptState next = state;
  next.delta = update_trust_region(state, c, v.dynamics, v.hard);
  const Penalties p = update_penalties(state, c, v.dynamics, v.hard, v.soft);
  if (p.mu != state.mu) ++next.mu_increases;
  for (Index j = 0; j < p.gammas.size(); ++j) {
    if (p.gammas[j] != state.gammas[j]) ++next.gamma_increases[static_cast<std::size_t>(j)];
  }
  next.mu = p.mu;
  next.gammas = p.gammas;
  ++next.iteration;
  next.history.push_back(v);
  if (next.history.size() > AdaptState::kHistory) next.history.pop_front();
  return next;
}

/// ceil(log_rho(cap / initial)), the most increases a geometric schedule can make.
inline Index max_increases(double initial, double cap, double rho) {
  if (cap <= initial) return 0;
  return static_cast<Index>(std::ceil(std::log(cap / initial) / std::log(rho) - 1e-12));
}

}  // namespace atbm
