#pragma once

// Outer bundle loop and the receding-horizon driver.
//
//   sample -> build bundles -> solve subproblem -> recover -> violations
//          -> adapt (Delta, mu, gamma) -> convergence test
//
// Every recovered iterate is accepted. The fixed-penalty variant runs the same
// loop with the adaptation step replaced by the identity.

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "atbm/adapt.hpp"
#include "atbm/bundle.hpp"
#include "atbm/certificate.hpp"
#include "atbm/lqr.hpp"
#include "atbm/problem.hpp"
#include "atbm/subproblem.hpp"

namespace atbm {

enum class TbmStatus { converged, iteration_cap, solver_failure };

inline const char* to_string(TbmStatus s) {
  switch (s) {
    case TbmStatus::converged: return "converged";
    case TbmStatus::iteration_cap: return "iteration_cap";
    case TbmStatus::solver_failure: return "solver_failure";
  }
  return "unknown";
}

struct IterationRecord {
  Trajectory z;  // recovered iterate z^{l+1}
  double j_sub = 0;
  Violations nu;
  double delta = 0;  // Delta^l, mu^l, gamma^l used to build this subproblem
  double mu = 0;
  Vector gammas;
  double step_norm = 0;
  double wall_ms = 0;
  int qp_iterations = 0;
  int retries = 0;  // solver failures absorbed by contracting Delta
  std::optional<MonitorRecord> monitor;
};

struct SolveTrace {
  std::vector<IterationRecord> iterations;
  TbmStatus status = TbmStatus::iteration_cap;
  Trajectory solution;
  AdaptState state;  // after the last update
  std::string failure;
};

using SubproblemHook = std::function<void(Index iteration, const ConvexSubproblem&)>;

struct TbmOptions {
  AdaptConfig config;
  Index budget = 30;
  SolverSettings solver;
  bool adaptive = true;
  std::uint64_t seed = 0;
  const LipschitzEstimates* monitor = nullptr;
  SubproblemHook on_subproblem;
};

/// Builds the stage functions for the current iterate.
using FunctionFactory = std::function<ProblemFunctions(const Trajectory&)>;

inline SolveTrace tbm_solve(const FunctionFactory& make_funcs, const Vector& x_init, Trajectory z,
                            const TbmOptions& o, std::optional<AdaptState> start = std::nullopt) {
  o.config.validate();
  require(o.budget >= 1, "tbm_solve: budget must be positive");
  SolveTrace trace;
  AdaptState state = start ? *start : AdaptState::initial(o.config);
  require(state.gammas.size() == o.config.soft_classes(), "tbm_solve: adapt state has wrong soft class count");
  trace.solution = z;

  for (Index l = 0; l < o.budget; ++l) {
    const ProblemFunctions funcs = make_funcs(z);
    z.validate(funcs.state_dim, funcs.control_dim);
    IterationRecord rec;
    const auto t0 = std::chrono::steady_clock::now();
    std::optional<ConvexSubproblem> sub;
    SubproblemSolution sol;
    for (int attempt = 0;; ++attempt) {
      const std::uint64_t seed = derive_seed(o.seed, {static_cast<std::uint64_t>(l), static_cast<std::uint64_t>(attempt)});
      sub = assemble(build_bundles(z, state.delta, funcs, seed), state.mu, state.gammas, x_init);
      if (o.on_subproblem) o.on_subproblem(l, *sub);
      sol = solve(*sub, o.solver);
      if (sol.ok()) break;
      if (!o.adaptive || state.delta <= o.config.delta_min) {
        trace.status = TbmStatus::solver_failure;
        trace.failure = std::string("subproblem ") + to_string(sol.status) + " at iteration " + std::to_string(l) +
                        " with Delta = " + std::to_string(state.delta);
        trace.state = state;
        return trace;
      }
      state.delta = std::max(o.config.beta_con * state.delta, o.config.delta_min);
      ++rec.retries;
    }
    Trajectory next = recover(sub->bundles, sol);
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    rec.j_sub = sol.objective;
    rec.nu = violations(sol);
    rec.delta = state.delta;
    rec.mu = state.mu;
    rec.gammas = state.gammas;
    rec.step_norm = distance(next, z);
    rec.qp_iterations = sol.iterations;
    if (o.monitor) {
      MonitorInput in;
      in.prev = &z;
      in.next = &next;
      in.funcs = &funcs;
      in.x_init = x_init;
      in.j_sub = sol.objective;
      in.delta = state.delta;
      in.mu = state.mu;
      in.gammas = state.gammas;
      in.nu = rec.nu;
      rec.monitor = monitor_iteration(in, *o.monitor, o.config);
    }
    rec.z = next;

    if (o.adaptive) {
      state = advance(state, o.config, rec.nu);
    } else {
      ++state.iteration;
      state.history.push_back(rec.nu);
      if (state.history.size() > AdaptState::kHistory) state.history.pop_front();
    }
    const bool done = converged(rec.nu.dynamics, rec.nu.hard, rec.step_norm, o.config);
    trace.iterations.push_back(std::move(rec));
    z = std::move(next);
    trace.solution = z;
    if (done) {
      trace.status = TbmStatus::converged;
      break;
    }
  }
  trace.state = state;
  return trace;
}

/// R2R form: stage functions from the problem, with u_prev of stage 0 fixed
/// to the control applied at the previous plant step.
inline SolveTrace tbm_solve(const R2RProblem& p, const HorizonReferences& refs, const Vector& x_init,
                            const Vector& u_applied, const Trajectory& z_init, const TbmOptions& o,
                            std::optional<AdaptState> start = std::nullopt) {
  p.validate();
  require(x_init.size() == p.state_dim() && u_applied.size() == p.control_dim(), "tbm_solve: dimension mismatch");
  const FunctionFactory factory = [&](const Trajectory& z) { return make_functions(p, refs, u_applied, z); };
  return tbm_solve(factory, x_init, z_init, o, std::move(start));
}

/// Sampled estimates over the hard-constraint box, with the stage functions
/// of the first plant step.
inline LipschitzEstimates estimate_problem_lipschitz(const R2RProblem& p, std::uint64_t seed, Index pairs = 2000) {
  p.validate();
  const Index n = p.plant.rollers;
  const Vector x0 = p.state_reference(0.0);
  const ProblemFunctions f = make_functions(p, horizon_references(p, 0), equilibrium_torques(x0, p.plant),
                                            hold_trajectory(p, x0));
  SampleDomain d;
  d.lower.resize(3 * n);
  d.upper.resize(3 * n);
  d.lower << Vector::Constant(n, p.tension_min), Vector::Constant(n, p.velocity_min), Vector::Constant(n, -p.torque_limit);
  d.upper << Vector::Constant(n, p.tension_max), Vector::Constant(n, p.velocity_max), Vector::Constant(n, p.torque_limit);
  d.horizon = p.horizon;
  Rng rng(derive_seed(seed, {0x6c6970ULL}));
  return estimate_lipschitz(f, d, pairs, rng);
}

enum class ControllerKind { atbm, tbm_fixed, lqr };

inline const char* to_string(ControllerKind k) {
  switch (k) {
    case ControllerKind::atbm: return "atbm";
    case ControllerKind::tbm_fixed: return "tbm-fixed";
    case ControllerKind::lqr: return "lqr";
  }
  return "unknown";
}

inline ControllerKind parse_controller(const std::string& s) {
  if (s == "atbm") return ControllerKind::atbm;
  if (s == "tbm-fixed") return ControllerKind::tbm_fixed;
  if (s == "lqr") return ControllerKind::lqr;
  throw ValidationError("unknown controller '" + s + "' (expected atbm, tbm-fixed or lqr)");
}

/// One row per applied control.
struct StepRecord {
  double time = 0;
  Vector x;
  Vector u;
  Vector tension_ref;
  Vector velocity_ref;
  double nu_dyn = 0;
  double nu_hard = 0;
  double delta = 0;
  double mu = 0;
  Vector gammas;
  Index iterations = 0;
  double solve_ms = 0;
};

struct StepSummary {
  TbmStatus status = TbmStatus::converged;
  Index iterations = 0;
  Index mu_increases = 0;
  std::vector<Index> gamma_increases;
  Violations final_nu;
  std::vector<MonitorRecord> monitors;
  std::vector<double> subproblem_ms;
};

struct ClosedLoopTrace {
  Index rollers = 0;
  Index soft_classes = 0;
  std::vector<StepRecord> rows;
  std::vector<StepSummary> solves;  // empty for LQR
  bool failed = false;
  std::string failure;
};

struct ClosedLoopOptions {
  ControllerKind kind = ControllerKind::atbm;
  AdaptConfig config;
  Index budget = 30;
  SolverSettings solver;
  double duration = 1.0;
  std::uint64_t seed = 0;
  std::optional<Vector> initial_state;  // defaults to the reference at t = 0
  const LipschitzEstimates* monitor = nullptr;
  bool timing = false;  // wall times are left at 0 otherwise, keeping traces reproducible
  std::function<void(Index step, Index iteration, const ConvexSubproblem&)> on_subproblem;
};

inline Index step_count(double duration, double dt) {
  return static_cast<Index>(std::llround(duration / dt));
}

inline ClosedLoopTrace closed_loop(const R2RProblem& p, const ClosedLoopOptions& o) {
  p.validate();
  o.config.validate();
  require(o.duration > 0, "closed_loop: duration must be positive");
  const Index n = p.plant.rollers;
  const Index steps = step_count(o.duration, p.plant.dt);
  ClosedLoopTrace out;
  out.rollers = n;
  out.soft_classes = o.config.soft_classes();

  Rng plant_rng(derive_seed(o.seed, {0x706c616e74ULL}));
  Vector x = o.initial_state ? *o.initial_state : p.state_reference(0.0);
  require(x.size() == p.state_dim(), "closed_loop: initial state dimension mismatch");
  Vector u_applied = equilibrium_torques(x, p.plant);
  std::optional<Trajectory> previous;
  std::optional<AdaptState> carried;
  std::map<std::vector<double>, Matrix> gains;
  const Matrix q_lqr = p.q.asDiagonal();
  const Matrix r_lqr = p.r.asDiagonal();

  for (Index s = 0; s < steps; ++s) {
    const double t = static_cast<double>(s) * p.plant.dt;
    StepRecord row;
    row.time = t;
    row.x = x;
    row.tension_ref = p.tension_reference(t);
    row.velocity_ref = p.state_reference(t).tail(n);
    row.gammas = Vector::Zero(out.soft_classes);

    if (o.kind == ControllerKind::lqr) {
      const Vector x_ref = p.state_reference(t);
      const std::vector<double> key(x_ref.data(), x_ref.data() + x_ref.size());
      auto it = gains.find(key);
      if (it == gains.end()) {
        it = gains.emplace(key, lqr_gain(p.plant, x_ref, p.upstream_velocity(t), q_lqr, r_lqr)).first;
      }
      row.u = lqr_control(it->second, x, x_ref, equilibrium_torques(x_ref, p.plant), p.torque_limit);
    } else {
      const HorizonReferences refs = horizon_references(p, s);
      const Trajectory z0 = previous ? shift_trajectory(*previous, x) : hold_trajectory(p, x);
      TbmOptions to;
      to.config = o.config;
      to.budget = o.budget;
      to.solver = o.solver;
      to.adaptive = o.kind == ControllerKind::atbm;
      to.seed = derive_seed(o.seed, {0x62756e646c65ULL, static_cast<std::uint64_t>(s)});
      to.monitor = o.monitor;
      if (o.on_subproblem) to.on_subproblem = [&](Index l, const ConvexSubproblem& sp) { o.on_subproblem(s, l, sp); };
      std::optional<AdaptState> start;
      if (carried && to.adaptive) {
        // Delta, mu and gamma carry over between plant steps; counters restart.
        start = AdaptState::initial(o.config);
        start->delta = carried->delta;
        start->mu = carried->mu;
        start->gammas = carried->gammas;
      }
      const SolveTrace tr = tbm_solve(p, refs, x, u_applied, z0, to, start);

      StepSummary sum;
      sum.status = tr.status;
      sum.iterations = static_cast<Index>(tr.iterations.size());
      sum.mu_increases = tr.state.mu_increases;
      sum.gamma_increases = tr.state.gamma_increases;
      for (const IterationRecord& r : tr.iterations) {
        if (r.monitor) sum.monitors.push_back(*r.monitor);
        sum.subproblem_ms.push_back(r.wall_ms);
      }
      if (!tr.iterations.empty()) sum.final_nu = tr.iterations.back().nu;
      out.solves.push_back(sum);
      if (tr.status == TbmStatus::solver_failure) {
        out.failed = true;
        out.failure = "step " + std::to_string(s) + ": " + tr.failure;
        return out;
      }
      const IterationRecord& last = tr.iterations.back();
      row.u = tr.solution.controls.front();
      row.nu_dyn = last.nu.dynamics;
      row.nu_hard = last.nu.hard;
      row.delta = last.delta;
      row.mu = last.mu;
      row.gammas = last.gammas;
      row.iterations = sum.iterations;
      if (o.timing) {
        for (double ms : sum.subproblem_ms) row.solve_ms += ms;
      }
      previous = tr.solution;
      carried = tr.state;
    }

    u_applied = row.u;
    x = step_stochastic(x, row.u, p.plant, p.upstream_velocity(t), plant_rng);
    out.rows.push_back(std::move(row));
    if (!x.allFinite()) {
      out.failed = true;
      out.failure = "step " + std::to_string(s) + ": plant state is not finite";
      return out;
    }
  }
  return out;
}

/// A posteriori report for one monitored solve. The final penalties play the
/// role of the stabilized values; phi(z^K*) is the merit value where they
/// first applied and phi_min the smallest value observed under them.
inline std::optional<BoundReport> a_posteriori_bounds(const StepSummary& s, const AdaptConfig& c,
                                                      const LipschitzEstimates& e, Index horizon) {
  if (s.monitors.empty()) return std::nullopt;
  const MonitorRecord& last = s.monitors.back();
  std::size_t first = s.monitors.size() - 1;
  while (first > 0 && s.monitors[first - 1].mu == last.mu && s.monitors[first - 1].gammas == last.gammas) --first;
  BoundInputs in;
  in.horizon = horizon;
  in.mu_bar = last.mu;
  in.gamma_bar = last.gammas;
  in.phi_at_k_star = s.monitors[first].phi_prev;
  in.phi_min = in.phi_at_k_star;
  for (std::size_t i = first; i < s.monitors.size(); ++i) {
    in.phi_min = std::min({in.phi_min, s.monitors[i].phi_prev, s.monitors[i].phi_next});
  }
  in.delta_at_k_star = s.monitors[first].radius;
  BoundReport r = complexity_bounds(c, e, in);
  r.phi_min_source = "minimum observed";
  return r;
}

/// A priori report: penalties at their caps, phi_min = 0, Delta^K* = Delta_max.
/// phi(z^K*) is taken as the largest merit value of the initial hold
/// trajectory against the references in force at t = 0 and after each event.
inline BoundReport a_priori_bounds(const R2RProblem& p, const AdaptConfig& c, const LipschitzEstimates& e) {
  p.validate();
  c.validate();
  const Vector x0 = p.state_reference(0.0);
  const Trajectory hold = hold_trajectory(p, x0);
  const Vector u0 = equilibrium_torques(x0, p.plant);
  std::vector<Index> steps{0};
  auto add_events = [&](const StepSchedule& s) {
    for (const auto& ev : s.events) steps.push_back(static_cast<Index>(std::llround(ev.time / p.plant.dt)));
  };
  for (const StepSchedule& s : p.tension_refs) add_events(s);
  add_events(p.upstream);
  BoundInputs in;
  in.horizon = p.horizon;
  in.mu_bar = c.mu_max;
  in.gamma_bar = c.gamma_max;
  for (Index step : steps) {
    const ProblemFunctions f = make_functions(p, horizon_references(p, step), u0, hold);
    in.phi_at_k_star = std::max(in.phi_at_k_star, penalized_objective(hold, c.mu_max, c.gamma_max, f, x0));
  }
  in.phi_min = 0.0;
  in.delta_at_k_star = std::sqrt(static_cast<double>(p.horizon)) * c.delta_max;
  return complexity_bounds(c, e, in);
}

}  // namespace atbm
