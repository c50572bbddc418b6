#pragma once

// Small-instance oracles and the randomized property campaign behind the
// `verify` subcommand and the test suite.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "atbm/adapt.hpp"
#include "atbm/bundle.hpp"
#include "atbm/certificate.hpp"
#include "atbm/plant.hpp"
#include "atbm/rng.hpp"
#include "atbm/subproblem.hpp"

namespace atbm {

inline constexpr double kMaxVertexAssignments = 1e5;

struct OracleInstance {
  ConvexSubproblem problem;
  std::uint64_t seed = 0;
  std::vector<Index> planted;  // per-stage columns of a zero-objective vertex, if one was planted
};

struct VertexOptimum {
  double objective = 0;
  std::vector<Index> columns;
  Index assignments = 0;
};

/// Exhaustive minimum of J_sub over vertex assignments (one unit vector per
/// stage), slacks induced in closed form. Assignments that break the anchor
/// equality are skipped.
inline VertexOptimum vertex_enumeration_oracle(const ConvexSubproblem& p) {
  const Index h = p.horizon();
  const Index m = p.bundles.samples;
  require(h >= 1 && m >= 1, "vertex_enumeration_oracle: empty instance");
  if (std::pow(static_cast<double>(m), static_cast<double>(h)) > kMaxVertexAssignments) {
    throw ContractViolation("vertex_enumeration_oracle: m^H exceeds 1e5");
  }
  const double anchor_tol = 1e-12 * (1.0 + p.x_init.lpNorm<Eigen::Infinity>());
  VertexOptimum best;
  best.objective = std::numeric_limits<double>::infinity();
  std::vector<Index> cols(static_cast<std::size_t>(h), 0);
  std::vector<Vector> alphas(static_cast<std::size_t>(h), Vector::Zero(m));
  for (;;) {
    ++best.assignments;
    if ((p.bundles.stages.front().x.col(cols.front()) - p.x_init).lpNorm<Eigen::Infinity>() <= anchor_tol) {
      for (Index k = 0; k < h; ++k) {
        alphas[static_cast<std::size_t>(k)].setZero();
        alphas[static_cast<std::size_t>(k)][cols[static_cast<std::size_t>(k)]] = 1.0;
      }
      const double j = induced_solution(p, alphas).objective;
      if (j < best.objective) {
        best.objective = j;
        best.columns = cols;
      }
    }
    Index k = 0;
    while (k < h && ++cols[static_cast<std::size_t>(k)] == m) cols[static_cast<std::size_t>(k++)] = 0;
    if (k == h) break;
  }
  return best;
}

struct OracleShape {
  Index state_dim = 2;
  Index control_dim = 1;
  Index horizon = 3;
  Index samples = 6;
};

/// Random bundle matrices of the given shape with every stage-0 sample on
/// x_init. With `plant_zero`, one vertex per stage is made exactly feasible
/// with zero residual, so the optimum of both the oracle and the
/// relaxation is 0.
inline OracleInstance random_oracle_instance(std::uint64_t seed, const OracleShape& s, bool plant_zero) {
  require(s.horizon >= 1 && s.samples >= 1 && s.state_dim >= 1 && s.control_dim >= 1,
          "random_oracle_instance: bad shape");
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.5, 5.0);
  auto gauss = [&](Index r, Index c) {
    Matrix a(r, c);
    for (Index j = 0; j < c; ++j)
      for (Index i = 0; i < r; ++i) a(i, j) = normal(rng);
    return a;
  };
  const Index nx = s.state_dim, nu = s.control_dim, m = s.samples;
  const Index nr = nx + nu, nh = 2;
  BundleSet b;
  b.samples = m;
  b.center_column = 0;
  b.radius = 1.0;
  const Vector x_init = gauss(nx, 1);
  for (Index k = 0; k < s.horizon; ++k) {
    StageBundle st;
    st.x = k == 0 ? Matrix(x_init.replicate(1, m)) : gauss(nx, m);
    st.u = gauss(nu, m);
    st.f = gauss(nx, m);
    st.r = gauss(nr, m);
    st.hard = gauss(nh, m);
    st.soft = {gauss(1, m), gauss(1, m)};
    b.stages.push_back(std::move(st));
  }
  OracleInstance inst;
  inst.seed = seed;
  if (plant_zero) {
    std::uniform_int_distribution<Index> col(0, m - 1);
    for (Index k = 0; k < s.horizon; ++k) inst.planted.push_back(col(rng));
    for (Index k = 0; k < s.horizon; ++k) {
      StageBundle& st = b.stages[static_cast<std::size_t>(k)];
      const Index c = inst.planted[static_cast<std::size_t>(k)];
      st.r.col(c).setZero();
      st.hard.col(c) = st.hard.col(c).cwiseAbs();
      for (Matrix& w : st.soft) w.col(c) = w.col(c).cwiseAbs();
      if (k + 1 < s.horizon) {
        st.f.col(c) = b.stages[static_cast<std::size_t>(k + 1)].x.col(inst.planted[static_cast<std::size_t>(k + 1)]);
      }
    }
  }
  Vector gammas(2);
  gammas << unit(rng), unit(rng);
  inst.problem = assemble(std::move(b), unit(rng), gammas, x_init);
  return inst;
}

// Property campaign ----------------------------------------------------------

struct CheckTally {
  std::string name;
  Index passed = 0;
  Index failed = 0;
  std::string first_failure;  // reproducer: seed and details
};

struct CampaignReport {
  std::uint64_t seed = 0;
  Index instances = 0;
  std::vector<CheckTally> checks;

  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const CheckTally& c) { return c.failed == 0; });
  }
  const CheckTally* find(const std::string& name) const {
    for (const CheckTally& c : checks) {
      if (c.name == name) return &c;
    }
    return nullptr;
  }
};

struct CampaignOptions {
  // Mutation smoke test: evaluates the merit function with [v]_+ in place of
  // [v]_-, which the phi-consistency checks must catch.
  bool corrupt_negative_part = false;
};

/// Random smooth stage functions on n_x = 2, n_u = 1: a pendulum-like map,
/// tracking residual, box-type hard rows and one soft row per class.
inline ProblemFunctions random_smooth_functions(Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix a(2, 2), bm(2, 1);
  for (Index i = 0; i < 4; ++i) a(i / 2, i % 2) = 0.3 * normal(rng);
  a.diagonal().array() += 1.0;
  bm << 0.1 * normal(rng), 0.5 + 0.1 * normal(rng);
  const double curv = 0.2 * normal(rng);
  const Vector xr = Vector::Random(2);
  const double bound = 1.0 + std::abs(normal(rng));
  ProblemFunctions f;
  f.state_dim = 2;
  f.control_dim = 1;
  f.residual_dim = 3;
  f.hard_dim = 2;
  f.soft_dims = {1, 1};
  f.dynamics = [a, bm, curv](Index, const Vector& x, const Vector& u) {
    Vector next = a * x + bm * u;
    next[1] += curv * std::sin(x[0]);
    return next;
  };
  f.residual = [xr](Index, const Vector& x, const Vector& u) {
    Vector r(3);
    r << 3.0 * (x - xr), 0.5 * u[0];
    return r;
  };
  f.hard = [bound](Index, const Vector&, const Vector& u) {
    Vector c(2);
    c << bound - u[0], bound + u[0];
    return c;
  };
  f.soft = [](Index, Index j, const Vector& x, const Vector&) {
    Vector c(1);
    c[0] = j == 0 ? 0.5 - x[0] : x[0] + 0.5;
    return c;
  };
  return f;
}

/// Random affine stage functions F = A x + B u + c with n_x = 4, n_u = 2.
inline ProblemFunctions random_affine_functions(Rng& rng, Matrix* a_out = nullptr) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix a(4, 4), bm(4, 2);
  Vector c(4);
  for (Index i = 0; i < 16; ++i) a(i / 4, i % 4) = normal(rng);
  for (Index i = 0; i < 8; ++i) bm(i / 2, i % 2) = normal(rng);
  for (Index i = 0; i < 4; ++i) c[i] = normal(rng);
  if (a_out) {
    *a_out = Matrix(4, 6);
    *a_out << a, bm;
  }
  ProblemFunctions f;
  f.state_dim = 4;
  f.control_dim = 2;
  f.residual_dim = 6;
  f.dynamics = [a, bm, c](Index, const Vector& x, const Vector& u) { return Vector(a * x + bm * u + c); };
  f.residual = [](Index, const Vector& x, const Vector& u) {
    Vector r(6);
    r << x, u;
    return r;
  };
  return f;
}

inline Trajectory random_trajectory(Rng& rng, Index horizon, Index nx, Index nu, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Trajectory z;
  for (Index k = 0; k < horizon; ++k) {
    Vector x(nx), u(nu);
    for (Index i = 0; i < nx; ++i) x[i] = normal(rng);
    for (Index i = 0; i < nu; ++i) u[i] = normal(rng);
    z.states.push_back(x);
    z.controls.push_back(u);
  }
  return z;
}

namespace detail {

inline double merit(const Trajectory& z, double mu, const Vector& gammas, const ProblemFunctions& f,
                    const Vector& x_init, bool corrupt) {
  if (!corrupt) return penalized_objective(z, mu, gammas, f, x_init);
  const Index h = z.horizon();
  auto part = [](const Vector& v) { return Vector(v.cwiseMax(0.0)); };
  double cost = 0.0, hard = (z.states.front() - x_init).lpNorm<1>(), soft = 0.0;
  for (Index k = 0; k < h; ++k) {
    cost += f.residual(k, z.states[k], z.controls[k]).squaredNorm();
    if (k + 1 == h) break;
    hard += (f.dynamics(k, z.states[k], z.controls[k]) - z.states[k + 1]).lpNorm<1>();
    hard += part(f.hard(k, z.states[k], z.controls[k])).lpNorm<1>();
    for (Index j = 0; j < f.soft_classes(); ++j) soft += gammas[j] * part(f.soft(k, j, z.states[k], z.controls[k])).lpNorm<1>();
  }
  return cost + mu * hard + soft;
}

}  // namespace detail

/// Runs every cross-module invariant over `instances` seeded instances.
inline CampaignReport run_property_campaign(std::uint64_t seed, Index instances, const CampaignOptions& opt = {}) {
  require(instances >= 0, "run_property_campaign: negative instance count");
  CampaignReport rep;
  rep.seed = seed;
  rep.instances = instances;
  if (instances == 0) return rep;

  std::vector<CheckTally> tallies;
  auto record = [&](const std::string& name, bool ok, std::uint64_t s, const std::string& detail) {
    auto it = std::find_if(tallies.begin(), tallies.end(), [&](const CheckTally& c) { return c.name == name; });
    if (it == tallies.end()) {
      tallies.push_back({name, 0, 0, {}});
      it = std::prev(tallies.end());
    }
    if (ok) {
      ++it->passed;
    } else {
      if (it->failed == 0) it->first_failure = "seed " + std::to_string(s) + ": " + detail;
      ++it->failed;
    }
  };
  auto close = [](double a, double b, double rel) { return std::abs(a - b) <= rel * std::max(1.0, std::abs(b)); };
  auto str = [](double v) {
    std::ostringstream o;
    o.precision(17);
    o << v;
    return o.str();
  };

  for (Index n = 0; n < instances; ++n) {
    const std::uint64_t s = derive_seed(seed, {static_cast<std::uint64_t>(n)});
    Rng rng(s);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    // bundle: exactness on affine dynamics, containment and directional coverage.
    {
      Matrix ab;
      const ProblemFunctions f = random_affine_functions(rng, &ab);
      const Trajectory z = random_trajectory(rng, 5, 4, 2);
      const double delta = 0.1 + unit(rng);
      const BundleSet b = build_bundles(z, delta, f, s, false);
      double worst = 0, outside = 0;
      for (int trial = 0; trial < 10; ++trial) {
        for (const StageBundle& st : b.stages) {
          Vector a(b.samples);
          for (Index i = 0; i < a.size(); ++i) a[i] = -std::log(1.0 - unit(rng));
          a /= a.sum();
          const Vector x = st.x * a, u = st.u * a;
          worst = std::max(worst, (st.f * a - f.dynamics(0, x, u)).lpNorm<Eigen::Infinity>());
          Vector c(6);
          c << st.x.col(b.center_column), st.u.col(b.center_column);
          Vector p(6);
          p << x, u;
          outside = std::max(outside, (p - c).norm() - delta);
        }
      }
      record("bundle.affine_exactness", worst <= 1e-10 * (1.0 + ab.norm()), s, "defect " + str(worst));
      record("bundle.convex_hull_containment", outside <= 1e-12, s, "excess " + str(outside));
      std::normal_distribution<double> normal(0.0, 1.0);
      Vector d(6);
      for (Index i = 0; i < 6; ++i) d[i] = normal(rng);
      d.normalize();
      const StageBundle& st = b.stages[2];
      Vector c(6);
      c << st.x.col(0), st.u.col(0);
      double best = -1e300;
      for (Index i = 0; i < b.samples; ++i) {
        Vector p(6);
        p << st.x.col(i), st.u.col(i);
        best = std::max(best, (p - c).dot(d));
      }
      record("bundle.directional_coverage", best >= delta / std::sqrt(6.0) - 1e-12, s, "reach " + str(best));
    }

    // subproblem and certificate: baseline identity, decrease, monotonicity.
    {
      const ProblemFunctions f = random_smooth_functions(rng);
      const Index h = 2 + static_cast<Index>(unit(rng) * 3.0);
      const Trajectory z = random_trajectory(rng, h, 2, 1);
      const double mu = 1.0 + 20.0 * unit(rng);
      Vector gammas(2);
      gammas << 0.5 + 10.0 * unit(rng), 0.5 + 10.0 * unit(rng);
      const BundleSet b = build_bundles(z, 0.05 + 0.5 * unit(rng), f, s);
      const ConvexSubproblem p = assemble(b, mu, gammas, z.states.front());
      const double at_center = induced_solution(p, vertex_weights(p, p.bundles.center_column)).objective;
      const double phi = detail::merit(z, mu, gammas, f, z.states.front(), opt.corrupt_negative_part);
      record("phi.baseline_identity", close(at_center, phi, 1e-8), s, "J_sub " + str(at_center) + " phi " + str(phi));
      const SubproblemSolution sol = solve(p);
      record("subproblem.solver_status", sol.ok(), s, to_string(sol.status));
      record("subproblem.decrease", sol.objective <= phi + 1e-7 * std::max(1.0, std::abs(phi)), s,
             "J_sub " + str(sol.objective) + " phi " + str(phi));
      bool simplex = true;
      for (const Vector& a : sol.alphas) simplex = simplex && (a.array() >= 0).all() && std::abs(a.sum() - 1.0) <= 1e-12;
      record("subproblem.simplex", simplex, s, "weights off the simplex");
      const Trajectory next = recover(p.bundles, sol);
      double radius = 0;
      for (Index k = 0; k < h; ++k) {
        const double d2 = (next.states[k] - z.states[k]).squaredNorm() + (next.controls[k] - z.controls[k]).squaredNorm();
        radius = std::max(radius, std::sqrt(d2) - p.bundles.radius);
      }
      record("subproblem.recovered_in_trust_region", radius <= 1e-12, s, "excess " + str(radius));
      const double phi_mu = detail::merit(z, 2.0 * mu, gammas, f, z.states.front(), opt.corrupt_negative_part);
      Vector g2 = gammas;
      g2[1] *= 2.0;
      const double phi_g = detail::merit(z, mu, g2, f, z.states.front(), opt.corrupt_negative_part);
      record("phi.monotone_in_penalties", phi_mu >= phi && phi_g >= phi, s, "phi decreased with a larger penalty");
    }

    // vertex enumeration oracle
    {
      OracleShape shape;
      shape.horizon = 2 + static_cast<Index>(unit(rng) * 3.0);
      shape.samples = 2 + static_cast<Index>(unit(rng) * 7.0);
      const bool plant = unit(rng) < 0.3;
      const OracleInstance inst = random_oracle_instance(s, shape, plant);
      const VertexOptimum best = vertex_enumeration_oracle(inst.problem);
      const SubproblemSolution sol = solve(inst.problem);
      const double tol = 1e-8 * std::max(1.0, std::abs(best.objective));
      record("oracle.solver_below_vertex_optimum", sol.ok() && sol.objective <= best.objective + tol, s,
             "solver " + str(sol.objective) + " vertex " + str(best.objective));
      if (plant) {
        record("oracle.zero_vertex_equality", std::abs(best.objective) <= 1e-12 && std::abs(sol.objective) <= 1e-8, s,
               "solver " + str(sol.objective) + " vertex " + str(best.objective));
      }
    }

    // adapt: penalty increases stay under the closed-form cap.
    {
      AdaptConfig c;
      AdaptState st = AdaptState::initial(c);
      for (int it = 0; it < 60; ++it) {
        Violations v;
        v.dynamics = unit(rng) < 0.7 ? 0.1 : 0.0;
        v.hard = 0.0;
        v.soft = Vector::Constant(2, unit(rng) < 0.7 ? 1.0 : 0.0);
        st = advance(st, c, v);
      }
      bool ok = st.mu_increases <= max_increases(c.mu_init, c.mu_max, c.rho_mu);
      for (Index j = 0; j < 2; ++j) {
        ok = ok && st.gamma_increases[static_cast<std::size_t>(j)] <= max_increases(c.gamma_init[j], c.gamma_max[j], c.rho_gamma);
      }
      record("adapt.penalty_stabilization", ok, s, "mu increases " + std::to_string(st.mu_increases));
    }

    // plant: the reference pair cancels the tension drift.
    {
      const PlantParams p = PlantParams::uniform(4, 500.0 + 1000.0 * unit(rng), 1.0, 0.05, 0.05, 0.05, 0.01);
      Vector t(4);
      for (Index i = 0; i < 4; ++i) t[i] = 1.0 + unit(rng) * (0.5 * p.stiffness - 1.0);
      const double v0 = 0.01 + unit(rng);
      const Vector x = make_state(t, reference_velocities(t, v0, p));
      const double drift_max = drift(x, p, v0).head(4).lpNorm<Eigen::Infinity>();
      record("plant.reference_conservation", drift_max <= 1e-9 * p.stiffness, s, "drift " + str(drift_max));
    }
  }
  rep.checks = std::move(tallies);
  return rep;
}

inline std::string format_campaign(const CampaignReport& r) {
  std::ostringstream o;
  o << "campaign seed " << r.seed << ", " << r.instances << " instances\n";
  for (const CheckTally& c : r.checks) {
    o << (c.failed == 0 ? "PASS " : "FAIL ") << c.name << "  " << c.passed << " passed, " << c.failed << " failed";
    if (c.failed) o << "  [" << c.first_failure << "]";
    o << "\n";
  }
  o << (r.passed() ? "campaign passed\n" : "campaign FAILED\n");
  return o.str();
}

}  // namespace atbm
