#pragma once

// Convex bundle subproblem: simplex weights per stage, signed dynamics slacks,
// non-negative hard/soft slacks, l1 penalties.
//
//   min  sum_k |W_r^k a_k|^2 + mu sum_{k<H-1} (|s_k|_1 + |w_k|_1)
//                             + sum_j g_j sum_{k<H-1} |d_kj|_1
//   s.t. W_f^k a_k = W_x^{k+1} a_{k+1} + s_k
//        W_hard^k a_k + w_k >= 0,  W_j^k a_k + d_kj >= 0
//        a_k in the simplex,  W_x^0 a_0 = x_init
//
// The l1 terms are split into non-negative parts; the result is handed to the
// staged interior-point layer in qp.hpp.

#include <algorithm>
#include <string>
#include <vector>

#include "atbm/bundle.hpp"
#include "atbm/qp.hpp"
#include "atbm/types.hpp"

namespace atbm {

struct ConvexSubproblem {
  BundleSet bundles;
  double mu = 0;
  Vector gammas;
  Vector x_init;
  // True when every stage-0 sample carries x_init, so the anchor rows are a
  // multiple of the stage-0 simplex row and need not be passed to the solver.
  bool anchor_implied = false;

  Index horizon() const { return bundles.horizon(); }
  Index simplex_blocks() const { return horizon(); }
  Index coupling_blocks() const { return horizon() - 1; }
  Index anchor_rows() const { return x_init.size(); }
};

enum class SolveStatus { optimal, iteration_limit, numerical_failure };

inline const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::optimal: return "optimal";
    case SolveStatus::iteration_limit: return "iteration_limit";
    case SolveStatus::numerical_failure: return "numerical_failure";
  }
  return "unknown";
}

struct SubproblemSolution {
  std::vector<Vector> alphas;                   // H simplex weights
  std::vector<Vector> dynamics_slacks;          // s_k, k < H-1
  std::vector<Vector> hard_slacks;              // w_k, k < H-1
  std::vector<std::vector<Vector>> soft_slacks; // d_kj, [k][j], k < H-1
  double objective = 0;                         // J_sub at the returned point
  SolveStatus status = SolveStatus::numerical_failure;
  int iterations = 0;
  double primal_residual = 0;
  double dual_residual = 0;
  double gap = 0;

  bool ok() const { return status == SolveStatus::optimal; }
};

struct SolverSettings {
  double tol_feas = 1e-8;
  double tol_opt = 1e-8;
  int max_iterations = 200;
};

inline ConvexSubproblem assemble(BundleSet bundles, double mu, const Vector& gammas, const Vector& x_init) {
  require(mu > 0 && std::isfinite(mu), "assemble: mu must be positive");
  require(bundles.horizon() >= 1, "assemble: empty bundle set");
  const Index nx = bundles.state_dim();
  const Index m = bundles.samples;
  const Index classes = bundles.soft_classes();
  require(gammas.size() == classes, "assemble: expected " + std::to_string(classes) + " soft penalties");
  require((gammas.array() > 0).all() && gammas.allFinite(), "assemble: soft penalties must be positive");
  require(x_init.size() == nx, "assemble: x_init dimension mismatch");
  for (Index k = 0; k < bundles.horizon(); ++k) {
    const StageBundle& s = bundles.stages[k];
    const bool cols_ok = s.x.cols() == m && s.u.cols() == m && s.f.cols() == m && s.r.cols() == m &&
                         s.hard.cols() == m;
    require(cols_ok, "assemble: column counts differ at stage " + std::to_string(k));
    require(s.x.rows() == nx && s.f.rows() == nx, "assemble: state rows differ at stage " + std::to_string(k));
    require(s.r.rows() == bundles.residual_dim() && s.hard.rows() == bundles.hard_dim(),
            "assemble: residual/constraint rows differ at stage " + std::to_string(k));
    require(static_cast<Index>(s.soft.size()) == classes, "assemble: soft classes differ at stage " + std::to_string(k));
    for (Index j = 0; j < classes; ++j) {
      require(s.soft[j].cols() == m && s.soft[j].rows() == bundles.soft_dim(j),
              "assemble: soft block shape differs at stage " + std::to_string(k));
    }
  }

  ConvexSubproblem p;
  const double tol = 1e-12 * (1.0 + x_init.lpNorm<Eigen::Infinity>());
  p.anchor_implied = ((bundles.stages.front().x.colwise() - x_init).cwiseAbs().maxCoeff() <= tol);
  p.bundles = std::move(bundles);
  p.mu = mu;
  p.gammas = gammas;
  p.x_init = x_init;
  return p;
}

/// Evaluate the subproblem at given simplex weights with the slacks set to
/// their smallest feasible values (s exact, w and d the negative parts).
inline SubproblemSolution induced_solution(const ConvexSubproblem& p, std::vector<Vector> alphas) {
  const Index h = p.horizon();
  require(static_cast<Index>(alphas.size()) == h, "induced_solution: need one weight vector per stage");
  SubproblemSolution sol;
  sol.alphas = std::move(alphas);
  const Index classes = p.gammas.size();
  double cost = 0.0;
  for (Index k = 0; k < h; ++k) {
    cost += (p.bundles.stages[k].r * sol.alphas[k]).squaredNorm();
  }
  double hard_penalty = 0.0;
  Vector soft_penalty = Vector::Zero(classes);
  for (Index k = 0; k + 1 < h; ++k) {
    const StageBundle& s = p.bundles.stages[k];
    const Vector& a = sol.alphas[k];
    sol.dynamics_slacks.push_back(s.f * a - p.bundles.stages[k + 1].x * sol.alphas[k + 1]);
    sol.hard_slacks.push_back(negative_part(s.hard * a));
    std::vector<Vector> soft;
    for (Index j = 0; j < classes; ++j) {
      soft.push_back(negative_part(s.soft[j] * a));
      soft_penalty[j] += soft.back().lpNorm<1>();
    }
    sol.soft_slacks.push_back(std::move(soft));
    hard_penalty += sol.dynamics_slacks.back().lpNorm<1>() + sol.hard_slacks.back().lpNorm<1>();
  }
  sol.objective = cost + p.mu * hard_penalty + p.gammas.dot(soft_penalty);
  sol.status = SolveStatus::optimal;
  return sol;
}

/// Every stage at the same unit vector e_i.
inline std::vector<Vector> vertex_weights(const ConvexSubproblem& p, Index column) {
  std::vector<Vector> a(static_cast<std::size_t>(p.horizon()), Vector::Zero(p.bundles.samples));
  for (auto& v : a) v[column] = 1.0;
  return a;
}

namespace detail {

/// Staged QP form. The residual enters as |r_c + (W_r - r_c 1') a|^2 with the
/// constant |r_c|^2 returned separately; every block is taken relative to the
/// center column so entries live at the scale of the trust radius.
inline qp::Problem staged_form(const ConvexSubproblem& p, double* constant = nullptr) {
  const BundleSet& b = p.bundles;
  const Index h = b.horizon();
  const Index m = b.samples;
  const Index c = b.center_column;
  const Index nx = b.state_dim();
  const Index nh = b.hard_dim();
  auto centered = [&](const Matrix& w) -> Matrix { return w.colwise() - w.col(c); };

  qp::Problem qp;
  double base = 0.0;
  for (Index k = 0; k < h; ++k) {
    const StageBundle& s = b.stages[k];
    qp::Stage st;
    const Matrix rt = centered(s.r);
    const Vector rc = s.r.col(c);
    st.hessian = 2.0 * rt.transpose() * rt;
    st.cost = 2.0 * rt.transpose() * rc;
    base += rc.squaredNorm();

    if (k + 1 < h) {
      Index rows = nx + nh;
      for (Index j = 0; j < b.soft_classes(); ++j) rows += b.soft_dim(j);
      st.rows.resize(rows, m);
      st.rhs.resize(rows);
      Index r = 0;
      const StageBundle& nb = b.stages[k + 1];
      st.rows.middleRows(r, nx) = centered(s.f);
      st.next = -centered(nb.x);
      st.rhs.segment(r, nx) = nb.x.col(c) - s.f.col(c);
      for (Index i = 0; i < nx; ++i) {
        st.slacks.push_back({r + i, -1.0, p.mu, 0.0, true});
        st.slacks.push_back({r + i, 1.0, p.mu, 0.0, true});
      }
      r += nx;
      st.rows.middleRows(r, nh) = centered(s.hard);
      st.rhs.segment(r, nh) = -s.hard.col(c);
      for (Index i = 0; i < nh; ++i) {
        st.slacks.push_back({r + i, 1.0, p.mu, 0.0, true});
        st.slacks.push_back({r + i, -1.0, 0.0, 0.0, true});
      }
      r += nh;
      for (Index j = 0; j < b.soft_classes(); ++j) {
        const Index nj = b.soft_dim(j);
        st.rows.middleRows(r, nj) = centered(s.soft[static_cast<std::size_t>(j)]);
        st.rhs.segment(r, nj) = -s.soft[static_cast<std::size_t>(j)].col(c);
        for (Index i = 0; i < nj; ++i) {
          st.slacks.push_back({r + i, 1.0, p.gammas[j], 0.0, true});
          st.slacks.push_back({r + i, -1.0, 0.0, 0.0, true});
        }
        r += nj;
      }
    } else {
      st.rows.resize(0, m);
      st.rhs.resize(0);
    }

    const bool anchor = k == 0 && !p.anchor_implied;
    const Index eq_rows = 1 + (anchor ? nx : 0);
    st.eq.resize(eq_rows, m);
    st.eq_rhs.resize(eq_rows);
    st.eq.row(0).setOnes();
    st.eq_rhs[0] = 1.0;
    if (anchor) {
      st.eq.bottomRows(nx) = centered(s.x);
      st.eq_rhs.tail(nx) = p.x_init - s.x.col(c);
    }
    qp.stages.push_back(std::move(st));
  }
  qp.constant = base;
  if (constant) *constant = base;
  return qp;
}

}  // namespace detail

/// Solve the subproblem. The returned weights are projected onto the simplex
/// and all slacks are recomputed from them, so the invariants hold exactly
/// and `objective` is J_sub at the returned point.
inline SubproblemSolution solve(const ConvexSubproblem& p, const SolverSettings& settings = {}) {
  const qp::Problem staged = detail::staged_form(p);
  const qp::Result r = qp::solve(staged, {settings.tol_feas, settings.tol_opt, settings.max_iterations});

  const Index m = p.bundles.samples;
  std::vector<Vector> alphas;
  for (Index k = 0; k < p.horizon(); ++k) {
    Vector a = r.weights[static_cast<std::size_t>(k)].cwiseMax(0.0);
    const double sum = a.sum();
    if (sum > 0 && std::isfinite(sum)) {
      a /= sum;
    } else {
      a = Vector::Constant(m, 1.0 / static_cast<double>(m));
    }
    alphas.push_back(std::move(a));
  }
  SubproblemSolution sol = induced_solution(p, std::move(alphas));
  // keep the current iterate's vertex when it is no worse
  const Index c = p.bundles.center_column;
  const double anchor_gap = (p.bundles.stages.front().x.col(c) - p.x_init).lpNorm<Eigen::Infinity>();
  if (anchor_gap <= 1e-12 * (1.0 + p.x_init.lpNorm<Eigen::Infinity>())) {
    SubproblemSolution center = induced_solution(p, vertex_weights(p, c));
    if (center.objective <= sol.objective) sol = std::move(center);
  }
  sol.iterations = r.iterations;
  sol.primal_residual = r.primal_residual;
  sol.dual_residual = r.dual_residual;
  sol.gap = r.gap;
  switch (r.status) {
    case qp::Status::solved: sol.status = SolveStatus::optimal; break;
    case qp::Status::max_iterations: sol.status = SolveStatus::iteration_limit; break;
    case qp::Status::numerical_failure: sol.status = SolveStatus::numerical_failure; break;
  }
  return sol;
}

/// x_k = W_x^k a_k, u_k = W_u^k a_k.
inline Trajectory recover(const BundleSet& bundles, const SubproblemSolution& sol) {
  require(static_cast<Index>(sol.alphas.size()) == bundles.horizon(), "recover: horizon mismatch");
  Trajectory z;
  for (Index k = 0; k < bundles.horizon(); ++k) {
    z.states.push_back(bundles.stages[k].x * sol.alphas[k]);
    z.controls.push_back(bundles.stages[k].u * sol.alphas[k]);
  }
  return z;
}

}  // namespace atbm
