#pragma once

// Primal-dual interior-point solver (Mehrotra predictor-corrector) for QPs
// with stage structure:
//
//   minimize   sum_k 1/2 a_k'P_k a_k + q_k'a_k + sum_s 1/2 h_s s^2 + c_s s
//   subject to G_k a_k + N_k a_{k+1} + sum_{s in row} sign_s s = b_k   (slack rows)
//              C_k a_k = d_k                                          (equality rows)
//              a >= 0,  s >= 0 where bounded
//
// N_k acts on the leading rows of stage k only. Each slack sits in exactly one
// row and every slack row owns at least one slack, so slacks and row
// multipliers are eliminated in closed form. What is left is block
// tridiagonal in the weights; it is factored by a forward recursion that
// treats the equality rows of each block locally.

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "atbm/types.hpp"

namespace atbm::qp {

struct Slack {
  Index row = 0;
  double sign = 1.0;
  double cost = 0.0;
  double hessian = 0.0;
  bool bounded = true;
};

struct Stage {
  Matrix hessian;  // P_k, m x m (empty means zero)
  Vector cost;     // q_k, defines m
  Matrix rows;     // G_k
  Matrix next;     // N_k, leading rows x m_{k+1}
  Vector rhs;      // b_k
  Matrix eq;       // C_k
  Vector eq_rhs;   // d_k
  std::vector<Slack> slacks;

  Index size() const { return cost.size(); }
  Index linked() const { return next.rows(); }
};

struct Problem {
  std::vector<Stage> stages;
  double constant = 0.0;  // added to the objective; only affects the relative gap
};

struct Settings {
  double tol_feas = 1e-8;
  double tol_opt = 1e-8;
  int max_iterations = 200;
};

inline constexpr double kStallStep = 1e-3;
inline constexpr double kLooseFactor = 1e3;

enum class Status { solved, max_iterations, numerical_failure };

inline const char* to_string(Status s) {
  switch (s) {
    case Status::solved: return "solved";
    case Status::max_iterations: return "max_iterations";
    case Status::numerical_failure: return "numerical_failure";
  }
  return "unknown";
}

struct Result {
  std::vector<Vector> weights;
  std::vector<Vector> slacks;
  Status status = Status::numerical_failure;
  int iterations = 0;
  double primal_residual = 0;  // relative, inf-norm
  double dual_residual = 0;    // relative, inf-norm
  double gap = 0;              // relative complementarity
  double objective = 0;
};

inline void validate(const Problem& p) {
  require(!p.stages.empty(), "qp: no stages");
  const std::size_t h = p.stages.size();
  for (std::size_t k = 0; k < h; ++k) {
    const Stage& s = p.stages[k];
    const std::string at = "qp: stage " + std::to_string(k) + ": ";
    const Index m = s.size();
    require(m > 0, at + "empty weight block");
    require(s.hessian.size() == 0 || (s.hessian.rows() == m && s.hessian.cols() == m), at + "hessian shape");
    require(s.rows.cols() == m || s.rows.rows() == 0, at + "rows shape");
    require(s.rhs.size() == s.rows.rows(), at + "rhs size");
    require(s.eq.rows() == s.eq_rhs.size() && (s.eq.rows() == 0 || s.eq.cols() == m), at + "equality shape");
    if (k + 1 < h) {
      require(s.linked() <= s.rows.rows(), at + "more linked rows than rows");
      require(s.linked() == 0 || s.next.cols() == p.stages[k + 1].size(), at + "next shape");
    } else {
      require(s.linked() == 0, at + "last stage cannot link forward");
    }
    std::vector<int> owned(static_cast<std::size_t>(s.rows.rows()), 0);
    for (const Slack& sl : s.slacks) {
      require(sl.row >= 0 && sl.row < s.rows.rows(), at + "slack row out of range");
      require(sl.bounded || sl.hessian > 0, at + "free slack needs a positive hessian");
      require(sl.sign == 1.0 || sl.sign == -1.0, at + "slack sign must be +-1");
      ++owned[static_cast<std::size_t>(sl.row)];
    }
    for (int c : owned) require(c > 0, at + "every row needs a slack");
  }
}

namespace detail {

struct Point {
  std::vector<Vector> a, za, s, zs, lam, nu;
};

inline double max_step(const Vector& v, const Vector& dv, const std::vector<bool>* bounded = nullptr) {
  double step = 1.0;
  for (Index i = 0; i < v.size(); ++i) {
    if (bounded && !(*bounded)[static_cast<std::size_t>(i)]) continue;
    if (dv[i] < 0) step = std::min(step, -v[i] / dv[i]);
  }
  return step;
}

// Block-tridiagonal saddle system. Block k holds weights a_k and local
// multipliers n_k:
//
//   K_k a_k + U_k V_k' a_{k+1} + V_{k-1} U_{k-1}' a_{k-1} - G_k' n_k - N_{k-1}' n_{k-1} = u_k
//   G_k a_k + N_k a_{k+1} + E_k n_k = r_k
//
// with K_k positive definite and E_k >= 0 diagonal. Blocks are eliminated
// front to back; each elimination leaves a positive definite update on the
// next weight block.
class BlockSolver {
 public:
  struct Block {
    Matrix kd;      // K_k, overwritten by the reduced block during factor()
    Matrix k_orig;
    Matrix u, v;    // coupling U_k V_k'
    Matrix g;       // G_k
    Matrix n;       // N_k (columns of the next block)
    Vector e;       // E_k
    Eigen::LLT<Matrix> llt;
    Matrix y;       // L^-1 G'
    Eigen::LDLT<Matrix> schur;
    Vector u_tilde;
  };
  std::vector<Block> blocks;
  std::vector<double> omega;

  bool factor() {
    Matrix carry;
    for (std::size_t k = 0; k < blocks.size(); ++k) {
      Block& b = blocks[k];
      b.k_orig = b.kd;
      if (carry.size()) b.kd += carry;
      b.llt.compute(b.kd);
      // Cancellation in the carry can cost definiteness; shift and let the
      // refinement against the unshifted blocks recover the accuracy.
      const double dscale = 1.0 + b.kd.diagonal().cwiseAbs().maxCoeff();
      for (double shift = 1e-15; b.llt.info() != Eigen::Success; shift *= 10.0) {
        if (shift > 1e-6) return false;
        Matrix shifted = b.kd;
        shifted.diagonal().array() += shift * dscale;
        b.llt.compute(shifted);
      }
      const Index q = b.g.rows();
      if (q > 0) {
        b.y = b.llt.matrixL().solve(b.g.transpose());
        Matrix s = b.y.transpose() * b.y;
        s.diagonal() += b.e;
        s.diagonal().array() += 1e-14 * (1.0 + s.diagonal().cwiseAbs().maxCoeff());
        b.schur.compute(s);
        if (b.schur.info() != Eigen::Success) return false;
      }
      carry.resize(0, 0);
      if (k + 1 == blocks.size()) break;
      const Index next = b.n.cols();
      if (next == 0) continue;
      carry = Matrix::Zero(next, next);
      Matrix r = q > 0 ? Matrix(-b.n) : Matrix(0, next);
      if (b.u.cols() > 0) {
        const Matrix ut = b.llt.matrixL().solve(b.u);
        const Matrix inner = ut.transpose() * ut;
        carry.noalias() -= b.v * (inner * b.v.transpose());
        if (q > 0) r.noalias() += (b.y.transpose() * ut) * b.v.transpose();
      }
      if (q > 0) carry.noalias() += r.transpose() * b.schur.solve(r);
    }
    return true;
  }

  void solve(const std::vector<Vector>& u, const std::vector<Vector>& r, std::vector<Vector>& a,
             std::vector<Vector>& n, int refine = 3) {
    sweep(u, r, a, n);
    const std::size_t h = blocks.size();
    std::vector<Vector> ru(h), rr(h), da, dn;
    for (int it = 0; it < refine; ++it) {
      double scale = 0.0, err = 0.0;
      for (std::size_t k = 0; k < h; ++k) {
        const Block& b = blocks[k];
        ru[k].noalias() = b.k_orig * a[k];
        scale = std::max({scale, ru[k].lpNorm<Eigen::Infinity>(), u[k].lpNorm<Eigen::Infinity>()});
        ru[k] = u[k] - ru[k];
        rr[k] = r[k];
        if (b.g.rows()) {
          ru[k].noalias() += b.g.transpose() * n[k];
          rr[k].noalias() -= b.g * a[k] + b.e.cwiseProduct(n[k]);
        }
        if (k + 1 < h) {
          if (b.u.cols()) ru[k].noalias() -= b.u * (b.v.transpose() * a[k + 1]);
          if (b.g.rows() && b.n.cols()) rr[k].noalias() -= b.n * a[k + 1];
        }
        if (k > 0) {
          const Block& p = blocks[k - 1];
          if (p.u.cols()) ru[k].noalias() -= p.v * (p.u.transpose() * a[k - 1]);
          if (p.g.rows() && p.n.cols()) ru[k].noalias() += p.n.transpose() * n[k - 1];
        }
        err = std::max(err, ru[k].lpNorm<Eigen::Infinity>());
        if (rr[k].size()) {
          err = std::max(err, rr[k].lpNorm<Eigen::Infinity>());
          scale = std::max(scale, r[k].lpNorm<Eigen::Infinity>());
        }
      }
      if (err <= 1e-12 * scale) break;
      sweep(ru, rr, da, dn);
      for (std::size_t k = 0; k < h; ++k) {
        a[k] += da[k];
        n[k] += dn[k];
      }
    }
  }

 private:
  void local(const Block& b, const Vector& f, const Vector& r, Vector& a, Vector& n) const {
    Vector fh = b.llt.matrixL().solve(f);
    if (b.g.rows() > 0) {
      n = b.schur.solve(r - b.y.transpose() * fh);
      fh.noalias() += b.y * n;
    } else {
      n.resize(0);
    }
    a = b.llt.matrixU().solve(fh);
  }

  void sweep(const std::vector<Vector>& u, const std::vector<Vector>& r, std::vector<Vector>& a,
             std::vector<Vector>& n) {
    const std::size_t h = blocks.size();
    a.resize(h);
    n.resize(h);
    Vector carry;
    for (std::size_t k = 0; k < h; ++k) {
      Block& b = blocks[k];
      b.u_tilde = u[k];
      if (carry.size()) b.u_tilde -= carry;
      local(b, b.u_tilde, r[k], a[k], n[k]);
      carry.resize(0);
      if (k + 1 == h) break;
      const Index next = b.n.cols();
      if (next == 0) continue;
      carry = Vector::Zero(next);
      if (b.u.cols()) carry.noalias() += b.v * (b.u.transpose() * a[k]);
      if (b.g.rows() && b.n.cols()) carry.noalias() -= b.n.transpose() * n[k];
    }
    for (std::size_t k = h - 1; k-- > 0;) {
      const Block& b = blocks[k];
      Vector f = b.u_tilde;
      Vector rr = r[k];
      if (b.u.cols()) f.noalias() -= b.u * (b.v.transpose() * a[k + 1]);
      if (b.g.rows() && b.n.cols()) rr.noalias() -= b.n * a[k + 1];
      local(b, f, rr, a[k], n[k]);
    }
  }
};

}  // namespace detail

inline Result solve(const Problem& p, const Settings& settings = {}) {
  validate(p);
  const std::size_t h = p.stages.size();
  using detail::Point;

  double b_scale = 1.0, c_scale = 1.0;
  Index n_bounded = 0;
  std::vector<std::vector<bool>> bounded(h);
  std::vector<Vector> sign(h), scost(h), shess(h);
  for (std::size_t k = 0; k < h; ++k) {
    const Stage& st = p.stages[k];
    if (st.rhs.size()) b_scale = std::max(b_scale, 1.0 + st.rhs.lpNorm<Eigen::Infinity>());
    if (st.eq_rhs.size()) b_scale = std::max(b_scale, 1.0 + st.eq_rhs.lpNorm<Eigen::Infinity>());
    c_scale = std::max(c_scale, 1.0 + st.cost.lpNorm<Eigen::Infinity>());
    n_bounded += st.size();
    const Index ns = static_cast<Index>(st.slacks.size());
    sign[k].resize(ns);
    scost[k].resize(ns);
    shess[k].resize(ns);
    for (Index i = 0; i < ns; ++i) {
      const Slack& sl = st.slacks[static_cast<std::size_t>(i)];
      sign[k][i] = sl.sign;
      scost[k][i] = sl.cost;
      shess[k][i] = sl.hessian;
      bounded[k].push_back(sl.bounded);
      c_scale = std::max(c_scale, 1.0 + std::abs(sl.cost));
      n_bounded += sl.bounded ? 1 : 0;
    }
  }

  // Start: uniform weights; bounded slacks absorb the row residual at those
  // weights on top of a unit floor, slack duals at their cost.
  Point x;
  for (std::size_t k = 0; k < h; ++k) {
    const Index m = p.stages[k].size();
    x.a.push_back(Vector::Constant(m, 1.0 / static_cast<double>(m)));
  }
  for (std::size_t k = 0; k < h; ++k) {
    const Stage& st = p.stages[k];
    const Index m = st.size();
    Vector v = st.rhs;
    if (st.rows.rows()) v.noalias() -= st.rows * x.a[k];
    if (st.linked() > 0) v.head(st.linked()).noalias() -= st.next * x.a[k + 1];
    const Index ns = static_cast<Index>(st.slacks.size());
    Vector s(ns), zs(ns);
    std::vector<Index> carrier(static_cast<std::size_t>(st.rows.rows()), -1);
    for (Index i = 0; i < ns; ++i) {
      const Slack& sl = st.slacks[static_cast<std::size_t>(i)];
      s[i] = sl.bounded ? 1.0 : 0.0;
      zs[i] = sl.bounded ? std::max(1.0, sl.cost) : 0.0;
      Index& c = carrier[static_cast<std::size_t>(sl.row)];
      if (sl.bounded && sl.sign * v[sl.row] > 0 && (c < 0 || sl.cost < scost[k][c])) c = i;
    }
    for (Index r = 0; r < v.size(); ++r) {
      const Index c = carrier[static_cast<std::size_t>(r)];
      if (c >= 0) s[c] += std::abs(v[r]);
    }
    // Weight duals sized so the barrier is comparable to the curvature.
    Vector curv = st.hessian.size() ? Vector(st.hessian.diagonal().cwiseAbs()) : Vector(Vector::Zero(m));
    if (st.rows.rows()) {
      Vector e = Vector::Zero(st.rows.rows());
      for (Index i = 0; i < ns; ++i) {
        const Slack& sl = st.slacks[static_cast<std::size_t>(i)];
        e[sl.row] += 1.0 / (shess[k][i] + (sl.bounded ? zs[i] / s[i] : 0.0));
      }
      curv += st.rows.cwiseAbs2().transpose() * e.cwiseInverse();
    }
    x.za.push_back(Vector::Constant(m, std::max(1.0, curv.maxCoeff() / static_cast<double>(m))));
    x.s.push_back(s);
    x.zs.push_back(zs);
    x.lam.push_back(Vector::Zero(st.rows.rows()));
    x.nu.push_back(Vector::Zero(st.eq.rows()));
  }

  // A y restricted to the slack rows of stage k.
  auto apply_rows = [&](const std::vector<Vector>& a, const std::vector<Vector>* s, std::size_t k) {
    const Stage& st = p.stages[k];
    Vector v = st.rows.rows() ? Vector(st.rows * a[k]) : Vector(0);
    if (st.linked() > 0) v.head(st.linked()).noalias() += st.next * a[k + 1];
    if (s) {
      for (std::size_t i = 0; i < st.slacks.size(); ++i) {
        v[st.slacks[i].row] += st.slacks[i].sign * (*s)[k][static_cast<Index>(i)];
      }
    }
    return v;
  };

  auto objective = [&](const Point& pt) {
    double obj = p.constant;
    for (std::size_t k = 0; k < h; ++k) {
      const Stage& st = p.stages[k];
      if (st.hessian.size()) obj += 0.5 * pt.a[k].dot(st.hessian * pt.a[k]);
      obj += st.cost.dot(pt.a[k]);
      obj += 0.5 * shess[k].dot(pt.s[k].cwiseProduct(pt.s[k])) + scost[k].dot(pt.s[k]);
    }
    return obj;
  };

  Result res;
  std::vector<Vector> rp(h), req(h), rda(h), rds(h), ds(h), einv(h), weight(h);
  std::vector<std::vector<Index>> explicit_rows(h);
  std::vector<double> theta(h);
  detail::BlockSolver solver;
  solver.blocks.resize(h);
  solver.omega.resize(h);

  // Newton direction for complementarity targets rca (weights), rcs (slacks).
  // Rows with einv <= theta are eliminated; the others keep a scaled
  // multiplier n = (1 - theta E) dlam and enter K with weight theta.
  auto direction = [&](const std::vector<Vector>& rca, const std::vector<Vector>& rcs, Point& d) {
    std::vector<Vector> gs(h), t(h), u(h), r(h), n;
    for (std::size_t k = 0; k < h; ++k) {
      const Stage& st = p.stages[k];
      gs[k] = -rds[k];
      for (Index i = 0; i < gs[k].size(); ++i) {
        if (bounded[k][static_cast<std::size_t>(i)]) gs[k][i] += rcs[k][i] / x.s[k][i];
      }
      t[k] = rp[k];
      for (std::size_t i = 0; i < st.slacks.size(); ++i) {
        const Index ii = static_cast<Index>(i);
        t[k][st.slacks[i].row] -= st.slacks[i].sign * gs[k][ii] / ds[k][ii];
      }
    }
    for (std::size_t k = 0; k < h; ++k) {
      const Stage& st = p.stages[k];
      u[k] = -rda[k] + rca[k].cwiseQuotient(x.a[k]);
      const Vector wt = weight[k].cwiseProduct(t[k]);
      if (st.rows.rows()) u[k].noalias() += st.rows.transpose() * wt;
      if (k > 0 && p.stages[k - 1].linked() > 0) {
        const Stage& prev = p.stages[k - 1];
        u[k].noalias() += prev.next.transpose() * weight[k - 1].head(prev.linked()).cwiseProduct(
                                                      t[k - 1].head(prev.linked()));
      }
      if (st.eq.rows()) u[k].noalias() += solver.omega[k] * (st.eq.transpose() * req[k]);
      const auto& xr = explicit_rows[k];
      r[k].resize(static_cast<Index>(xr.size()) + st.eq.rows());
      for (std::size_t i = 0; i < xr.size(); ++i) r[k][static_cast<Index>(i)] = t[k][xr[i]];
      r[k].tail(st.eq.rows()) = req[k];
    }
    solver.solve(u, r, d.a, n);
    d.lam.resize(h);
    d.nu.resize(h);
    d.s.resize(h);
    d.za.resize(h);
    d.zs.resize(h);
    for (std::size_t k = 0; k < h; ++k) {
      const Stage& st = p.stages[k];
      const auto& xr = explicit_rows[k];
      d.lam[k] = einv[k].cwiseProduct(t[k] - apply_rows(d.a, nullptr, k));
      for (std::size_t i = 0; i < xr.size(); ++i) {
        const double e = einv[k][xr[i]];
        d.lam[k][xr[i]] = n[k][static_cast<Index>(i)] * e / (e - theta[k]);
      }
      d.nu[k] = n[k].tail(st.eq.rows());
      d.s[k].resize(gs[k].size());
      d.zs[k].setZero(gs[k].size());
      for (std::size_t i = 0; i < st.slacks.size(); ++i) {
        const Index ii = static_cast<Index>(i);
        d.s[k][ii] = (gs[k][ii] + st.slacks[i].sign * d.lam[k][st.slacks[i].row]) / ds[k][ii];
        if (bounded[k][i]) d.zs[k][ii] = (rcs[k][ii] - x.zs[k][ii] * d.s[k][ii]) / x.s[k][ii];
      }
      d.za[k] = (rca[k] - x.za[k].cwiseProduct(d.a[k])).cwiseQuotient(x.a[k]);
    }
  };

  auto step_to_boundary = [&](const Point& d) {
    double step = 1.0;
    for (std::size_t k = 0; k < h; ++k) {
      step = std::min(step, detail::max_step(x.a[k], d.a[k]));
      step = std::min(step, detail::max_step(x.za[k], d.za[k]));
      step = std::min(step, detail::max_step(x.s[k], d.s[k], &bounded[k]));
      step = std::min(step, detail::max_step(x.zs[k], d.zs[k], &bounded[k]));
    }
    return step;
  };

  // Rows of stage k together with the forward block, for row scaling.
  std::vector<Vector> row_norm2(h);
  for (std::size_t k = 0; k < h; ++k) {
    const Stage& st = p.stages[k];
    row_norm2[k] = st.rows.rows() ? Vector(st.rows.rowwise().squaredNorm()) : Vector(0);
    if (st.linked() > 0) row_norm2[k].head(st.linked()) += st.next.rowwise().squaredNorm();
    const double pd = st.hessian.size() ? st.hessian.diagonal().cwiseAbs().maxCoeff() : 0.0;
    const double rn = row_norm2[k].size() ? row_norm2[k].maxCoeff() : 0.0;
    theta[k] = 1e6 * (1.0 + pd) / std::max(1.0, rn);
  }

  auto loosely_solved = [&] {
    return res.primal_residual <= kLooseFactor * settings.tol_feas && res.dual_residual <= kLooseFactor * settings.tol_opt &&
           res.gap <= kLooseFactor * settings.tol_opt;
  };

  for (int iter = 0; iter <= settings.max_iterations; ++iter) {
    double rp_max = 0, rd_max = 0, comp = 0;
    for (std::size_t k = 0; k < h; ++k) {
      const Stage& st = p.stages[k];
      rp[k] = st.rhs - apply_rows(x.a, &x.s, k);
      req[k] = st.eq.rows() ? Vector(st.eq_rhs - st.eq * x.a[k]) : Vector(0);
      rda[k] = st.cost - x.za[k];
      if (st.hessian.size()) rda[k].noalias() += st.hessian * x.a[k];
      if (st.rows.rows()) rda[k].noalias() -= st.rows.transpose() * x.lam[k];
      if (k > 0 && p.stages[k - 1].linked() > 0) {
        const Stage& prev = p.stages[k - 1];
        rda[k].noalias() -= prev.next.transpose() * x.lam[k - 1].head(prev.linked());
      }
      if (st.eq.rows()) rda[k].noalias() -= st.eq.transpose() * x.nu[k];
      rds[k] = scost[k] + shess[k].cwiseProduct(x.s[k]);
      for (std::size_t i = 0; i < st.slacks.size(); ++i) {
        const Index ii = static_cast<Index>(i);
        rds[k][ii] -= st.slacks[i].sign * x.lam[k][st.slacks[i].row];
        if (bounded[k][i]) {
          rds[k][ii] -= x.zs[k][ii];
          comp += x.s[k][ii] * x.zs[k][ii];
        }
      }
      comp += x.a[k].dot(x.za[k]);
      if (rp[k].size()) rp_max = std::max(rp_max, rp[k].lpNorm<Eigen::Infinity>());
      if (req[k].size()) rp_max = std::max(rp_max, req[k].lpNorm<Eigen::Infinity>());
      rd_max = std::max(rd_max, rda[k].lpNorm<Eigen::Infinity>());
      if (rds[k].size()) rd_max = std::max(rd_max, rds[k].lpNorm<Eigen::Infinity>());
    }
    const double obj = objective(x);
    res.iterations = iter;
    res.objective = obj;
    res.primal_residual = rp_max / b_scale;
    res.dual_residual = rd_max / c_scale;
    res.gap = comp / (1.0 + std::abs(obj));
    if (res.primal_residual <= settings.tol_feas && res.dual_residual <= settings.tol_opt &&
        res.gap <= settings.tol_opt) {
      res.status = Status::solved;
      break;
    }
    if (iter == settings.max_iterations) {
      res.status = Status::max_iterations;
      break;
    }
    if (!std::isfinite(obj) || !std::isfinite(comp) || !std::isfinite(rp_max) || !std::isfinite(rd_max)) {
      res.status = Status::numerical_failure;
      break;
    }
    const double mu = comp / static_cast<double>(n_bounded);

    for (std::size_t k = 0; k < h; ++k) {
      const Stage& st = p.stages[k];
      const Index ns = static_cast<Index>(st.slacks.size());
      ds[k] = shess[k];
      for (Index i = 0; i < ns; ++i) {
        if (bounded[k][static_cast<std::size_t>(i)]) ds[k][i] += x.zs[k][i] / x.s[k][i];
      }
      Vector e = Vector::Zero(st.rows.rows());
      for (Index i = 0; i < ns; ++i) e[st.slacks[static_cast<std::size_t>(i)].row] += 1.0 / ds[k][i];
      einv[k] = e.cwiseInverse();
      weight[k] = einv[k].cwiseMin(theta[k]);
      explicit_rows[k].clear();
      for (Index i = 0; i < einv[k].size(); ++i) {
        if (einv[k][i] > theta[k]) explicit_rows[k].push_back(i);
      }
    }
    for (std::size_t k = 0; k < h; ++k) {
      const Stage& st = p.stages[k];
      auto& b = solver.blocks[k];
      const Index m = st.size();
      b.kd = st.hessian.size() ? st.hessian : Matrix::Zero(m, m);
      if (st.rows.rows()) {
        const Matrix scaled = weight[k].cwiseSqrt().asDiagonal() * st.rows;
        b.kd.selfadjointView<Eigen::Lower>().rankUpdate(scaled.transpose());
      }
      if (k > 0 && p.stages[k - 1].linked() > 0) {
        const Stage& prev = p.stages[k - 1];
        const Matrix scaled = weight[k - 1].head(prev.linked()).cwiseSqrt().asDiagonal() * prev.next;
        b.kd.selfadjointView<Eigen::Lower>().rankUpdate(scaled.transpose());
      }
      b.kd.triangularView<Eigen::StrictlyUpper>() = b.kd.transpose();
      // Scale taken before the barrier terms, which blow up on inactive weights.
      const double scale = 1.0 + b.kd.diagonal().cwiseAbs().maxCoeff();
      b.kd.diagonal() += x.za[k].cwiseQuotient(x.a[k]);
      solver.omega[k] = 0;
      if (st.eq.rows()) {
        solver.omega[k] = scale;
        b.kd.noalias() += scale * (st.eq.transpose() * st.eq);
      }
      const auto& xr = explicit_rows[k];
      const Index nxr = static_cast<Index>(xr.size());
      const Index q = nxr + st.eq.rows();
      const Index next = k + 1 < h ? p.stages[k + 1].size() : 0;
      b.g.resize(q, m);
      b.n = Matrix::Zero(q, next);
      b.e = Vector::Zero(q);
      for (Index i = 0; i < nxr; ++i) {
        const Index row = xr[static_cast<std::size_t>(i)];
        b.g.row(i) = st.rows.row(row);
        if (row < st.linked()) b.n.row(i) = st.next.row(row);
        b.e[i] = 1.0 / (einv[k][row] - theta[k]);
      }
      b.g.bottomRows(st.eq.rows()) = st.eq;
      if (st.linked() > 0) {
        b.u = st.rows.topRows(st.linked()).transpose() * weight[k].head(st.linked()).asDiagonal();
        b.v = st.next.transpose();
      } else {
        b.u.resize(m, 0);
        b.v.resize(next, 0);
      }
    }
    if (!solver.factor()) {
      res.status = loosely_solved() ? Status::solved : Status::numerical_failure;
      break;
    }

    std::vector<Vector> rca(h), rcs(h);
    for (std::size_t k = 0; k < h; ++k) {
      rca[k] = -x.a[k].cwiseProduct(x.za[k]);
      rcs[k] = -x.s[k].cwiseProduct(x.zs[k]);
      for (Index i = 0; i < rcs[k].size(); ++i) {
        if (!bounded[k][static_cast<std::size_t>(i)]) rcs[k][i] = 0;
      }
    }
    Point aff;
    direction(rca, rcs, aff);
    const double a_aff = step_to_boundary(aff);
    double comp_aff = 0;
    for (std::size_t k = 0; k < h; ++k) {
      comp_aff += (x.a[k] + a_aff * aff.a[k]).dot(x.za[k] + a_aff * aff.za[k]);
      for (Index i = 0; i < x.s[k].size(); ++i) {
        if (bounded[k][static_cast<std::size_t>(i)]) {
          comp_aff += (x.s[k][i] + a_aff * aff.s[k][i]) * (x.zs[k][i] + a_aff * aff.zs[k][i]);
        }
      }
    }
    const double sigma = std::clamp(std::pow(comp_aff / comp, 3), 0.0, 1.0);
    for (std::size_t k = 0; k < h; ++k) {
      rca[k].array() += sigma * mu - aff.a[k].array() * aff.za[k].array();
      for (Index i = 0; i < rcs[k].size(); ++i) {
        if (bounded[k][static_cast<std::size_t>(i)]) rcs[k][i] += sigma * mu - aff.s[k][i] * aff.zs[k][i];
      }
    }
    Point d;
    direction(rca, rcs, d);
    const double step = std::min(1.0, 0.995 * step_to_boundary(d));
    // stalled near the optimum
    if (step < kStallStep && loosely_solved()) {
      res.status = Status::solved;
      break;
    }
    for (std::size_t k = 0; k < h; ++k) {
      x.a[k] += step * d.a[k];
      x.za[k] += step * d.za[k];
      x.s[k] += step * d.s[k];
      x.zs[k] += step * d.zs[k];
      x.lam[k] += step * d.lam[k];
      x.nu[k] += step * d.nu[k];
    }
  }
  res.weights = x.a;
  res.slacks = x.s;
  return res;
}

}  // namespace atbm::qp
