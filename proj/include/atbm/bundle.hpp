#pragma once

// Trajectory bundles: per-stage samples inside the trust region and the
// matrices of function values evaluated at them.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "atbm/rng.hpp"
#include "atbm/types.hpp"

namespace atbm {

/// Horizon-indexed (x_k, u_k) pairs, k = 0..H-1 in code.
struct Trajectory {
  std::vector<Vector> states;
  std::vector<Vector> controls;

  Index horizon() const { return static_cast<Index>(states.size()); }

  /// sqrt(sum_k |x_k|^2 + |u_k|^2)
  double norm() const {
    double sq = 0.0;
    for (std::size_t k = 0; k < states.size(); ++k) {
      sq += states[k].squaredNorm() + controls[k].squaredNorm();
    }
    return std::sqrt(sq);
  }

  void validate(Index state_dim, Index control_dim) const {
    require(!states.empty(), "Trajectory: empty horizon");
    require(states.size() == controls.size(), "Trajectory: state/control horizon mismatch");
    for (std::size_t k = 0; k < states.size(); ++k) {
      require(states[k].size() == state_dim && controls[k].size() == control_dim,
              "Trajectory: stage " + std::to_string(k) + " has wrong dimensions");
      require(states[k].allFinite() && controls[k].allFinite(),
              "Trajectory: stage " + std::to_string(k) + " is not finite");
    }
  }
};

inline double distance(const Trajectory& a, const Trajectory& b) {
  require(a.horizon() == b.horizon(), "distance: horizon mismatch");
  double sq = 0.0;
  for (Index k = 0; k < a.horizon(); ++k) {
    sq += (a.states[k] - b.states[k]).squaredNorm() + (a.controls[k] - b.controls[k]).squaredNorm();
  }
  return std::sqrt(sq);
}

/// Stage functions of the trajectory problem. Every callable receives the
/// zero-based stage index so time-varying references and exogenous inputs can
/// be captured by the caller.
struct ProblemFunctions {
  using StageFn = std::function<Vector(Index, const Vector&, const Vector&)>;
  using SoftFn = std::function<Vector(Index, Index, const Vector&, const Vector&)>;

  Index state_dim = 0;
  Index control_dim = 0;
  Index residual_dim = 0;
  Index hard_dim = 0;
  std::vector<Index> soft_dims;

  StageFn dynamics;   // F(x, u)
  StageFn residual;   // r_k(x, u)
  StageFn hard;       // c_hard,k(x, u) >= 0 required
  SoftFn soft;        // c_j,k(x, u) >= 0 desired

  Index soft_classes() const { return static_cast<Index>(soft_dims.size()); }

  void validate() const {
    require(state_dim > 0 && control_dim > 0, "ProblemFunctions: empty state or control");
    require(residual_dim > 0, "ProblemFunctions: empty residual");
    require(static_cast<bool>(dynamics) && static_cast<bool>(residual),
            "ProblemFunctions: dynamics and residual are required");
    require(hard_dim == 0 || static_cast<bool>(hard), "ProblemFunctions: hard constraint callable missing");
    require(soft_dims.empty() || static_cast<bool>(soft), "ProblemFunctions: soft constraint callable missing");
  }
};

struct StageBundle {
  Matrix x;                  // W_x  (n_x x m)
  Matrix u;                  // W_u  (n_u x m)
  Matrix f;                  // W_f  (n_x x m)
  Matrix r;                  // W_r  (n_r x m)
  Matrix hard;               // W_c,hard
  std::vector<Matrix> soft;  // W_c,j
};

struct BundleSet {
  std::vector<StageBundle> stages;
  Index samples = 0;        // m
  Index center_column = 0;  // i*, the column holding the current iterate
  double radius = 0.0;      // per-stage trust radius used for sampling

  Index horizon() const { return static_cast<Index>(stages.size()); }
  Index state_dim() const { return stages.empty() ? 0 : stages.front().x.rows(); }
  Index control_dim() const { return stages.empty() ? 0 : stages.front().u.rows(); }
  Index residual_dim() const { return stages.empty() ? 0 : stages.front().r.rows(); }
  Index hard_dim() const { return stages.empty() ? 0 : stages.front().hard.rows(); }
  Index soft_classes() const { return stages.empty() ? 0 : static_cast<Index>(stages.front().soft.size()); }
  Index soft_dim(Index j) const { return stages.front().soft[static_cast<std::size_t>(j)].rows(); }
};

inline constexpr Index kRandomSamples = 20;

/// Sample count of the stencil for a stage of dimension n = n_x + n_u:
/// center, +-delta along each axis, and kRandomSamples Gaussian draws.
constexpr Index stencil_size(Index state_dim, Index control_dim) {
  return 2 * (state_dim + control_dim) + kRandomSamples + 1;
}

/// Columns are stacked [x; u] points. Column 0 is the center itself, columns
/// 1..2n are center +- delta e_j, the rest are N(center, (delta/3)^2 I) draws
/// rescaled radially onto the delta-ball when they land outside it.
///
/// With anchor_state set, the state block of every sample is pinned to the
/// center state, so only the control coordinates are perturbed.
inline Matrix sample_stencil(const Eigen::Ref<const Vector>& center_x, const Eigen::Ref<const Vector>& center_u,
                             double delta, Rng& rng, bool anchor_state = false) {
  require(delta > 0 && std::isfinite(delta), "sample_stencil: delta must be positive");
  require(center_x.allFinite() && center_u.allFinite(), "sample_stencil: center must be finite");
  const Index nx = center_x.size();
  const Index nu = center_u.size();
  const Index n = nx + nu;
  const Index m = stencil_size(nx, nu);

  Vector center(n);
  center << center_x, center_u;
  Matrix samples = center.replicate(1, m);

  const Index first_free = anchor_state ? nx : 0;
  for (Index j = first_free; j < n; ++j) {
    samples(j, 1 + 2 * j) += delta;
    samples(j, 2 + 2 * j) -= delta;
  }

  std::normal_distribution<double> normal(0.0, delta / 3.0);
  for (Index c = 2 * n + 1; c < m; ++c) {
    Vector step = Vector::Zero(n);
    for (Index j = first_free; j < n; ++j) step[j] = normal(rng);
    const double len = step.norm();
    if (len > delta) step *= delta / len;
    samples.col(c) += step;
  }
  return samples;
}

/// Evaluate the stage functions on given sample columns. samples[k] holds the
/// stacked [x; u] points of stage k.
inline BundleSet evaluate_samples(const std::vector<Matrix>& samples, const ProblemFunctions& funcs,
                                  Index center_column, double radius) {
  funcs.validate();
  require(!samples.empty(), "evaluate_samples: empty horizon");
  const Index nx = funcs.state_dim;
  const Index nu = funcs.control_dim;
  const Index m = samples.front().cols();
  require(center_column >= 0 && center_column < m, "evaluate_samples: center column out of range");

  BundleSet set;
  set.samples = m;
  set.center_column = center_column;
  set.radius = radius;
  set.stages.resize(samples.size());

  auto checked = [](Vector v, Index expected, const char* what, Index k, Index i) {
    if (v.size() != expected) {
      throw ContractViolation(std::string(what) + " returned " + std::to_string(v.size()) +
                              " entries, expected " + std::to_string(expected));
    }
    if (!v.allFinite()) throw EvaluationError(std::string(what) + " is not finite", k, i);
    return v;
  };

  for (std::size_t s = 0; s < samples.size(); ++s) {
    const Index k = static_cast<Index>(s);
    const Matrix& pts = samples[s];
    require(pts.rows() == nx + nu && pts.cols() == m, "evaluate_samples: inconsistent sample block");
    StageBundle& b = set.stages[s];
    b.x = pts.topRows(nx);
    b.u = pts.bottomRows(nu);
    b.f.resize(nx, m);
    b.r.resize(funcs.residual_dim, m);
    b.hard.resize(funcs.hard_dim, m);
    b.soft.resize(funcs.soft_dims.size());
    for (std::size_t j = 0; j < funcs.soft_dims.size(); ++j) b.soft[j].resize(funcs.soft_dims[j], m);

    for (Index i = 0; i < m; ++i) {
      const Vector x = b.x.col(i);
      const Vector u = b.u.col(i);
      b.f.col(i) = checked(funcs.dynamics(k, x, u), nx, "dynamics", k, i);
      b.r.col(i) = checked(funcs.residual(k, x, u), funcs.residual_dim, "residual", k, i);
      if (funcs.hard_dim > 0) b.hard.col(i) = checked(funcs.hard(k, x, u), funcs.hard_dim, "hard constraint", k, i);
      for (std::size_t j = 0; j < funcs.soft_dims.size(); ++j) {
        b.soft[j].col(i) = checked(funcs.soft(k, static_cast<Index>(j), x, u), funcs.soft_dims[j],
                                   "soft constraint", k, i);
      }
    }
  }
  return set;
}

/// Sample every stage around the iterate and evaluate the bundle matrices.
/// Stage k draws from its own stream derived from (seed, k), so the result
/// does not depend on the order stages are processed in.
inline BundleSet build_bundles(const Trajectory& z, double delta, const ProblemFunctions& funcs,
                               std::uint64_t seed, bool anchor_first_state = true) {
  funcs.validate();
  z.validate(funcs.state_dim, funcs.control_dim);
  std::vector<Matrix> samples(static_cast<std::size_t>(z.horizon()));
  for (Index k = 0; k < z.horizon(); ++k) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(k)}));
    samples[static_cast<std::size_t>(k)] =
        sample_stencil(z.states[k], z.controls[k], delta, rng, anchor_first_state && k == 0);
  }
  return evaluate_samples(samples, funcs, 0, delta);
}

}  // namespace atbm
