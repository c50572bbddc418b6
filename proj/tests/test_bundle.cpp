#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "atbm/bundle.hpp"

using namespace atbm;

namespace {

struct Affine {
  Matrix a, b;
  Vector c;
};

Affine random_affine(std::mt19937_64& rng, Index nx, Index nu) {
  std::normal_distribution<double> n(0.0, 1.0);
  Affine f{Matrix(nx, nx), Matrix(nx, nu), Vector(nx)};
  for (Index i = 0; i < f.a.size(); ++i) f.a.data()[i] = n(rng);
  for (Index i = 0; i < f.b.size(); ++i) f.b.data()[i] = n(rng);
  for (Index i = 0; i < nx; ++i) f.c[i] = n(rng);
  return f;
}

ProblemFunctions functions_of(const Affine& m) {
  ProblemFunctions f;
  f.state_dim = m.a.rows();
  f.control_dim = m.b.cols();
  f.residual_dim = f.state_dim + f.control_dim;
  f.dynamics = [m](Index, const Vector& x, const Vector& u) { return Vector(m.a * x + m.b * u + m.c); };
  f.residual = [](Index, const Vector& x, const Vector& u) {
    Vector r(x.size() + u.size());
    r << x, u;
    return r;
  };
  return f;
}

Vector simplex_point(std::mt19937_64& rng, Index m) {
  std::exponential_distribution<double> e(1.0);
  Vector a(m);
  for (Index i = 0; i < m; ++i) a[i] = e(rng);
  return a / a.sum();
}

Trajectory random_z(std::mt19937_64& rng, Index h, Index nx, Index nu) {
  std::normal_distribution<double> n(0.0, 1.0);
  Trajectory z;
  for (Index k = 0; k < h; ++k) {
    Vector x(nx), u(nu);
    for (Index i = 0; i < nx; ++i) x[i] = n(rng);
    for (Index i = 0; i < nu; ++i) u[i] = n(rng);
    z.states.push_back(x);
    z.controls.push_back(u);
  }
  return z;
}

Vector stacked(const StageBundle& s, Index col) {
  Vector p(s.x.rows() + s.u.rows());
  p << s.x.col(col), s.u.col(col);
  return p;
}

}  // namespace

TEST(Bundle, StencilSizeForSixRollers) {
  EXPECT_EQ(stencil_size(12, 6), 57);
  EXPECT_EQ(stencil_size(12, 6), 6 * 6 + 21);
  Rng rng(1);
  EXPECT_EQ(sample_stencil(Vector::Zero(12), Vector::Zero(6), 0.5, rng).cols(), 57);
}

TEST(Bundle, StencilLayout) {
  Rng rng(4);
  const Vector cx = Vector::LinSpaced(3, 1.0, 3.0);
  const Vector cu = Vector::Constant(2, -1.0);
  const Matrix s = sample_stencil(cx, cu, 0.25, rng);
  Vector c(5);
  c << cx, cu;
  EXPECT_EQ(s.col(0), c);
  for (Index j = 0; j < 5; ++j) {
    Vector e = Vector::Zero(5);
    e[j] = 0.25;
    EXPECT_EQ(s.col(1 + 2 * j), c + e);
    EXPECT_EQ(s.col(2 + 2 * j), c - e);
  }
  for (Index i = 0; i < s.cols(); ++i) EXPECT_LE((s.col(i) - c).norm(), 0.25 * (1 + 1e-15));
}

TEST(Bundle, TinyRadiusCollapsesOntoCenter) {
  Rng rng(9);
  const Matrix s = sample_stencil(Vector::Ones(4), Vector::Ones(2), 1e-12, rng);
  double widest = 0;
  for (Index i = 0; i < s.cols(); ++i) {
    for (Index j = 0; j < s.cols(); ++j) widest = std::max(widest, (s.col(i) - s.col(j)).norm());
  }
  EXPECT_LE(widest, 2e-12 + 4 * std::numeric_limits<double>::epsilon());
}

TEST(Bundle, StencilIsSeedDeterministic) {
  Rng a(21), b(21);
  EXPECT_EQ(sample_stencil(Vector::Ones(4), Vector::Zero(2), 0.3, a),
            sample_stencil(Vector::Ones(4), Vector::Zero(2), 0.3, b));
}

TEST(Bundle, StencilRejectsNonPositiveRadius) {
  Rng rng(1);
  EXPECT_THROW(sample_stencil(Vector::Ones(2), Vector::Ones(1), 0.0, rng), ContractViolation);
  EXPECT_THROW(sample_stencil(Vector::Ones(2), Vector::Ones(1), -1.0, rng), ContractViolation);
}

TEST(Bundle, AnchoredStencilKeepsState) {
  Rng rng(3);
  const Vector cx = Vector::Constant(3, 2.0);
  const Matrix s = sample_stencil(cx, Vector::Zero(2), 0.4, rng, true);
  for (Index i = 0; i < s.cols(); ++i) EXPECT_EQ(Vector(s.col(i).head(3)), cx);
}

TEST(Bundle, AffineExactnessOverSimplexWeights) {
  std::mt19937_64 rng(2718);
  const Affine m = random_affine(rng, 4, 2);
  const ProblemFunctions f = functions_of(m);
  const Trajectory z = random_z(rng, 5, 4, 2);
  const BundleSet b = build_bundles(z, 0.7, f, 99, false);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    for (const StageBundle& s : b.stages) {
      const Vector a = simplex_point(rng, b.samples);
      const Vector x = s.x * a, u = s.u * a;
      worst = std::max(worst, (s.f * a - (m.a * x + m.b * u + m.c)).lpNorm<Eigen::Infinity>());
    }
  }
  EXPECT_LE(worst, 1e-10);
}

TEST(Bundle, CenterColumnReproducesIterate) {
  std::mt19937_64 rng(8);
  const Affine m = random_affine(rng, 4, 2);
  const Trajectory z = random_z(rng, 3, 4, 2);
  const BundleSet b = build_bundles(z, 0.2, functions_of(m), 5);
  for (Index k = 0; k < 3; ++k) {
    const StageBundle& s = b.stages[k];
    EXPECT_EQ(Vector(s.x.col(b.center_column)), z.states[k]);
    EXPECT_EQ(Vector(s.u.col(b.center_column)), z.controls[k]);
    EXPECT_EQ(Vector(s.f.col(b.center_column)), Vector(m.a * z.states[k] + m.b * z.controls[k] + m.c));
  }
}

TEST(Bundle, ZeroRadiusResidualsMatchCenter) {
  std::mt19937_64 rng(13);
  const Affine m = random_affine(rng, 4, 2);
  const Trajectory z = random_z(rng, 2, 4, 2);
  const BundleSet b = build_bundles(z, 1e-12, functions_of(m), 7);
  for (const StageBundle& s : b.stages) {
    EXPECT_LE((s.r.colwise() - s.r.col(0)).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(Bundle, ConvexCombinationsStayInBall) {
  std::mt19937_64 rng(31);
  const Trajectory z = random_z(rng, 4, 4, 2);
  const BundleSet b = build_bundles(z, 0.35, functions_of(random_affine(rng, 4, 2)), 17, false);
  for (int trial = 0; trial < 100; ++trial) {
    for (const StageBundle& s : b.stages) {
      const Vector a = simplex_point(rng, b.samples);
      Vector p(6);
      p << s.x * a, s.u * a;
      EXPECT_LE((p - stacked(s, 0)).norm(), 0.35 * (1 + 1e-12));
    }
  }
}

TEST(Bundle, DirectionalCoverage) {
  Rng srng(55);
  const Index n = 6;
  const double delta = 0.8;
  const Matrix s = sample_stencil(Vector::Zero(4), Vector::Zero(2), delta, srng);
  std::mt19937_64 rng(56);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    Vector d(n);
    for (Index i = 0; i < n; ++i) d[i] = normal(rng);
    d.normalize();
    const double reach = (s.transpose() * d).maxCoeff();
    EXPECT_GE(reach, delta / std::sqrt(static_cast<double>(n)) - 1e-12);
  }
}

TEST(Bundle, RebuildIsBitIdentical) {
  std::mt19937_64 rng(64);
  const ProblemFunctions f = functions_of(random_affine(rng, 4, 2));
  const Trajectory z = random_z(rng, 3, 4, 2);
  const BundleSet a = build_bundles(z, 0.5, f, 123);
  const BundleSet b = build_bundles(z, 0.5, f, 123);
  for (Index k = 0; k < 3; ++k) {
    EXPECT_EQ(a.stages[k].x, b.stages[k].x);
    EXPECT_EQ(a.stages[k].u, b.stages[k].u);
    EXPECT_EQ(a.stages[k].f, b.stages[k].f);
    EXPECT_EQ(a.stages[k].r, b.stages[k].r);
  }
}

TEST(Bundle, NonFiniteEvaluationNamesStageAndSample) {
  ProblemFunctions f;
  f.state_dim = 1;
  f.control_dim = 1;
  f.residual_dim = 1;
  f.dynamics = [](Index k, const Vector& x, const Vector& u) {
    Vector out = x + u;
    if (k == 1 && u[0] > 0.05) out[0] = std::numeric_limits<double>::quiet_NaN();
    return out;
  };
  f.residual = [](Index, const Vector& x, const Vector&) { return x; };
  Trajectory z;
  for (int k = 0; k < 2; ++k) {
    z.states.push_back(Vector::Zero(1));
    z.controls.push_back(Vector::Zero(1));
  }
  try {
    build_bundles(z, 0.1, f, 1);
    FAIL() << "expected an evaluation error";
  } catch (const EvaluationError& e) {
    EXPECT_EQ(e.stage(), 1);
    EXPECT_EQ(e.sample(), 3);  // +delta along the control axis
  }
}

TEST(Bundle, TrajectoryNorm) {
  Trajectory z;
  z.states = {Vector::Constant(2, 1.0), Vector::Constant(2, 2.0)};
  z.controls = {Vector::Constant(1, 3.0), Vector::Constant(1, 0.0)};
  EXPECT_DOUBLE_EQ(z.norm(), std::sqrt(1 + 1 + 9 + 4 + 4));
}
