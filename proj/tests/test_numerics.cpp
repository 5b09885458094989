#include "rnpe/numerics.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace rnpe;

TEST(SolveSpd, IdentityLeavesRhs) {
  RandomStream s(1);
  const Matrix rhs = s.standard_normal(3, 2);
  EXPECT_EQ(solve_spd(Matrix::Identity(3, 3), rhs), rhs);
}

TEST(SolveSpd, Scalar) {
  const Matrix x = solve_spd(Matrix::Constant(1, 1, 4.0), Matrix::Constant(1, 1, 2.0));
  EXPECT_DOUBLE_EQ(x(0, 0), 0.5);
}

TEST(SolveSpd, ResidualUpToDim64) {
  for (int n : {1, 2, 5, 17, 64}) {
    RandomStream s(static_cast<std::uint64_t>(n));
    const Matrix b = s.standard_normal(n, n);
    const Matrix m = b.transpose() * b + Matrix::Identity(n, n);
    const Matrix rhs = s.standard_normal(n, 3);
    const Matrix x = solve_spd(m, rhs);
    EXPECT_LE((m * x - rhs).norm() / rhs.norm(), 1e-10) << n;
  }
}

TEST(SolveSpd, Errors) {
  Matrix m(2, 2);
  m << 1, 2, 2, 1;
  EXPECT_THROW(solve_spd(m, Matrix::Identity(2, 2)), NotPositiveDefinite);
  m << 1, 0.5, 0, 1;
  EXPECT_THROW(solve_spd(m, Matrix::Identity(2, 2)), std::invalid_argument);
  EXPECT_THROW(cholesky_lower(-Matrix::Identity(2, 2)), NotPositiveDefinite);
}

TEST(TopEigenpair, WorkedDiagonal) {
  Matrix m(2, 2);
  m << 0.8, 0, 0, 0.5;
  const Eigenpair e = top_eigenpair(m);
  EXPECT_NEAR(e.value, 0.8, 1e-10);
  EXPECT_NEAR(e.vector(0), 1.0, 1e-8);
  EXPECT_NEAR(e.vector(1), 0.0, 1e-8);
  EXPECT_FALSE(e.degenerate);
}

TEST(TopEigenpair, IdentityIsDegenerate) {
  const Eigenpair e = top_eigenpair(Matrix::Identity(2, 2));
  EXPECT_NEAR(e.value, 1.0, 1e-10);
  EXPECT_NEAR(e.vector.norm(), 1.0, 1e-12);
  EXPECT_TRUE(e.degenerate);
}

TEST(TopEigenpair, RankOne) {
  Vector v(2);
  v << 0.6, 0.8;
  const Eigenpair e = top_eigenpair(v * v.transpose());
  EXPECT_NEAR(e.value, 1.0, 1e-10);
  EXPECT_NEAR(e.vector(0), 0.6, 1e-8);
  EXPECT_NEAR(e.vector(1), 0.8, 1e-8);
}

TEST(TopEigenpair, SignConvention) {
  Matrix m(2, 2);
  m << 1, -1, -1, 2;
  const Eigenpair e = top_eigenpair(m);
  EXPECT_NEAR(e.value, (3 + std::sqrt(5.0)) / 2, 1e-10);
  Eigen::Index arg;
  e.vector.cwiseAbs().maxCoeff(&arg);
  EXPECT_GT(e.vector(arg), 0.0);
}

TEST(TopEigenpair, KnownSpectrum) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    RandomStream s(seed);
    const int n = 2 + static_cast<int>(seed % 9);
    const Eigen::HouseholderQR<Matrix> qr(s.standard_normal(n, n));
    const Matrix q = qr.householderQ();
    Vector lam = s.standard_normal(n).cwiseAbs();
    lam(0) = lam.maxCoeff() * 1.05 + 0.1;
    const Matrix m = symmetrize(q * lam.asDiagonal() * q.transpose());
    const Eigenpair e = top_eigenpair(m);
    EXPECT_NEAR(e.value, lam(0), 1e-8 * lam(0)) << seed;
    EXPECT_LE((m * e.vector - e.value * e.vector).norm(), 1e-7 * e.value) << seed;
  }
}

TEST(TopEigenpair, CloseTopEigenvalues) {
  Vector d(3);
  d << 1.0, 0.999, 0.2;
  const Eigenpair e = top_eigenpair(Matrix(d.asDiagonal()));
  EXPECT_NEAR(e.value, 1.0, 1e-8);
  EXPECT_NEAR(std::abs(e.vector(0)), 1.0, 1e-3);
}

TEST(TopEigenpair, ZeroMatrix) {
  const Eigenpair e = top_eigenpair(Matrix::Zero(3, 3));
  EXPECT_EQ(e.value, 0.0);
  EXPECT_NEAR(e.vector.norm(), 1.0, 1e-12);
}

TEST(TopEigenpair, NoConvergence) {
  Vector d(3);
  d << 1.0, 0.9999999, 0.2;
  EXPECT_THROW(top_eigenpair(Matrix(d.asDiagonal()), 1e-14, 2), NoConvergence);
}

TEST(RandomStream, EmptyDraw) {
  RandomStream s(3);
  EXPECT_EQ(s.standard_normal(0).size(), 0);
}

TEST(RandomStream, ReplayAndDisjointCalls) {
  RandomStream a(42), b(42);
  const Vector a1 = a.standard_normal(5), a2 = a.standard_normal(5);
  const Vector b1 = b.standard_normal(5), b2 = b.standard_normal(5);
  EXPECT_EQ(a1, b1);
  EXPECT_EQ(a2, b2);
  EXPECT_NE(a1, a2);
}

TEST(RandomStream, PositionIsSeedAndCounter) {
  RandomStream a(9);
  a.standard_normal(7);
  RandomStream b(9, a.counter());
  EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(RandomStream, Moments) {
  RandomStream s(123);
  const Vector v = s.standard_normal(100000);
  const double mean = v.mean();
  const double var = (v.array() - mean).square().mean();
  EXPECT_LT(std::abs(mean), 3.0 / std::sqrt(1e5));
  EXPECT_NEAR(var, 1.0, 0.05);
}

TEST(RandomStream, ScalarNormalMoments) {
  RandomStream s(5);
  double acc = 0, acc2 = 0;
  for (int i = 0; i < 100000; ++i) {
    const double z = s.normal();
    acc += z;
    acc2 += z * z;
  }
  EXPECT_LT(std::abs(acc / 1e5), 3.0 / std::sqrt(1e5));
  EXPECT_NEAR(acc2 / 1e5, 1.0, 0.05);
}

TEST(RandomStream, DerivedSubstreamsDiffer) {
  const RandomStream root(1);
  std::set<std::uint64_t> first;
  for (std::uint64_t i = 0; i < 1000; ++i) {
    RandomStream s = root.derive(i);
    first.insert(s.next_u64());
  }
  EXPECT_EQ(first.size(), 1000u);
  RandomStream x = root.derive("a"), y = root.derive("b");
  EXPECT_NE(x.next_u64(), y.next_u64());
}

TEST(RandomStream, SubstreamsUncorrelated) {
  const RandomStream root(77);
  RandomStream a = root.derive(0), b = root.derive(1);
  const Vector u = a.standard_normal(50000), v = b.standard_normal(50000);
  EXPECT_LT(std::abs(u.dot(v) / 50000.0), 4.0 / std::sqrt(5e4));
}

TEST(RandomStream, UniformRange) {
  RandomStream s(8);
  double lo = 1, hi = 0;
  for (int i = 0; i < 10000; ++i) {
    const double u = s.uniform();
    lo = std::min(lo, u);
    hi = std::max(hi, u);
  }
  EXPECT_GE(lo, 0.0);
  EXPECT_LT(hi, 1.0);
}

TEST(Ball, UniformInBallAndSphere) {
  RandomStream s(4);
  for (int i = 0; i < 200; ++i) {
    EXPECT_LE(uniform_in_ball(s, 5, 0.3).norm(), 0.3 + 1e-12);
    EXPECT_NEAR(uniform_on_sphere(s, 5, 0.3).norm(), 0.3, 1e-12);
  }
}

TEST(ParallelFor, MatchesSerialOrder) {
  std::vector<double> a(100), b(100);
  const RandomStream root(2);
  auto fill = [&](std::vector<double>& out) {
    return [&, root](std::size_t i) {
      RandomStream s = root.derive(static_cast<std::uint64_t>(i));
      out[i] = s.normal();
    };
  };
  parallel_for(100, fill(a), 1);
  parallel_for(100, fill(b), 4);
  EXPECT_EQ(a, b);
}

TEST(Quantile, OrderAndInterpolation) {
  std::vector<double> v{3, 1, 2, 5, 4};
  EXPECT_DOUBLE_EQ(median(v), 3.0);
  EXPECT_DOUBLE_EQ(quantile(v, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(quantile(v, 1.0), 5.0);
  EXPECT_LE(quantile(v, 0.15), quantile(v, 0.85));
}

TEST(Softplus, StableAtExtremes) {
  EXPECT_NEAR(softplus(0.0), std::log(2.0), 1e-15);
  EXPECT_DOUBLE_EQ(softplus(800.0), 800.0);
  EXPECT_GT(softplus(-800.0), -1e-300);
  EXPECT_NEAR(sigmoid(0.0), 0.5, 1e-15);
  EXPECT_TRUE(std::isfinite(sigmoid(-800.0)));
}
