#include "rnpe/estimator.hpp"
#include "rnpe/oracles.hpp"

#include <gtest/gtest.h>

using namespace rnpe;

namespace {

LinearGaussianModel scalar_model() {
  return {Matrix::Ones(1, 1), Vector::Zero(1), Matrix::Ones(1, 1), Vector::Zero(1), Matrix::Ones(1, 1)};
}

LinearGaussianModel diag21() {
  Vector d(2);
  d << 2, 1;
  return LinearGaussianModel::diagonal_task(d, 1.0);
}

}  // namespace

TEST(Posterior, ScalarConjugate) {
  const GaussianPosterior p = posterior(scalar_model(), Vector::Constant(1, 2.0));
  EXPECT_NEAR(p.mean(0), 1.0, 1e-14);
  EXPECT_NEAR(p.cov(0, 0), 0.5, 1e-14);
}

TEST(Posterior, DiagonalPlugIn) {
  const GaussianPosterior p = posterior(diag21(), Vector::Zero(2));
  EXPECT_NEAR(p.cov(0, 0), 0.2, 1e-14);
  EXPECT_NEAR(p.cov(1, 1), 0.5, 1e-14);
  EXPECT_NEAR(p.cov(0, 1), 0.0, 1e-14);
}

TEST(Posterior, WoodburyAgrees) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    RandomStream s(seed);
    const int td = 1 + static_cast<int>(seed % 6), xd = 1 + static_cast<int>((seed / 3) % 10);
    const LinearGaussianModel m = LinearGaussianModel::random(s, td, xd);
    const Vector x = s.standard_normal(xd);
    const GaussianPosterior a = posterior(m, x), b = posterior_woodbury(m, x);
    EXPECT_LE((a.mean - b.mean).cwiseAbs().maxCoeff(), 1e-10) << seed;
    EXPECT_LE((a.cov - b.cov).cwiseAbs().maxCoeff(), 1e-10) << seed;
  }
}

TEST(Posterior, CovarianceIndependentOfX) {
  RandomStream s(3);
  const LinearGaussianModel m = LinearGaussianModel::random(s, 3, 4);
  EXPECT_LE((posterior(m, s.standard_normal(4)).cov - posterior(m, s.standard_normal(4)).cov).norm(), 1e-12);
}

TEST(Fim, Examples) {
  EXPECT_NEAR(fim(scalar_model())(0, 0), 0.5, 1e-14);
  const Matrix f = fim(diag21());
  EXPECT_NEAR(f(0, 0), 0.8, 1e-14);
  EXPECT_NEAR(f(1, 1), 0.5, 1e-14);
  EXPECT_NEAR(f(0, 1), 0.0, 1e-14);
}

TEST(Fim, MatchesAnalyticEstimatorFimExact) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    RandomStream s(seed);
    const LinearGaussianModel m = LinearGaussianModel::random(s, 1 + static_cast<int>(seed % 5), 2 + static_cast<int>(seed % 7));
    const GlmEstimator est = analytic_estimator(m);
    const Matrix f = fim(m);
    EXPECT_LE((est.fim_exact(s.standard_normal(m.x_dim())) - f).norm(), 1e-9 * std::max(1.0, f.norm())) << seed;
  }
}

TEST(AnalyticEstimator, ReproducesPosterior) {
  RandomStream s(11);
  const LinearGaussianModel m = LinearGaussianModel::random(s, 3, 5);
  const GlmEstimator est = analytic_estimator(m);
  for (int i = 0; i < 5; ++i) {
    const Vector x = s.standard_normal(5);
    const GaussianPosterior a = est.predict(x), b = posterior(m, x);
    EXPECT_LE((a.mean - b.mean).norm(), 1e-10);
    EXPECT_LE((a.covariance() - b.cov).norm(), 1e-10);
  }
}

TEST(KlUnderPerturbation, Examples) {
  EXPECT_EQ(kl_under_perturbation(scalar_model(), Vector::Zero(1)), 0.0);
  EXPECT_NEAR(kl_under_perturbation(scalar_model(), Vector::Constant(1, 2.0)), 1.0, 1e-14);
}

TEST(KlUnderPerturbation, MatchesClosedFormKl) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    RandomStream s(seed);
    const LinearGaussianModel m = LinearGaussianModel::random(s, 1 + static_cast<int>(seed % 4), 3);
    const Vector x = s.standard_normal(3), d = 0.3 * s.standard_normal(3);
    EXPECT_NEAR(kl_under_perturbation(m, d), kl_gaussian(posterior(m, x), posterior(m, Vector(x + d))), 1e-12)
        << seed;
  }
}

TEST(OptimalAttack, DiagonalCase) {
  const OptimalAttack a = optimal_attack(diag21(), 1.0);
  EXPECT_NEAR(a.delta(0), 1.0, 1e-8);
  EXPECT_NEAR(a.delta(1), 0.0, 1e-8);
  EXPECT_NEAR(a.kl_bound, 0.4, 1e-12);
  EXPECT_FALSE(a.degenerate);
  EXPECT_THROW(optimal_attack(diag21(), 0.0), std::invalid_argument);
}

TEST(OptimalAttack, IsotropicBoundOnly) {
  const LinearGaussianModel m = LinearGaussianModel::diagonal_task(Vector::Ones(3), 1.0);
  const OptimalAttack a = optimal_attack(m, 2.0);
  EXPECT_NEAR(a.kl_bound, 0.5 * 0.5 * 4.0, 1e-12);
  EXPECT_TRUE(a.degenerate);
}

TEST(OptimalAttack, RayleighEqualityAndBound) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    RandomStream s(seed);
    const LinearGaussianModel m =
        LinearGaussianModel::random(s, 1 + static_cast<int>(s.below(10)), 1 + static_cast<int>(s.below(10)));
    const double eps = 0.1 + s.uniform();
    const OptimalAttack a = optimal_attack(m, eps);
    EXPECT_NEAR(a.delta.norm(), eps, 1e-12);
    EXPECT_NEAR(kl_under_perturbation(m, a.delta), a.kl_bound, 1e-10 * std::max(1.0, a.kl_bound)) << seed;
    for (int k = 0; k < 1000; ++k) {
      const Vector d = uniform_in_ball(s, m.x_dim(), eps);
      EXPECT_LE(kl_under_perturbation(m, d), a.kl_bound * (1 + 1e-10)) << seed;
    }
  }
}

TEST(LinearGaussianModel, FromTaskUsesFrozenDiagonal) {
  const TaskSpec t = make_task(TaskName::gaussian_linear);
  const LinearGaussianModel m = LinearGaussianModel::from_task(t);
  EXPECT_EQ(Vector(m.A.diagonal()), t.linear_diag);
  EXPECT_NEAR(m.Lambda(0, 0), 0.01, 1e-15);
  EXPECT_THROW(LinearGaussianModel::from_task(make_task(TaskName::sir)), ConfigError);
}

TEST(LinearGaussianModel, InconsistentDimensions) {
  LinearGaussianModel m = diag21();
  m.b = Vector::Zero(3);
  EXPECT_THROW(posterior(m, Vector::Zero(2)), std::invalid_argument);
}
