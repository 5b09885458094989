#include "rnpe/metrics.hpp"
#include "rnpe/oracles.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <gtest/gtest.h>

#include <sstream>

using namespace rnpe;

namespace {

GaussianPosterior scaled(const GaussianPosterior& p, double s) { return GaussianPosterior::full(p.mean, s * p.covariance()); }

struct LinearSetup {
  LinearGaussianModel model;
  Dataset data;
};

LinearSetup linear_setup(Eigen::Index n, std::uint64_t seed) {
  const TaskSpec t = make_task(TaskName::gaussian_linear);
  return {LinearGaussianModel::from_task(t), generate_dataset(t, n, seed)};
}

}  // namespace

TEST(KlSummary, ZerosAndOrdering) {
  const KlSummary z = summarize_kl({0.0, 0.0, 0.0});
  EXPECT_EQ(z.median, 0.0);
  EXPECT_EQ(z.q15, 0.0);
  EXPECT_EQ(z.q85, 0.0);
  RandomStream s(1);
  std::vector<double> v(101);
  for (double& x : v) x = std::exp(s.normal());
  const KlSummary k = summarize_kl(v);
  EXPECT_LE(k.q15, k.median);
  EXPECT_LE(k.median, k.q85);
  EXPECT_THROW(summarize_kl({}), std::invalid_argument);
}

TEST(KlRobustness, UnperturbedIsZero) {
  const auto [m, ds] = linear_setup(20, 1);
  const GlmEstimator est = analytic_estimator(m);
  std::vector<AttackResult> attacks(20);
  for (Eigen::Index i = 0; i < 20; ++i) attacks[static_cast<std::size_t>(i)].x_perturbed = ds.xs.row(i).transpose();
  const KlSummary k = kl_robustness(est, attacks, ds.xs);
  EXPECT_EQ(k.median, 0.0);
  EXPECT_EQ(k.q85, 0.0);
}

TEST(KlRobustness, OptimalAttacksHitBoundAtEveryQuantile) {
  const auto [m, ds] = linear_setup(30, 2);
  const GlmEstimator est = analytic_estimator(m);
  const OptimalAttack opt = optimal_attack(m, 0.7);
  std::vector<AttackResult> attacks(30);
  for (Eigen::Index i = 0; i < 30; ++i)
    attacks[static_cast<std::size_t>(i)].x_perturbed = ds.xs.row(i).transpose() + opt.delta;
  const KlSummary k = kl_robustness(est, attacks, ds.xs);
  for (double q : {k.q15, k.median, k.q85}) EXPECT_NEAR(q, opt.kl_bound, 1e-9 * opt.kl_bound);
}

TEST(KlRobustness, FailedPointsAreSkipped) {
  const auto [m, ds] = linear_setup(3, 3);
  const GlmEstimator est = analytic_estimator(m);
  std::vector<AttackResult> attacks(3);
  for (Eigen::Index i = 0; i < 3; ++i) attacks[static_cast<std::size_t>(i)].x_perturbed = ds.xs.row(i).transpose();
  attacks[1].error = "boom";
  const auto kl = pointwise_kl(est, attacks, ds.xs);
  EXPECT_TRUE(std::isnan(kl[1]));
  EXPECT_EQ(kl_robustness(est, attacks, ds.xs).median, 0.0);
}

TEST(Coverage, GridAndCalibratedLevels) {
  const auto g = nominal_grid(21);
  ASSERT_EQ(g.size(), 21u);
  EXPECT_EQ(g.front(), 0.0);
  EXPECT_EQ(g.back(), 1.0);
  EXPECT_DOUBLE_EQ(calibrated_coverage(1.0, 1000), 1.0);
  EXPECT_DOUBLE_EQ(calibrated_coverage(0.0, 1000), 1.0 / 1001.0);
  EXPECT_DOUBLE_EQ(calibrated_coverage(0.5, 1000), 501.0 / 1001.0);
  EXPECT_THROW(nominal_grid(1), std::invalid_argument);
}

TEST(Coverage, ExactPosteriorIsCalibrated) {
  const auto [m, ds] = linear_setup(1000, 4);
  const PosteriorFn exact = [&m = m](const Vector& x) { return posterior(m, x); };
  const CoverageCurve c = expected_coverage(exact, ds.thetas, ds.xs, 1000, nominal_grid(), RandomStream(5));
  for (std::size_t j = 0; j < c.nominal.size(); ++j) {
    const double p = calibrated_coverage(c.nominal[j], 1000);
    EXPECT_NEAR(c.empirical[j], p, 3.0 * std::sqrt(p * (1 - p) / 1000.0) + 1e-12) << c.nominal[j];
  }
}

TEST(Coverage, PriorOnPriorDrawsIsCalibrated) {
  const auto [m, ds] = linear_setup(1000, 6);
  const PosteriorFn prior = [&m = m](const Vector&) { return GaussianPosterior::full(m.mu0, m.Sigma0); };
  const CoverageCurve c = expected_coverage(prior, ds.thetas, ds.xs, 200, nominal_grid(11), RandomStream(7));
  for (std::size_t j = 0; j < c.nominal.size(); ++j) {
    const double p = calibrated_coverage(c.nominal[j], 200);
    EXPECT_NEAR(c.empirical[j], p, 3.0 * std::sqrt(p * (1 - p) / 1000.0) + 1e-12) << c.nominal[j];
  }
}

TEST(Coverage, ShrunkCovarianceMatchesChiSquareOracle) {
  const auto [m, ds] = linear_setup(1000, 8);
  const double shrink = 0.25;
  const PosteriorFn over = [&m = m, shrink](const Vector& x) { return scaled(posterior(m, x), shrink); };
  const CoverageCurve c = expected_coverage(over, ds.thetas, ds.xs, 1000, nominal_grid(), RandomStream(9));
  const boost::math::chi_squared chi(m.theta_dim());
  for (std::size_t j = 1; j + 1 < c.nominal.size(); ++j) {
    const double p = boost::math::cdf(chi, shrink * boost::math::quantile(chi, c.nominal[j]));
    const double band = 3.0 * std::sqrt(std::max(p * (1 - p), 1e-4) / 1000.0) + 1.0 / 1000.0;
    EXPECT_NEAR(c.empirical[j], p, band) << c.nominal[j];
    EXPECT_LT(c.empirical[j], c.nominal[j]) << c.nominal[j];
  }
}

TEST(Coverage, Errors) {
  const PosteriorFn f = [](const Vector&) { return GaussianPosterior::diagonal(Vector::Zero(1), Vector::Ones(1)); };
  EXPECT_THROW(expected_coverage(f, Matrix::Zero(3, 1), Matrix::Zero(3, 1), 99, nominal_grid(), RandomStream(1)),
               std::invalid_argument);
  EXPECT_THROW(expected_coverage(f, Matrix::Zero(3, 1), Matrix::Zero(2, 1), 100, nominal_grid(), RandomStream(1)),
               std::invalid_argument);
}

TEST(Coverage, CoverageAtPicksNearestLevel) {
  CoverageCurve c;
  c.nominal = {0.0, 0.5, 0.9, 1.0};
  c.empirical = {0.1, 0.4, 0.7, 1.0};
  EXPECT_EQ(coverage_at(c, 0.9), 0.7);
  EXPECT_EQ(coverage_at(c, 0.88), 0.7);
}

TEST(NllAccuracy, StandardNormalAtZero) {
  const PosteriorFn f = [](const Vector&) { return GaussianPosterior::diagonal(Vector::Zero(1), Vector::Ones(1)); };
  EXPECT_NEAR(nll_accuracy(f, Matrix::Zero(1, 1), Matrix::Zero(1, 1)), -0.9189385332046727, 1e-12);
}

TEST(NllAccuracy, ExactScalarPosteriorMatchesEntropy) {
  const LinearGaussianModel m{Matrix::Ones(1, 1), Vector::Zero(1), Matrix::Ones(1, 1), Vector::Zero(1),
                              Matrix::Ones(1, 1)};
  RandomStream s(10);
  const int n = 20000;
  const Matrix th = s.standard_normal(n, 1);
  const Matrix xs = th + s.standard_normal(n, 1);
  const GlmEstimator est = analytic_estimator(m);
  // posterior variance 1/2; E log q = -0.5 log(2 pi e / 2)
  const double expect = -0.5 * std::log(2.0 * M_PI * std::exp(1.0) * 0.5);
  EXPECT_NEAR(nll_accuracy(est, th, xs), expect, 4.0 * std::sqrt(0.5 / n));
  const PosteriorFn wide = [&est](const Vector& x) { return scaled(est.predict(x), 4.0); };
  EXPECT_LT(nll_accuracy(wide, th, xs), nll_accuracy(est, th, xs));
}

TEST(Tradeoff, BetaZeroRowIsPlainNpe) {
  const TaskSpec t = make_task(TaskName::gaussian_linear);
  const Dataset train = generate_dataset(t, 600, 1), test = generate_dataset(t, 20, 2);
  MlpEstimator init({10, 8, 20}, 3);
  TrainConfig cfg;
  cfg.batch_size = 100;
  cfg.val_size = 100;
  cfg.max_epochs = 5;
  AttackConfig atk;
  atk.eps = 0.5;
  atk.steps = 10;
  const auto rows = tradeoff_sweep(init, train, test, {0.0, 0.1}, cfg, FimRegConfig{}, atk, 10);
  ASSERT_EQ(rows.size(), 2u);
  const auto npe = train_npe(init, train, cfg);
  EXPECT_EQ(rows[0].accuracy, nll_accuracy(npe.estimator, test.thetas, test.xs));
  EXPECT_EQ(rows[0].robustness,
            kl_robustness(npe.estimator, batch_attack(npe.estimator, test.xs, test.thetas, atk, 10), test.xs).median);
  EXPECT_FALSE(rows[1].diverged);
  EXPECT_THROW(tradeoff_sweep(init, train, test, {}, cfg, FimRegConfig{}, atk, 10), ConfigError);
}

TEST(Tradeoff, DivergedRowsAreFlagged) {
  const TaskSpec t = make_task(TaskName::gaussian_linear);
  Dataset train = generate_dataset(t, 300, 1);
  const Dataset test = generate_dataset(t, 5, 2);
  train.thetas(0, 0) = std::numeric_limits<double>::quiet_NaN();
  TrainConfig cfg;
  cfg.batch_size = 300;
  cfg.val_size = 0;
  cfg.max_epochs = 2;
  AttackConfig atk;
  atk.eps = 0.5;
  const auto rows = tradeoff_sweep(MlpEstimator({10, 4, 20}, 1), train, test, {0.0, 1.0}, cfg, FimRegConfig{}, atk, 5);
  for (const auto& r : rows) {
    EXPECT_TRUE(r.diverged);
    EXPECT_FALSE(r.note.empty());
    EXPECT_TRUE(std::isnan(r.accuracy));
  }
  std::ostringstream os;
  write_tradeoff_csv(os, rows);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "beta,accuracy,robustness,diverged");
  EXPECT_NE(os.str().find(",1\n"), std::string::npos);
}

TEST(CoverageCsv, HeaderAndRows) {
  CoverageCurve c;
  c.nominal = {0.0, 1.0};
  c.empirical = {0.0, 1.0};
  c.n_points = 10;
  c.n_posterior_samples = 100;
  std::ostringstream os;
  write_coverage_csv(os, c);
  EXPECT_EQ(os.str(), "nominal,empirical,std_error,n_points,n_samples\n0,0,0,10,100\n1,1,0,10,100\n");
}
