#include "rnpe/training.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace rnpe;

namespace {

Dataset make_dataset(Matrix thetas, Matrix xs) {
  Dataset ds;
  ds.thetas = std::move(thetas);
  ds.xs = std::move(xs);
  compute_statistics(ds);
  return ds;
}

// theta = 0.8 x1 - 0.5 x2 + 0.3 noise
Dataset linear_data(int n, std::uint64_t seed) {
  RandomStream s(seed);
  const Matrix xs = s.standard_normal(n, 2);
  Vector w(2);
  w << 0.8, -0.5;
  const Matrix th = xs * w + 0.3 * s.standard_normal(n);
  return make_dataset(th, xs);
}

TrainConfig full_batch(int n, int epochs, double lr) {
  TrainConfig c;
  c.batch_size = n;
  c.val_size = 0;
  c.max_epochs = epochs;
  c.lr = lr;
  c.seed = 3;
  return c;
}

double rel(const Matrix& a, const Matrix& b) { return (a - b).norm() / b.norm(); }

}  // namespace

TEST(TrainNpe, GlmConvergesToClosedForm) {
  const Dataset ds = linear_data(2000, 1);
  const FeatureMap fm = FeatureMap::identity(2);
  const GlmEstimator oracle = glm_fit_closed_form(ds, fm);
  TrainResult<GlmEstimator> r = train_npe(GlmEstimator(fm, 1), ds, full_batch(2000, 2000, 1e-2));
  r = train_npe(r.estimator, ds, full_batch(2000, 500, 1e-3));
  EXPECT_LE(rel(r.estimator.weights(), oracle.weights()), 1e-3);
  EXPECT_LE(rel(r.estimator.covariance(), oracle.covariance()), 1e-3);
}

TEST(TrainNpe, IndependentThetaLearnsMarginal) {
  RandomStream s(2);
  const int n = 20000, val = 2000;
  const Matrix th = 1.5 + 0.7 * s.standard_normal(n, 1).array();
  const Dataset ds = make_dataset(th, s.standard_normal(n, 1));
  TrainConfig c;
  c.max_epochs = 100;
  c.lr = 3e-3;
  c.val_size = val;
  c.seed = 1;
  const auto r = train_npe(MlpEstimator({1, 8, 2}, 4), ds, c);
  const auto t = th.topRows(n - val).array();
  const double mean = t.mean();
  const double sd = std::sqrt((t - mean).square().mean());
  for (double x = -2.0; x <= 2.0; x += 0.5) {
    const GaussianPosterior p = r.estimator.predict(Vector::Constant(1, x));
    EXPECT_NEAR(p.mean(0), mean, 0.05) << x;
    EXPECT_NEAR(std::sqrt(p.covariance()(0, 0)), sd, 0.05) << x;
  }
}

TEST(TrainNpe, ZeroEpochsReturnsInit) {
  const Dataset ds = linear_data(100, 2);
  const MlpEstimator init({2, 8, 2}, 1);
  TrainConfig c = full_batch(100, 0, 1e-3);
  EXPECT_EQ(train_npe(init, ds, c).estimator.params(), init.params());
}

TEST(TrainNpe, DeterministicAndEarlyStoppingReturnsBestEpoch) {
  const Dataset ds = linear_data(1500, 3);
  TrainConfig c;
  c.batch_size = 128;
  c.max_epochs = 60;
  c.val_size = 300;
  c.patience = 5;
  c.lr = 3e-2;
  const MlpEstimator init({2, 16, 2}, 2);
  const auto a = train_npe(init, ds, c);
  const auto b = train_npe(init, ds, c);
  EXPECT_EQ(a.estimator.params(), b.estimator.params());
  ASSERT_GE(a.best_epoch, 0);
  double lowest = std::numeric_limits<double>::infinity();
  for (const auto& h : a.history) lowest = std::min(lowest, h.val_loss);
  EXPECT_EQ(a.history[static_cast<std::size_t>(a.best_epoch)].val_loss, lowest);
  const Matrix Xv = ds.xs.bottomRows(300).transpose(), Tv = ds.thetas.bottomRows(300).transpose();
  EXPECT_DOUBLE_EQ(nll_and_grad(a.estimator, Xv, Tv, nullptr), lowest);
  for (std::size_t i = 1; i < a.history.size(); ++i) EXPECT_LE(a.history[i].best_val, a.history[i - 1].best_val);
}

TEST(TrainNpe, TooFewRows) {
  const Dataset ds = linear_data(100, 4);
  TrainConfig c;
  c.batch_size = 64;
  c.val_size = 64;
  EXPECT_THROW(train_npe(MlpEstimator({2, 4, 2}, 1), ds, c), ConfigError);
}

TEST(TrainNpe, NonFiniteDataDivergesAfterFallbacks) {
  Dataset ds = linear_data(100, 5);
  ds.thetas(7, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(train_npe(MlpEstimator({2, 4, 2}, 1), ds, full_batch(100, 3, 1e-3)), DivergedTraining);
}

TEST(TrainNpe, FallbackLowersLearningRate) {
  const Dataset ds = linear_data(200, 6);
  TrainConfig c = full_batch(200, 50, 1e6);
  c.lr_fallbacks = 6;
  try {
    const auto r = train_npe(MlpEstimator({2, 8, 2}, 1), ds, c);
    EXPECT_DOUBLE_EQ(r.lr, 1e6 / std::pow(10.0, r.fallbacks));
  } catch (const DivergedTraining&) {
    SUCCEED();
  }
}

TEST(TrainingLog, Header) {
  std::ostringstream os;
  write_training_log(os, {EpochRecord{}});
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "epoch,train_nll,val_loss,penalty,lr");
}

TEST(TrainFim, BetaZeroIsTrainNpe) {
  const Dataset ds = linear_data(600, 7);
  TrainConfig c;
  c.batch_size = 100;
  c.max_epochs = 5;
  c.val_size = 100;
  const MlpEstimator init({2, 8, 2}, 3);
  EXPECT_EQ(train_fim_regularized(init, ds, c, FimRegConfig{0.0, 0.85, 5}).estimator.params(),
            train_npe(init, ds, c).estimator.params());
}

TEST(TrainFim, EmaWeightsNewGradientByGamma) {
  const Dataset ds = linear_data(64, 8);
  const MlpEstimator init({2, 6, 2}, 5);
  TrainConfig c = full_batch(64, 2, 1e-2);
  for (double gamma : {1.0, 0.4}) {
    const FimRegConfig reg{0.5, gamma, 3};
    const auto r = train_fim_regularized(init, ds, c, reg);
    // manual replay of two full-batch steps
    MlpEstimator e = init;
    AdamState adam(e.params().size());
    Vector ema = Vector::Zero(e.params().size());
    const RandomStream noise_root = RandomStream(c.seed).derive("fim.noise");
    const RandomStream shuffle_root = RandomStream(c.seed).derive("shuffle");
    for (std::uint64_t k = 0; k < 2; ++k) {
      std::vector<Eigen::Index> order(64);
      std::iota(order.begin(), order.end(), Eigen::Index{0});
      RandomStream sh = shuffle_root.derive(k);
      sh.shuffle(order);
      Matrix X(2, 64), T(1, 64);
      for (int j = 0; j < 64; ++j) {
        X.col(j) = ds.xs.row(order[static_cast<std::size_t>(j)]).transpose();
        T.col(j) = ds.thetas.row(order[static_cast<std::size_t>(j)]).transpose();
      }
      Vector g = Vector::Zero(e.params().size()), gr = g;
      nll_and_grad(e, X, T, &g);
      RandomStream ns = noise_root.derive(k);
      e.fim_trace_mc(X, ns.standard_normal(1, 64 * reg.n_mc), reg.n_mc, &gr);
      ema = gamma * gr + (1.0 - gamma) * ema;
      adam.step(e.params(), g + reg.beta * ema, c.lr);
    }
    EXPECT_LE((r.estimator.params() - e.params()).cwiseAbs().maxCoeff(), 1e-12) << gamma;
  }
}

TEST(TrainFim, HandCaseConvergesToClosedForm) {
  Matrix xs(3, 1), th(3, 1);
  xs << 1, 2, 3;
  th << 1, 2, 4;
  const Dataset ds = make_dataset(th, xs);
  const FeatureMap fm = FeatureMap::identity(1);
  const GlmEstimator oracle = glm_fit_fim_closed_form(ds, fm, 1.0);
  ASSERT_DOUBLE_EQ(oracle.weights()(0, 0), 17.0 / 16.0);
  TrainConfig c = full_batch(3, 3000, 1e-2);
  const FimRegConfig reg{1.0 / 3.0, 0.85, 64};
  auto r = train_fim_regularized(GlmEstimator(fm, 1), ds, c, reg);
  c.max_epochs = 1000;
  c.lr = 1e-3;
  r = train_fim_regularized(r.estimator, ds, c, reg);
  EXPECT_NEAR(r.estimator.weights()(0, 0), 1.0625, 1e-2 * 1.0625);
  EXPECT_LE(rel(r.estimator.covariance(), oracle.covariance()), 1e-2);
}

TEST(TrainFim, PenaltyGradientMatchesExactTrace) {
  MlpEstimator est({3, 6, 6, 4}, 11);
  RandomStream s(12);
  const Matrix X = s.standard_normal(3, 4);
  auto exact_trace = [&X](const MlpEstimator& e) {
    double t = 0.0;
    for (Eigen::Index b = 0; b < X.cols(); ++b) t += e.fim_exact(X.col(b)).trace();
    return t / static_cast<double>(X.cols());
  };
  const Eigen::Index p = est.params().size();
  Vector fd(p);
  for (Eigen::Index i = 0; i < p; ++i) {
    MlpEstimator a = est, b = est;
    a.params()(i) += 1e-6;
    b.params()(i) -= 1e-6;
    fd(i) = (exact_trace(a) - exact_trace(b)) / 2e-6;
  }
  const int chunks = 20, per_chunk = 500;
  Matrix grads(p, chunks);
  for (int k = 0; k < chunks; ++k) {
    Vector g = Vector::Zero(p);
    est.fim_trace_mc(X, s.standard_normal(2, X.cols() * per_chunk), per_chunk, &g);
    grads.col(k) = g;
  }
  const Vector mean = grads.rowwise().mean();
  const double se2 = (grads.colwise() - mean).squaredNorm() / (chunks - 1) / chunks;
  EXPECT_LE((mean - fd).norm(), 3.0 * std::sqrt(se2));
}

TEST(TrainTrades, BetaZeroIsTrainNpe) {
  const Dataset ds = linear_data(300, 9);
  TrainConfig c = full_batch(300, 5, 1e-2);
  const MlpEstimator init({2, 8, 2}, 3);
  EXPECT_EQ(train_trades(init, ds, c, 0.0, 0.5).estimator.params(), train_npe(init, ds, c).estimator.params());
  EXPECT_THROW(train_trades(init, ds, c, 1.0, 0.0), ConfigError);
}

TEST(TrainTrades, TinyEpsApproachesTrainNpe) {
  const Dataset ds = linear_data(300, 10);
  TrainConfig c = full_batch(300, 10, 1e-2);
  const MlpEstimator init({2, 8, 2}, 3);
  const Vector a = train_trades(init, ds, c, 1.0, 1e-9).estimator.params();
  const Vector b = train_npe(init, ds, c).estimator.params();
  EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(TrainAdversarial, TinyEpsApproachesTrainNpe) {
  const Dataset ds = linear_data(300, 11);
  TrainConfig c = full_batch(300, 10, 1e-2);
  const MlpEstimator init({2, 8, 2}, 3);
  const Vector a = train_adversarial(init, ds, c, 1e-9).estimator.params();
  const Vector b = train_npe(init, ds, c).estimator.params();
  EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(TrainAdversarial, InnerPgdBestSoFarIncreases) {
  const Dataset ds = linear_data(64, 12);
  const MlpEstimator est({2, 8, 2}, 3);
  const Matrix X = ds.xs.transpose(), T = ds.thetas.transpose();
  const auto obj = closed_form_objective(est, AttackKind::nll, X, &T);
  RandomStream s(1);
  const auto r = pgd_batch(obj, X, 0.5, 20, 2.5 * 0.5 / 20, s);
  for (const auto& tr : r.traces) {
    ASSERT_EQ(tr.size(), 21u);
    for (std::size_t i = 1; i < tr.size(); ++i) EXPECT_GE(tr[i], tr[i - 1]);
    EXPECT_GT(tr.back(), tr.front());
  }
}

TEST(TrainNoise, EpsZeroIsTrainNpe) {
  const Dataset ds = linear_data(300, 13);
  TrainConfig c = full_batch(300, 5, 1e-2);
  const MlpEstimator init({2, 8, 2}, 3);
  EXPECT_EQ(train_noise_augmented(init, ds, c, 0.0).estimator.params(), train_npe(init, ds, c).estimator.params());
  EXPECT_THROW(train_noise_augmented(init, ds, c, -1.0), ConfigError);
}

TEST(TrainNoise, BallRadiusMoment) {
  RandomStream s(14);
  const int d = 4, n = 20000;
  const double eps = 1.0;
  double acc = 0.0, acc2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double r = uniform_in_ball(s, d, eps).norm();
    ASSERT_LE(r, eps + 1e-12);
    acc += r;
    acc2 += r * r;
  }
  const double mean = acc / n;
  const double se = std::sqrt((acc2 / n - mean * mean) / n);
  EXPECT_NEAR(mean, eps * d / (d + 1.0), 4.0 * se);
}

TEST(DefaultFimBeta, PerTask) {
  EXPECT_EQ(default_fim_beta(TaskName::gaussian_linear), 0.001);
  EXPECT_EQ(default_fim_beta(TaskName::sir), 0.1);
  EXPECT_EQ(default_fim_beta(TaskName::lotka_volterra), 0.01);
}
