#ifndef RNPE_TRAINING_HPP
#define RNPE_TRAINING_HPP

#include "rnpe/attacks.hpp"
#include "rnpe/estimator.hpp"
#include "rnpe/tasks.hpp"

#include <functional>
#include <memory>
#include <limits>
#include <numeric>
#include <ostream>
#include <vector>

namespace rnpe {

struct DivergedTraining : NumericError {
  using NumericError::NumericError;
};

struct TrainConfig {
  int batch_size = 512;
  int max_epochs = 300;
  double lr = 1e-3;
  int val_size = 512;  // 0 disables early stopping; the last epoch is returned
  int patience = 20;
  std::uint64_t seed = 0;
  int lr_fallbacks = 2;

  void validate() const {
    if (batch_size < 1 || max_epochs < 0 || !(lr > 0.0) || val_size < 0 || patience < 1 || lr_fallbacks < 0)
      throw ConfigError("train: invalid TrainConfig");
  }
};

struct FimRegConfig {
  double beta = 0.0;
  double gamma = 0.85;
  int n_mc = 5;

  void validate() const {
    if (!(beta >= 0.0) || !(gamma > 0.0 && gamma <= 1.0) || n_mc < 1) throw ConfigError("train: invalid FimRegConfig");
  }
};

/// Per-task default regularization strength for FIM training.
inline double default_fim_beta(TaskName t) {
  switch (t) {
    case TaskName::gaussian_linear: return 0.001;
    case TaskName::sir: return 0.1;
    case TaskName::lotka_volterra: return 0.01;
  }
  return 0.0;
}

struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  Vector m, v;
  long step_count = 0;

  explicit AdamState(Eigen::Index n = 0) : m(Vector::Zero(n)), v(Vector::Zero(n)) {}

  void step(Vector& params, const Vector& grad, double lr) {
    ++step_count;
    m = beta1 * m + (1.0 - beta1) * grad;
    v = beta2 * v + (1.0 - beta2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    params.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
};

struct EpochRecord {
  int epoch = 0;
  double train_nll = 0.0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double penalty = 0.0;
  double lr = 0.0;
  double best_val = std::numeric_limits<double>::quiet_NaN();
};

template <Estimator E>
struct TrainResult {
  E estimator;
  std::vector<EpochRecord> history;
  int best_epoch = -1;
  double lr = 0.0;
  int fallbacks = 0;
};

inline void write_training_log(std::ostream& os, const std::vector<EpochRecord>& h) {
  os << "epoch,train_nll,val_loss,penalty,lr\n";
  char buf[256];
  for (const auto& r : h) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.train_nll, r.val_loss, r.penalty, r.lr);
    os << buf;
  }
}

/// One optimisation step's contribution: returns (nll, penalty) for the batch
/// and accumulates the total gradient into `grad`.
template <Estimator E>
using StepFn = std::function<std::pair<double, double>(const E& est, const Matrix& X, const Matrix& T,
                                                       std::uint64_t step, Vector& grad)>;

template <Estimator E>
using ValFn = std::function<double(const E& est, const Matrix& X, const Matrix& T)>;

namespace detail {

struct Split {
  Matrix X, T, Xv, Tv;  // columns are examples
};

inline Split split_rows(const Dataset& ds, const TrainConfig& cfg) {
  const Eigen::Index n = ds.size();
  if (n < static_cast<Eigen::Index>(cfg.batch_size) + cfg.val_size)
    throw ConfigError("train: dataset rows (" + std::to_string(n) + ") < batch_size + val_size");
  const Eigen::Index nt = n - cfg.val_size;
  return {ds.xs.topRows(nt).transpose(), ds.thetas.topRows(nt).transpose(), ds.xs.bottomRows(cfg.val_size).transpose(),
          ds.thetas.bottomRows(cfg.val_size).transpose()};
}

template <Estimator E>
TrainResult<E> run_epochs(const E& init, const Split& s, const TrainConfig& cfg, double lr, const StepFn<E>& step_fn,
                          const ValFn<E>& val_fn, const std::function<void()>& reset) {
  TrainResult<E> res{init, {}, -1, lr, 0};
  E& est = res.estimator;
  AdamState adam(est.params().size());
  const Eigen::Index nt = s.X.cols();
  const bool early = s.Xv.cols() > 0;
  Vector best_params = est.params();
  double best_val = std::numeric_limits<double>::infinity();
  int since_best = 0;
  std::vector<Eigen::Index> order(static_cast<std::size_t>(nt));
  const RandomStream shuffle_root = RandomStream(cfg.seed).derive("shuffle");
  std::uint64_t step = 0;
  reset();
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    RandomStream sh = shuffle_root.derive(static_cast<std::uint64_t>(epoch));
    sh.shuffle(order);
    double nll_acc = 0.0, pen_acc = 0.0;
    int batches = 0;
    for (Eigen::Index start = 0; start < nt; start += cfg.batch_size) {
      const Eigen::Index bs = std::min<Eigen::Index>(cfg.batch_size, nt - start);
      Matrix Xb(s.X.rows(), bs), Tb(s.T.rows(), bs);
      for (Eigen::Index k = 0; k < bs; ++k) {
        Xb.col(k) = s.X.col(order[static_cast<std::size_t>(start + k)]);
        Tb.col(k) = s.T.col(order[static_cast<std::size_t>(start + k)]);
      }
      Vector grad = Vector::Zero(est.params().size());
      const auto [nll, pen] = step_fn(est, Xb, Tb, step++, grad);
      if (!std::isfinite(nll) || !std::isfinite(pen) || !grad.allFinite())
        throw DivergedTraining("non-finite training loss at epoch " + std::to_string(epoch));
      adam.step(est.params(), grad, lr);
      nll_acc += nll;
      pen_acc += pen;
      ++batches;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_nll = nll_acc / batches;
    rec.penalty = pen_acc / batches;
    rec.lr = lr;
    if (early) {
      rec.val_loss = val_fn(est, s.Xv, s.Tv);
      if (!std::isfinite(rec.val_loss)) throw DivergedTraining("non-finite validation loss");
      if (rec.val_loss < best_val) {
        best_val = rec.val_loss;
        best_params = est.params();
        res.best_epoch = epoch;
        since_best = 0;
      } else {
        ++since_best;
      }
      rec.best_val = best_val;
    }
    res.history.push_back(rec);
    if (early && since_best >= cfg.patience) break;
  }
  if (early && res.best_epoch >= 0) est.params() = best_params;
  if (!early) res.best_epoch = cfg.max_epochs - 1;
  return res;
}

/// Restarts from `init` at lr / 10 (up to cfg.lr_fallbacks times) on divergence.
template <Estimator E>
TrainResult<E> train_with_fallback(const E& init, const Dataset& ds, const TrainConfig& cfg, const StepFn<E>& step_fn,
                                   const ValFn<E>& val_fn, const std::function<void()>& reset = [] {}) {
  cfg.validate();
  const Split s = split_rows(ds, cfg);
  double lr = cfg.lr;
  std::string last;
  for (int attempt = 0; attempt <= cfg.lr_fallbacks; ++attempt, lr /= 10.0) {
    try {
      auto res = run_epochs(init, s, cfg, lr, step_fn, val_fn, reset);
      res.fallbacks = attempt;
      return res;
    } catch (const NumericError& e) {
      last = e.what();
    }
  }
  throw DivergedTraining("training diverged after " + std::to_string(cfg.lr_fallbacks) + " lr fallbacks: " + last);
}

template <Estimator E>
double mean_nll(const E& est, const Matrix& X, const Matrix& T) {
  return nll_and_grad(est, X, T, nullptr);
}

}  // namespace detail

template <Estimator E>
TrainResult<E> train_npe(const E& est, const Dataset& ds, const TrainConfig& cfg) {
  StepFn<E> step = [](const E& e, const Matrix& X, const Matrix& T, std::uint64_t, Vector& g) {
    return std::pair{nll_and_grad(e, X, T, &g), 0.0};
  };
  return detail::train_with_fallback<E>(est, ds, cfg, step, detail::mean_nll<E>);
}

/// Mean NLL plus beta times the MC FIM trace, with the trace gradient
/// smoothed as g = gamma * grad r + (1 - gamma) * g_prev starting at g = 0.
/// beta = 0 takes exactly the train_npe path.
template <Estimator E>
TrainResult<E> train_fim_regularized(const E& est, const Dataset& ds, const TrainConfig& cfg, const FimRegConfig& reg) {
  reg.validate();
  if (reg.beta == 0.0) return train_npe(est, ds, cfg);
  auto ema = std::make_shared<Vector>();
  const RandomStream noise_root = RandomStream(cfg.seed).derive("fim.noise");
  StepFn<E> step = [=](const E& e, const Matrix& X, const Matrix& T, std::uint64_t k, Vector& g) {
    const double nll = nll_and_grad(e, X, T, &g);
    RandomStream ns = noise_root.derive(k);
    const Matrix noise = ns.standard_normal(e.theta_dim(), X.cols() * reg.n_mc);
    Vector gr = Vector::Zero(g.size());
    const double r = e.fim_trace_mc(X, noise, reg.n_mc, &gr);
    *ema = reg.gamma * gr + (1.0 - reg.gamma) * *ema;
    g += reg.beta * *ema;
    return std::pair{nll, r};
  };
  const RandomStream val_noise = RandomStream(cfg.seed).derive("fim.val");
  ValFn<E> val = [=](const E& e, const Matrix& X, const Matrix& T) {
    RandomStream ns = val_noise;
    const Matrix noise = ns.standard_normal(e.theta_dim(), X.cols() * reg.n_mc);
    return nll_and_grad(e, X, T, nullptr) + reg.beta * e.fim_trace_mc(X, noise, reg.n_mc, nullptr);
  };
  auto reset = [ema, n = est.params().size()] { *ema = Vector::Zero(n); };
  return detail::train_with_fallback<E>(est, ds, cfg, step, val, reset);
}

/// Mean NLL plus beta * KL(q(.|x) || q(.|x_adv)), x_adv from a fresh PGD
/// attack (forward KL) on every batch.
template <Estimator E>
TrainResult<E> train_trades(const E& est, const Dataset& ds, const TrainConfig& cfg, double beta, double attack_eps,
                            int attack_steps = 20) {
  if (!(attack_eps > 0.0) || attack_steps < 1 || !(beta >= 0.0)) throw ConfigError("trades: invalid settings");
  if (beta == 0.0) return train_npe(est, ds, cfg);
  const RandomStream root = RandomStream(cfg.seed).derive("trades");
  StepFn<E> step = [=](const E& e, const Matrix& X, const Matrix& T, std::uint64_t k, Vector& g) {
    RandomStream s = root.derive(k);
    const auto obj = closed_form_objective(e, AttackKind::pgd_kl_forward, X, nullptr);
    const auto adv = pgd_batch(obj, X, attack_eps, attack_steps, 2.5 * attack_eps / attack_steps, s);
    const Matrix Xa = X + adv.delta;
    const double nll = nll_and_grad(e, X, T, &g);
    const auto p = e.predict_batch(X);
    const auto q = e.predict_batch(Xa);
    std::vector<PosteriorCotangent> cp, cq;
    double kl = 0.0;
    const double w = beta / static_cast<double>(X.cols());
    for (std::size_t b = 0; b < p.size(); ++b) {
      kl += kl_gaussian(p[b], q[b]);
      auto c = kl_cotangents(p[b], q[b]);
      c.wrt_p *= w;
      c.wrt_q *= w;
      cp.push_back(std::move(c.wrt_p));
      cq.push_back(std::move(c.wrt_q));
    }
    e.pullback_params(X, cp, g);
    e.pullback_params(Xa, cq, g);
    return std::pair{nll, kl / static_cast<double>(X.cols())};
  };
  return detail::train_with_fallback<E>(est, ds, cfg, step, detail::mean_nll<E>);
}

/// Minimises the NLL at the worst-case observation in the eps-ball (PGD on
/// the NLL per batch).
template <Estimator E>
TrainResult<E> train_adversarial(const E& est, const Dataset& ds, const TrainConfig& cfg, double attack_eps,
                                 int attack_steps = 20) {
  if (!(attack_eps > 0.0) || attack_steps < 1) throw ConfigError("adversarial training: invalid settings");
  const RandomStream root = RandomStream(cfg.seed).derive("adversarial");
  StepFn<E> step = [=](const E& e, const Matrix& X, const Matrix& T, std::uint64_t k, Vector& g) {
    RandomStream s = root.derive(k);
    const auto obj = closed_form_objective(e, AttackKind::nll, X, &T);
    const auto adv = pgd_batch(obj, X, attack_eps, attack_steps, 2.5 * attack_eps / attack_steps, s);
    return std::pair{nll_and_grad(e, Matrix(X + adv.delta), T, &g), 0.0};
  };
  return detail::train_with_fallback<E>(est, ds, cfg, step, detail::mean_nll<E>);
}

/// x replaced by x + u, u uniform in the eps-ball, per example and step.
template <Estimator E>
TrainResult<E> train_noise_augmented(const E& est, const Dataset& ds, const TrainConfig& cfg, double eps) {
  if (!(eps >= 0.0)) throw ConfigError("noise augmentation: eps must be >= 0");
  if (eps == 0.0) return train_npe(est, ds, cfg);
  const RandomStream root = RandomStream(cfg.seed).derive("noise_aug");
  StepFn<E> step = [=](const E& e, const Matrix& X, const Matrix& T, std::uint64_t k, Vector& g) {
    RandomStream s = root.derive(k);
    Matrix Xn = X;
    for (Eigen::Index b = 0; b < X.cols(); ++b) Xn.col(b) += uniform_in_ball(s, X.rows(), eps);
    return std::pair{nll_and_grad(e, Xn, T, &g), 0.0};
  };
  return detail::train_with_fallback<E>(est, ds, cfg, step, detail::mean_nll<E>);
}

}  // namespace rnpe

#endif  // RNPE_TRAINING_HPP
