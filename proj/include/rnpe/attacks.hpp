#ifndef RNPE_ATTACKS_HPP
#define RNPE_ATTACKS_HPP

#include "rnpe/estimator.hpp"
#include "rnpe/numerics.hpp"

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace rnpe {

enum class AttackKind { pgd_kl_forward, pgd_kl_reverse, random_l2, mmd, nll };

inline std::string_view to_string(AttackKind k) {
  switch (k) {
    case AttackKind::pgd_kl_forward: return "pgd_kl_forward";
    case AttackKind::pgd_kl_reverse: return "pgd_kl_reverse";
    case AttackKind::random_l2: return "random_l2";
    case AttackKind::mmd: return "mmd";
    case AttackKind::nll: return "nll";
  }
  return "?";
}

inline AttackKind attack_kind_from_string(std::string_view s) {
  for (AttackKind k : {AttackKind::pgd_kl_forward, AttackKind::pgd_kl_reverse, AttackKind::random_l2, AttackKind::mmd,
                       AttackKind::nll})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown attack kind '" + std::string(s) + "'");
}

struct AttackConfig {
  AttackKind kind = AttackKind::pgd_kl_forward;
  double eps = 0.0;         // absolute
  int steps = 200;
  double step_size = 0.0;   // <= 0 means 2.5 * eps / steps
  bool monte_carlo = false; // forward KL via samples instead of the closed form
  int mc_per_step = 5;
  int mc_final = 256;
  int mmd_samples = 10;
  std::uint64_t seed = 0;

  double effective_step_size() const { return step_size > 0.0 ? step_size : 2.5 * eps / steps; }

  void validate() const {
    if (!(eps > 0.0)) throw ConfigError("attack: eps must be > 0");
    if (steps < 1) throw ConfigError("attack: steps must be >= 1");
    if (mc_per_step < 1 || mc_final < 1) throw ConfigError("attack: Monte Carlo budgets must be >= 1");
    if (mmd_samples < 2 || mmd_samples % 2 != 0) throw ConfigError("attack: mmd_samples must be even and >= 2");
  }
};

/// Box constraint for perturbed observations; empty vectors mean unbounded.
struct Bounds {
  Vector lo, hi;
  bool active() const { return lo.size() > 0; }
};

struct AttackResult {
  Vector delta;
  Vector x_perturbed;
  std::vector<double> objective_trace;  // best-so-far, one entry per evaluation
  double final_objective = 0.0;
  bool clamped = false;
  int restarts = 0;
  bool zero_gradient = false;
  std::string error;
};

inline Vector project_l2_ball(const Vector& delta, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("project_l2_ball: eps must be > 0");
  const double n = delta.norm();
  return n <= eps ? delta : Vector(delta * (eps / n));
}

/// Linear-time MMD^2 between sample sets (rows), RBF kernel of length `bandwidth`.
/// Consecutive row pairs (2i, 2i+1) form the independent pair statistics.
inline double mmd_linear(const Matrix& X, const Matrix& Y, double bandwidth, Matrix* grad_y = nullptr) {
  const Eigen::Index n = X.rows();
  if (n % 2 != 0 || Y.rows() != n) throw std::invalid_argument("mmd_linear: need equal, even sample counts");
  const double inv = 1.0 / (2.0 * bandwidth * bandwidth);
  auto k = [&](const Vector& a, const Vector& b) { return std::exp(-(a - b).squaredNorm() * inv); };
  if (grad_y) *grad_y = Matrix::Zero(Y.rows(), Y.cols());
  double acc = 0.0;
  for (Eigen::Index i = 0; i + 1 < n; i += 2) {
    const Vector x1 = X.row(i).transpose(), x2 = X.row(i + 1).transpose();
    const Vector y1 = Y.row(i).transpose(), y2 = Y.row(i + 1).transpose();
    const double kyy = k(y1, y2), kx1y2 = k(x1, y2), kx2y1 = k(x2, y1);
    acc += k(x1, x2) + kyy - kx1y2 - kx2y1;
    if (grad_y) {
      // d k(a, b) / d b = k (a - b) / l^2
      const double s = 2.0 * inv;
      grad_y->row(i) += (kyy * (y2 - y1) * s - kx2y1 * (x2 - y1) * s).transpose();
      grad_y->row(i + 1) += (kyy * (y1 - y2) * s - kx1y2 * (x1 - y2) * s).transpose();
    }
  }
  const double scale = 2.0 / static_cast<double>(n);
  if (grad_y) *grad_y *= scale;
  return scale * acc;
}

/// Median pairwise distance between rows; 1 when degenerate.
inline double median_bandwidth(const Matrix& S) {
  std::vector<double> d;
  for (Eigen::Index i = 0; i < S.rows(); ++i)
    for (Eigen::Index j = i + 1; j < S.rows(); ++j) d.push_back((S.row(i) - S.row(j)).norm());
  if (d.empty()) return 1.0;
  const double m = median(std::move(d));
  return m > 1e-12 ? m : 1.0;
}

/// Exact MMD^2 between N(m1, I) and N(m2, I) under an RBF kernel of length l.
inline double mmd_gaussian_unit_exact(const Vector& m1, const Vector& m2, double l) {
  const double d = static_cast<double>(m1.size());
  const double l2 = l * l;
  const double same = std::pow(l2 / (l2 + 2.0), d / 2.0);
  const double cross = same * std::exp(-(m1 - m2).squaredNorm() / (2.0 * (l2 + 2.0)));
  return 2.0 * same - 2.0 * cross;
}

// ---------------------------------------------------------------------------
// Objectives. Each evaluates values at the columns of Xp and optionally the
// gradient w.r.t. each column.
// ---------------------------------------------------------------------------

using BatchObjective = std::function<Vector(const Matrix& Xp, Matrix* grad)>;

template <Estimator E>
BatchObjective closed_form_objective(const E& est, AttackKind kind, const Matrix& X, const Matrix* thetas) {
  auto clean = std::make_shared<std::vector<GaussianPosterior>>(est.predict_batch(X));
  if (kind == AttackKind::nll && !thetas) throw ConfigError("nll attack needs theta_true");
  std::shared_ptr<Matrix> th = thetas ? std::make_shared<Matrix>(*thetas) : nullptr;
  return [&est, kind, clean, th](const Matrix& Xp, Matrix* grad) {
    const auto pert = est.predict_batch(Xp);
    const Eigen::Index B = Xp.cols();
    Vector val(B);
    std::vector<PosteriorCotangent> cot;
    if (grad) cot.reserve(static_cast<std::size_t>(B));
    for (Eigen::Index b = 0; b < B; ++b) {
      const auto& p = (*clean)[static_cast<std::size_t>(b)];
      const auto& q = pert[static_cast<std::size_t>(b)];
      switch (kind) {
        case AttackKind::pgd_kl_forward:
          val(b) = kl_gaussian(p, q);
          if (grad) cot.push_back(kl_cotangents(p, q).wrt_q);
          break;
        case AttackKind::pgd_kl_reverse:
          val(b) = kl_gaussian(q, p);
          if (grad) cot.push_back(kl_cotangents(q, p).wrt_p);
          break;
        case AttackKind::nll: {
          const Vector t = th->col(b);
          val(b) = -log_prob(q, t);
          if (grad) {
            cot.push_back(log_prob_cotangent(q, t));
            cot.back() *= -1.0;
          }
          break;
        }
        default:
          throw ConfigError("closed_form_objective: unsupported kind");
      }
    }
    if (grad) *grad = est.pullback_x(Xp, cot);
    return val;
  };
}

/// Forward KL estimated with `n` fresh samples from q(.|x) per call.
template <Estimator E>
BatchObjective monte_carlo_kl_objective(const E& est, const Matrix& X, RandomStream& stream, int n) {
  auto clean = std::make_shared<std::vector<GaussianPosterior>>(est.predict_batch(X));
  return [&est, clean, &stream, n](const Matrix& Xp, Matrix* grad) {
    const auto pert = est.predict_batch(Xp);
    const Eigen::Index B = Xp.cols();
    Vector val(B);
    std::vector<PosteriorCotangent> cot;
    for (Eigen::Index b = 0; b < B; ++b) {
      const auto& p = (*clean)[static_cast<std::size_t>(b)];
      const auto& q = pert[static_cast<std::size_t>(b)];
      const Matrix th = sample_reparam(p, stream, n);
      double acc = 0.0;
      PosteriorCotangent c = PosteriorCotangent::zero(p.dim());
      for (int i = 0; i < n; ++i) {
        const Vector t = th.row(i).transpose();
        acc += log_prob(p, t) - log_prob(q, t);
        if (grad) c += log_prob_cotangent(q, t);
      }
      val(b) = acc / n;
      if (grad) {
        c *= -1.0 / n;
        cot.push_back(std::move(c));
      }
    }
    if (grad) *grad = est.pullback_x(Xp, cot);
    return val;
  };
}

/// Linear-time MMD^2 between q(.|x) and q(.|x_pert) with common noise: both
/// sample sets are driven by the same standard-normal draws, refreshed on
/// every call. Bandwidths are fixed by the caller (one per column).
template <Estimator E>
BatchObjective mmd_objective_fn(const E& est, const Matrix& X, RandomStream& stream, int n, Vector bandwidths) {
  auto clean = std::make_shared<std::vector<GaussianPosterior>>(est.predict_batch(X));
  auto bw = std::make_shared<Vector>(std::move(bandwidths));
  return [&est, clean, bw, &stream, n](const Matrix& Xp, Matrix* grad) {
    const auto pert = est.predict_batch(Xp);
    const Eigen::Index B = Xp.cols();
    Vector val(B);
    std::vector<PosteriorCotangent> cot;
    for (Eigen::Index b = 0; b < B; ++b) {
      const auto& p = (*clean)[static_cast<std::size_t>(b)];
      const auto& q = pert[static_cast<std::size_t>(b)];
      const Matrix eps = stream.standard_normal(n, p.dim());
      const Matrix xs = sample_reparam(p, eps), ys = sample_reparam(q, eps);
      Matrix gy;
      val(b) = mmd_linear(xs, ys, (*bw)(b), grad ? &gy : nullptr);
      if (grad) cot.push_back(sample_cotangent(q, eps, gy));
    }
    if (grad) *grad = est.pullback_x(Xp, cot);
    return val;
  };
}

/// Median-heuristic bandwidth from `n` samples of q(.|x) (drawn from `stream`).
template <Estimator E>
double mmd_bandwidth(const E& est, const Vector& x, RandomStream& stream, int n) {
  return median_bandwidth(sample_reparam(est.predict(x), stream, n));
}

/// MMD^2 between q(.|x) and q(.|x_pert) from n common-noise pairs; the
/// gradient w.r.t. x_pert is written to grad when non-null.
template <Estimator E>
double mmd_objective(const E& est, const Vector& x, const Vector& x_pert, RandomStream& stream, int n, double bandwidth,
                     Vector* grad = nullptr) {
  RandomStream local = stream;
  auto f = mmd_objective_fn(est, Matrix(x), local, n, Vector::Constant(1, bandwidth));
  Matrix g;
  const double v = f(Matrix(x_pert), grad ? &g : nullptr)(0);
  if (grad) *grad = g.col(0);
  stream = local;
  return v;
}

// ---------------------------------------------------------------------------
// PGD engine
// ---------------------------------------------------------------------------

struct PgdBatchResult {
  Matrix delta;  // best iterate per column
  Vector best;
  std::vector<std::vector<double>> traces;
  std::vector<bool> clamped;
  std::vector<int> restarts;
  std::vector<bool> zero_gradient;
};

inline constexpr double kZeroGradient = 1e-12;
inline constexpr int kMaxRestarts = 3;
inline constexpr double kInitRadius = 1e-3;

namespace detail {

inline bool clamp_and_project(const Vector& x, Vector& delta, double eps, const Bounds& bounds) {
  delta = project_l2_ball(delta, eps);
  if (!bounds.active()) return false;
  const Vector xp = (x + delta).cwiseMax(bounds.lo).cwiseMin(bounds.hi);
  const bool changed = xp != x + delta;
  delta = project_l2_ball(xp - x, eps);
  return changed;
}

}  // namespace detail

/// L2 PGD ascent on `obj` for every column of X, normalized-gradient steps.
/// Returns the best iterate per column; traces are best-so-far values.
inline PgdBatchResult pgd_batch(const BatchObjective& obj, const Matrix& X, double eps, int steps, double step_size,
                                RandomStream& stream, const Bounds& bounds = {}) {
  const Eigen::Index B = X.cols();
  const Eigen::Index d = X.rows();
  PgdBatchResult r;
  r.traces.assign(static_cast<std::size_t>(B), {});
  r.clamped.assign(static_cast<std::size_t>(B), false);
  r.restarts.assign(static_cast<std::size_t>(B), 0);
  r.zero_gradient.assign(static_cast<std::size_t>(B), false);
  Matrix delta(d, B);
  for (Eigen::Index b = 0; b < B; ++b) {
    Vector v = uniform_in_ball(stream, d, kInitRadius * eps);
    if (detail::clamp_and_project(X.col(b), v, eps, bounds)) r.clamped[static_cast<std::size_t>(b)] = true;
    delta.col(b) = v;
  }
  r.delta = delta;
  r.best = Vector::Constant(B, -std::numeric_limits<double>::infinity());
  Matrix grad;
  for (int it = 0; it <= steps; ++it) {
    const bool last = it == steps;
    const Vector val = obj(X + delta, last ? nullptr : &grad);
    for (Eigen::Index b = 0; b < B; ++b) {
      const auto ub = static_cast<std::size_t>(b);
      if (std::isfinite(val(b)) && val(b) > r.best(b)) {
        r.best(b) = val(b);
        r.delta.col(b) = delta.col(b);
      }
      r.traces[ub].push_back(r.best(b));
    }
    if (last) break;
    for (Eigen::Index b = 0; b < B; ++b) {
      const auto ub = static_cast<std::size_t>(b);
      const double gn = grad.col(b).norm();
      Vector v = delta.col(b);
      if (!(gn >= kZeroGradient)) {
        if (it == 0 && r.restarts[ub] < kMaxRestarts) {
          // fresh random start, same iteration budget
          ++r.restarts[ub];
          v = uniform_in_ball(stream, d, eps);
        } else {
          r.zero_gradient[ub] = true;
          continue;
        }
      } else {
        v += step_size * grad.col(b) / gn;
      }
      if (detail::clamp_and_project(X.col(b), v, eps, bounds)) r.clamped[ub] = true;
      delta.col(b) = v;
    }
  }
  return r;
}

template <Estimator E>
BatchObjective make_objective(const E& est, const AttackConfig& cfg, const Matrix& X, const Matrix* thetas,
                              RandomStream& stream, int n_samples) {
  switch (cfg.kind) {
    case AttackKind::pgd_kl_forward:
      if (cfg.monte_carlo) return monte_carlo_kl_objective(est, X, stream, n_samples);
      [[fallthrough]];
    case AttackKind::pgd_kl_reverse:
    case AttackKind::nll:
      return closed_form_objective(est, cfg.kind, X, thetas);
    default:
      throw ConfigError("make_objective: unsupported kind");
  }
}

inline AttackResult random_l2(const Vector& x, double eps, RandomStream& stream, const Bounds& bounds = {}) {
  if (!(eps > 0.0)) throw ConfigError("random_l2: eps must be > 0");
  AttackResult r;
  r.delta = uniform_on_sphere(stream, x.size(), eps);
  if (bounds.active()) {
    const Vector xp = (x + r.delta).cwiseMax(bounds.lo).cwiseMin(bounds.hi);
    r.clamped = xp != x + r.delta;
    r.delta = xp - x;
  }
  r.x_perturbed = x + r.delta;
  return r;
}

/// Attack on a single observation. For the nll kind pass theta_true.
template <Estimator E>
AttackResult pgd_attack(const E& est, const Vector& x, const AttackConfig& cfg, const Bounds& bounds = {},
                        const Vector* theta_true = nullptr, std::optional<RandomStream> stream_in = std::nullopt) {
  cfg.validate();
  RandomStream stream = stream_in ? *stream_in : RandomStream(cfg.seed);
  const Matrix X = x;
  AttackResult out;
  if (cfg.kind == AttackKind::random_l2) {
    out = random_l2(x, cfg.eps, stream, bounds);
    out.final_objective = kl_gaussian(est.predict(x), est.predict(out.x_perturbed));
    out.objective_trace = {out.final_objective};
    return out;
  }
  const Matrix th = theta_true ? Matrix(*theta_true) : Matrix();
  BatchObjective obj, final_obj;
  RandomStream mc_stream = stream.derive("mc");
  if (cfg.kind == AttackKind::mmd) {
    RandomStream bw_stream = stream.derive("bandwidth");
    const double bw = mmd_bandwidth(est, x, bw_stream, cfg.mmd_samples);
    obj = mmd_objective_fn(est, X, mc_stream, cfg.mmd_samples, Vector::Constant(1, bw));
    final_obj = mmd_objective_fn(est, X, mc_stream, cfg.mc_final + cfg.mc_final % 2, Vector::Constant(1, bw));
  } else {
    obj = make_objective(est, cfg, X, theta_true ? &th : nullptr, mc_stream, cfg.mc_per_step);
    final_obj = cfg.monte_carlo ? make_objective(est, cfg, X, theta_true ? &th : nullptr, mc_stream, cfg.mc_final)
                                : obj;
  }
  RandomStream init = stream.derive("init");
  const PgdBatchResult r = pgd_batch(obj, X, cfg.eps, cfg.steps, cfg.effective_step_size(), init, bounds);
  out.delta = r.delta.col(0);
  out.x_perturbed = x + out.delta;
  out.objective_trace = r.traces[0];
  out.clamped = r.clamped[0];
  out.restarts = r.restarts[0];
  out.zero_gradient = r.zero_gradient[0];
  const bool stochastic = cfg.monte_carlo || cfg.kind == AttackKind::mmd;
  out.final_objective = stochastic ? final_obj(Matrix(out.x_perturbed), nullptr)(0) : r.best(0);
  return out;
}

/// Attacks the first n_points rows of (xs, thetas); point i uses the
/// substream (cfg.seed, i). Failures are recorded per point.
template <Estimator E>
std::vector<AttackResult> batch_attack(const E& est, const Matrix& xs, const Matrix& thetas, const AttackConfig& cfg,
                                       Eigen::Index n_points, const Bounds& bounds = {}, unsigned workers = 1) {
  if (n_points > xs.rows()) throw ConfigError("batch_attack: n_points exceeds held-out rows");
  std::vector<AttackResult> out(static_cast<std::size_t>(n_points));
  const RandomStream root(cfg.seed);
  parallel_for(
      static_cast<std::size_t>(n_points),
      [&](std::size_t i) {
        const auto row = static_cast<Eigen::Index>(i);
        const Vector x = xs.row(row).transpose();
        const Vector th = thetas.row(row).transpose();
        try {
          out[i] = pgd_attack(est, x, cfg, bounds, &th, root.derive(static_cast<std::uint64_t>(i)));
        } catch (const std::exception& e) {
          out[i] = AttackResult{};
          out[i].delta = Vector::Zero(x.size());
          out[i].x_perturbed = x;
          out[i].final_objective = std::numeric_limits<double>::quiet_NaN();
          out[i].error = e.what();
        }
      },
      workers);
  return out;
}

}  // namespace rnpe

#endif  // RNPE_ATTACKS_HPP
