#ifndef RNPE_METRICS_HPP
#define RNPE_METRICS_HPP

#include "rnpe/attacks.hpp"
#include "rnpe/estimator.hpp"
#include "rnpe/training.hpp"

#include <cmath>
#include <cstdio>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

namespace rnpe {

struct KlSummary {
  double median = 0.0;
  double q15 = 0.0;
  double q85 = 0.0;
};

inline KlSummary summarize_kl(const std::vector<double>& kls) {
  if (kls.empty()) throw std::invalid_argument("summarize_kl: empty input");
  return {median(kls), quantile(kls, 0.15), quantile(kls, 0.85)};
}

/// Closed-form KL(q(.|x) || q(.|x_pert)) per point; points whose attack
/// failed contribute NaN.
template <Estimator E>
std::vector<double> pointwise_kl(const E& est, const std::vector<AttackResult>& attacks, const Matrix& xs_clean) {
  std::vector<double> out;
  out.reserve(attacks.size());
  for (std::size_t i = 0; i < attacks.size(); ++i) {
    if (!attacks[i].error.empty()) {
      out.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    const Vector x = xs_clean.row(static_cast<Eigen::Index>(i)).transpose();
    out.push_back(kl_gaussian(est.predict(x), est.predict(attacks[i].x_perturbed)));
  }
  return out;
}

/// Median, 15% and 85% quantiles of the per-point KL, failed points skipped.
template <Estimator E>
KlSummary kl_robustness(const E& est, const std::vector<AttackResult>& attacks, const Matrix& xs_clean) {
  std::vector<double> kls;
  for (double v : pointwise_kl(est, attacks, xs_clean))
    if (std::isfinite(v)) kls.push_back(v);
  return summarize_kl(kls);
}

struct CoverageCurve {
  std::vector<double> nominal;
  std::vector<double> empirical;
  Eigen::Index n_points = 0;
  Eigen::Index n_posterior_samples = 0;

  /// Binomial standard error of the empirical coverage at index i.
  double standard_error(std::size_t i) const {
    const double p = empirical[i];
    return std::sqrt(std::max(p * (1.0 - p), 0.0) / static_cast<double>(n_points));
  }
};

inline std::vector<double> nominal_grid(int levels = 21) {
  if (levels < 2) throw std::invalid_argument("nominal_grid: need >= 2 levels");
  std::vector<double> g(static_cast<std::size_t>(levels));
  for (int i = 0; i < levels; ++i) g[static_cast<std::size_t>(i)] = static_cast<double>(i) / (levels - 1);
  return g;
}

/// Probability that a calibrated rank statistic with n samples is covered at
/// nominal level c: P(K <= floor(c n)) for K uniform on {0..n}.
inline double calibrated_coverage(double c, Eigen::Index n) {
  const double k = std::floor(c * static_cast<double>(n) + 1e-12);
  return (k + 1.0) / (static_cast<double>(n) + 1.0);
}

using PosteriorFn = std::function<GaussianPosterior(const Vector& x)>;

/// theta is in HPR_c of q(.|x) iff the fraction of posterior samples theta'
/// with log q(theta'|x) > log q(theta|x) is <= c. Rows of thetas/xs are
/// test pairs; point i draws its samples from stream.derive(i).
inline CoverageCurve expected_coverage(const PosteriorFn& posterior_at, const Matrix& thetas, const Matrix& xs,
                                       Eigen::Index n_samples, const std::vector<double>& grid,
                                       const RandomStream& stream) {
  if (n_samples < 100) throw std::invalid_argument("expected_coverage: n_samples must be >= 100");
  if (thetas.rows() != xs.rows() || thetas.rows() == 0) throw std::invalid_argument("expected_coverage: bad test set");
  CoverageCurve curve;
  curve.nominal = grid;
  curve.empirical.assign(grid.size(), 0.0);
  curve.n_points = thetas.rows();
  curve.n_posterior_samples = n_samples;
  for (Eigen::Index i = 0; i < thetas.rows(); ++i) {
    const GaussianPosterior q = posterior_at(xs.row(i).transpose());
    const Vector th = thetas.row(i).transpose();
    const double lq = log_prob(q, th);
    RandomStream s = stream.derive(static_cast<std::uint64_t>(i));
    const Matrix samples = sample_reparam(q, s, n_samples);
    Eigen::Index above = 0;
    for (Eigen::Index k = 0; k < n_samples; ++k)
      if (log_prob(q, Vector(samples.row(k).transpose())) > lq) ++above;
    const double frac = static_cast<double>(above) / static_cast<double>(n_samples);
    for (std::size_t j = 0; j < grid.size(); ++j)
      if (frac <= grid[j] + 1e-12) curve.empirical[j] += 1.0;
  }
  for (double& v : curve.empirical) v /= static_cast<double>(curve.n_points);
  return curve;
}

template <Estimator E>
CoverageCurve expected_coverage(const E& est, const Matrix& thetas, const Matrix& xs, Eigen::Index n_samples,
                                const std::vector<double>& grid, const RandomStream& stream) {
  return expected_coverage([&est](const Vector& x) { return est.predict(x); }, thetas, xs, n_samples, grid, stream);
}

/// Empirical coverage at the grid level closest to c.
inline double coverage_at(const CoverageCurve& curve, double c) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < curve.nominal.size(); ++j)
    if (std::abs(curve.nominal[j] - c) < std::abs(curve.nominal[best] - c)) best = j;
  return curve.empirical[best];
}

/// Mean log q(theta | x) over rows (higher is better).
template <Estimator E>
double nll_accuracy(const E& est, const Matrix& thetas, const Matrix& xs) {
  if (thetas.rows() == 0 || thetas.rows() != xs.rows()) throw std::invalid_argument("nll_accuracy: bad test set");
  return -nll_and_grad(est, Matrix(xs.transpose()), Matrix(thetas.transpose()), nullptr);
}

inline double nll_accuracy(const PosteriorFn& posterior_at, const Matrix& thetas, const Matrix& xs) {
  if (thetas.rows() == 0 || thetas.rows() != xs.rows()) throw std::invalid_argument("nll_accuracy: bad test set");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < thetas.rows(); ++i)
    acc += log_prob(posterior_at(xs.row(i).transpose()), Vector(thetas.row(i).transpose()));
  return acc / static_cast<double>(thetas.rows());
}

struct TradeoffRow {
  double beta = 0.0;
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  double robustness = std::numeric_limits<double>::quiet_NaN();
  bool diverged = false;
  std::string note;
};

/// For each beta: FIM-regularized training from `init`, clean accuracy on the
/// test set and median post-attack KL at attack.eps over the first n_points.
template <Estimator E>
std::vector<TradeoffRow> tradeoff_sweep(const E& init, const Dataset& train, const Dataset& test,
                                        const std::vector<double>& betas, const TrainConfig& cfg, FimRegConfig reg,
                                        const AttackConfig& attack, Eigen::Index n_points, unsigned workers = 1) {
  if (betas.empty()) throw ConfigError("tradeoff_sweep: beta grid is empty");
  std::vector<TradeoffRow> rows;
  for (double beta : betas) {
    TradeoffRow row;
    row.beta = beta;
    reg.beta = beta;
    try {
      const auto res = train_fim_regularized(init, train, cfg, reg);
      row.accuracy = nll_accuracy(res.estimator, test.thetas, test.xs);
      const auto attacks = batch_attack(res.estimator, test.xs, test.thetas, attack, n_points, {}, workers);
      row.robustness = kl_robustness(res.estimator, attacks, test.xs).median;
    } catch (const DivergedTraining& e) {
      row.diverged = true;
      row.note = e.what();
    }
    rows.push_back(row);
  }
  return rows;
}

namespace detail {
inline std::string csv_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace detail

inline void write_coverage_csv(std::ostream& os, const CoverageCurve& c) {
  os << "nominal,empirical,std_error,n_points,n_samples\n";
  for (std::size_t j = 0; j < c.nominal.size(); ++j)
    os << detail::csv_number(c.nominal[j]) << ',' << detail::csv_number(c.empirical[j]) << ','
       << detail::csv_number(c.standard_error(j)) << ',' << c.n_points << ',' << c.n_posterior_samples << '\n';
}

inline void write_tradeoff_csv(std::ostream& os, const std::vector<TradeoffRow>& rows) {
  os << "beta,accuracy,robustness,diverged\n";
  for (const auto& r : rows)
    os << detail::csv_number(r.beta) << ',' << detail::csv_number(r.accuracy) << ','
       << detail::csv_number(r.robustness) << ',' << (r.diverged ? 1 : 0) << '\n';
}

}  // namespace rnpe

#endif  // RNPE_METRICS_HPP
