#ifndef RNPE_GAUSSIAN_HPP
#define RNPE_GAUSSIAN_HPP

#include "rnpe/numerics.hpp"

#include <cmath>
#include <numbers>

namespace rnpe {

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;  // ln(2 pi)
inline constexpr double kMinVariance = 1e-12;

enum class CovKind { diagonal, full };

/// q(theta | x) for one x: mean plus diagonal variances or a full SPD covariance.
struct GaussianPosterior {
  Vector mean;
  CovKind kind = CovKind::diagonal;
  Vector var;  // diagonal variances
  Matrix cov;  // full covariance

  static GaussianPosterior diagonal(Vector mean, Vector var) {
    GaussianPosterior p;
    p.mean = std::move(mean);
    p.kind = CovKind::diagonal;
    p.var = var.cwiseMax(kMinVariance);
    return p;
  }

  static GaussianPosterior full(Vector mean, Matrix cov) {
    GaussianPosterior p;
    p.mean = std::move(mean);
    p.kind = CovKind::full;
    p.cov = std::move(cov);
    return p;
  }

  Eigen::Index dim() const { return mean.size(); }

  Matrix covariance() const { return kind == CovKind::diagonal ? Matrix(var.asDiagonal()) : cov; }

  /// Lower Cholesky factor (diag(sqrt(var)) for the diagonal case).
  Matrix cholesky() const {
    if (kind == CovKind::diagonal) return Matrix(var.cwiseSqrt().asDiagonal());
    return cholesky_lower(cov);
  }

  Matrix precision() const {
    if (kind == CovKind::diagonal) return Matrix(var.cwiseInverse().asDiagonal());
    return inverse_spd(cov);
  }

  double log_det() const {
    if (kind == CovKind::diagonal) return var.array().log().sum();
    const Matrix l = cholesky();
    return 2.0 * l.diagonal().array().log().sum();
  }
};

/// Gradient of a scalar with respect to a posterior's parameters.
///
/// `cov` is the (symmetric) gradient w.r.t. the covariance; `chol`, when
/// non-empty, is an additional gradient w.r.t. the lower Cholesky factor
/// (what pathwise sample derivatives produce). For diagonal posteriors only
/// the diagonals are read.
struct PosteriorCotangent {
  Vector mean;
  Matrix cov;
  Matrix chol;

  static PosteriorCotangent zero(Eigen::Index d) { return {Vector::Zero(d), Matrix::Zero(d, d), Matrix()}; }

  PosteriorCotangent& operator*=(double s) {
    mean *= s;
    cov *= s;
    if (chol.size()) chol *= s;
    return *this;
  }
  PosteriorCotangent& operator+=(const PosteriorCotangent& o) {
    mean += o.mean;
    cov += o.cov;
    if (o.chol.size()) {
      if (chol.size()) chol += o.chol;
      else chol = o.chol;
    }
    return *this;
  }
};

inline double log_prob(const GaussianPosterior& p, const Vector& theta) {
  if (theta.size() != p.dim()) throw std::invalid_argument("log_prob: dimension mismatch");
  const double d = static_cast<double>(p.dim());
  const Vector diff = theta - p.mean;
  if (p.kind == CovKind::diagonal) {
    return -0.5 * (diff.array().square() / p.var.array()).sum() - 0.5 * p.var.array().log().sum() - 0.5 * d * kLog2Pi;
  }
  const Matrix l = p.cholesky();
  const Vector z = l.triangularView<Eigen::Lower>().solve(diff);
  return -0.5 * z.squaredNorm() - l.diagonal().array().log().sum() - 0.5 * d * kLog2Pi;
}

/// d log N(theta; mean, cov) / d(mean, cov).
inline PosteriorCotangent log_prob_cotangent(const GaussianPosterior& p, const Vector& theta) {
  const Eigen::Index d = p.dim();
  PosteriorCotangent c;
  const Vector diff = theta - p.mean;
  if (p.kind == CovKind::diagonal) {
    const Vector a = diff.cwiseQuotient(p.var);
    c.mean = a;
    c.cov = Matrix::Zero(d, d);
    c.cov.diagonal() = 0.5 * (a.array().square() - p.var.array().inverse()).matrix();
    return c;
  }
  const Matrix prec = p.precision();
  const Vector a = prec * diff;
  c.mean = a;
  c.cov = 0.5 * (a * a.transpose() - prec);
  return c;
}

/// theta_i = mean + L eps_i with eps_i ~ N(0, I); rows are samples.
inline Matrix sample_reparam(const GaussianPosterior& p, const Matrix& eps) {
  const Matrix l = p.cholesky();
  Matrix out = (l * eps.transpose()).transpose();
  out.rowwise() += p.mean.transpose();
  return out;
}

inline Matrix sample_reparam(const GaussianPosterior& p, RandomStream& stream, Eigen::Index n) {
  if (n < 1) throw std::invalid_argument("sample_reparam: n must be >= 1");
  return sample_reparam(p, stream.standard_normal(n, p.dim()));
}

/// Closed-form KL(p || q).
inline double kl_gaussian(const GaussianPosterior& p, const GaussianPosterior& q) {
  if (p.dim() != q.dim()) throw std::invalid_argument("kl_gaussian: dimension mismatch");
  const double d = static_cast<double>(p.dim());
  const Vector diff = q.mean - p.mean;
  if (p.kind == CovKind::diagonal && q.kind == CovKind::diagonal) {
    const auto r = (p.var.array() / q.var.array());
    const double kl = 0.5 * (r.sum() + (diff.array().square() / q.var.array()).sum() - d - r.log().sum());
    return std::max(kl, 0.0);
  }
  const Matrix lq = q.cholesky();
  const Matrix sp = p.covariance();
  const Matrix tmp = lq.triangularView<Eigen::Lower>().solve(sp);
  const Matrix m = lq.triangularView<Eigen::Lower>().solve(tmp.transpose());  // Lq^-1 Sp Lq^-T
  const Vector z = lq.triangularView<Eigen::Lower>().solve(diff);
  const double kl = 0.5 * (m.trace() + z.squaredNorm() - d + q.log_det() - p.log_det());
  return std::max(kl, 0.0);
}

struct KlCotangents {
  PosteriorCotangent wrt_p;
  PosteriorCotangent wrt_q;
};

/// Gradients of KL(p || q) with respect to both arguments.
inline KlCotangents kl_cotangents(const GaussianPosterior& p, const GaussianPosterior& q) {
  const Eigen::Index d = p.dim();
  KlCotangents out;
  const Vector diff = q.mean - p.mean;
  if (p.kind == CovKind::diagonal && q.kind == CovKind::diagonal) {
    const Vector a = diff.cwiseQuotient(q.var);
    out.wrt_p.mean = -a;
    out.wrt_q.mean = a;
    out.wrt_p.cov = Matrix::Zero(d, d);
    out.wrt_q.cov = Matrix::Zero(d, d);
    out.wrt_p.cov.diagonal() = 0.5 * (q.var.cwiseInverse() - p.var.cwiseInverse());
    out.wrt_q.cov.diagonal() =
        0.5 * (q.var.array().inverse() - (p.var.array() + diff.array().square()) / q.var.array().square()).matrix();
    return out;
  }
  const Matrix qprec = q.precision();
  const Matrix pprec = p.precision();
  const Vector a = qprec * diff;
  out.wrt_p.mean = -a;
  out.wrt_q.mean = a;
  out.wrt_p.cov = 0.5 * (qprec - pprec);
  out.wrt_q.cov = 0.5 * (qprec - qprec * (p.covariance() + diff * diff.transpose()) * qprec);
  out.wrt_q.cov = symmetrize(out.wrt_q.cov);
  return out;
}

/// Pathwise cotangent: given dF/dtheta_i for samples theta_i = mean + L eps_i,
/// returns dF/d(mean) and dF/dL (lower triangle).
inline PosteriorCotangent sample_cotangent(const GaussianPosterior& p, const Matrix& eps, const Matrix& theta_bar) {
  const Eigen::Index d = p.dim();
  PosteriorCotangent c;
  c.mean = theta_bar.colwise().sum().transpose();
  c.cov = Matrix::Zero(d, d);
  c.chol = (theta_bar.transpose() * eps).triangularView<Eigen::Lower>();
  return c;
}

}  // namespace rnpe

#endif  // RNPE_GAUSSIAN_HPP
