#ifndef RNPE_ORACLES_HPP
#define RNPE_ORACLES_HPP

#include "rnpe/gaussian.hpp"
#include "rnpe/glm.hpp"
#include "rnpe/numerics.hpp"
#include "rnpe/tasks.hpp"

namespace rnpe {

/// p(theta) = N(mu0, Sigma0), p(x | theta) = N(A theta + b, Lambda).
struct LinearGaussianModel {
  Matrix A;
  Vector b;
  Matrix Lambda;
  Vector mu0;
  Matrix Sigma0;

  int theta_dim() const { return static_cast<int>(A.cols()); }
  int x_dim() const { return static_cast<int>(A.rows()); }

  void validate() const {
    if (b.size() != A.rows() || Lambda.rows() != A.rows() || Lambda.cols() != A.rows() || mu0.size() != A.cols() ||
        Sigma0.rows() != A.cols() || Sigma0.cols() != A.cols())
      throw std::invalid_argument("LinearGaussianModel: inconsistent dimensions");
  }

  /// A = diag(diag), b = 0, Lambda = noise_sigma^2 I, standard normal prior.
  static LinearGaussianModel diagonal_task(const Vector& diag, double noise_sigma) {
    const Eigen::Index d = diag.size();
    return {Matrix(diag.asDiagonal()), Vector::Zero(d), noise_sigma * noise_sigma * Matrix::Identity(d, d),
            Vector::Zero(d), Matrix::Identity(d, d)};
  }

  static LinearGaussianModel from_task(const TaskSpec& t) {
    if (t.name != TaskName::gaussian_linear) throw ConfigError("linear-Gaussian oracle needs the gaussian_linear task");
    return diagonal_task(t.linear_diag, t.noise_sigma);
  }

  /// Random well-conditioned model for property tests.
  static LinearGaussianModel random(RandomStream& s, int theta_dim, int x_dim) {
    LinearGaussianModel m;
    m.A = s.standard_normal(x_dim, theta_dim);
    m.b = s.standard_normal(x_dim);
    const Matrix bl = s.standard_normal(x_dim, x_dim);
    m.Lambda = bl * bl.transpose() / x_dim + 0.1 * Matrix::Identity(x_dim, x_dim);
    m.mu0 = s.standard_normal(theta_dim);
    const Matrix bs = s.standard_normal(theta_dim, theta_dim);
    m.Sigma0 = bs * bs.transpose() / theta_dim + 0.1 * Matrix::Identity(theta_dim, theta_dim);
    return m;
  }
};

/// Information form.
inline GaussianPosterior posterior(const LinearGaussianModel& m, const Vector& x) {
  m.validate();
  const Matrix lam_inv_a = solve_spd(m.Lambda, m.A);
  const Matrix prec = symmetrize(inverse_spd(m.Sigma0) + m.A.transpose() * lam_inv_a);
  const Matrix sp = inverse_spd(prec);
  const Vector rhs = lam_inv_a.transpose() * (x - m.b) + solve_spd(m.Sigma0, m.mu0);
  return GaussianPosterior::full(solve_spd(prec, rhs), symmetrize(sp));
}

/// Gain (Woodbury) form.
inline GaussianPosterior posterior_woodbury(const LinearGaussianModel& m, const Vector& x) {
  m.validate();
  const Matrix s = symmetrize(m.A * m.Sigma0 * m.A.transpose() + m.Lambda);
  const Matrix gain = solve_spd(s, m.A * m.Sigma0).transpose();  // Sigma0 A^T S^-1
  const Vector mean = m.mu0 + gain * (x - (m.A * m.mu0 + m.b));
  return GaussianPosterior::full(mean, symmetrize(m.Sigma0 - gain * m.A * m.Sigma0));
}

/// Lambda^-1 A Sigma_p A^T Lambda^-1 (independent of x).
inline Matrix fim(const LinearGaussianModel& m) {
  const Matrix sp = posterior(m, Vector::Zero(m.x_dim())).cov;
  const Matrix lam_inv_a = solve_spd(m.Lambda, m.A);
  return symmetrize(lam_inv_a * sp * lam_inv_a.transpose());
}

/// Exact KL between the posteriors at x and x + delta.
inline double kl_under_perturbation(const LinearGaussianModel& m, const Vector& delta) {
  return 0.5 * delta.dot(fim(m) * delta);
}

struct OptimalAttack {
  Vector delta;
  double kl_bound = 0.0;
  bool degenerate = false;
};

inline OptimalAttack optimal_attack(const LinearGaussianModel& m, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("optimal_attack: eps must be > 0");
  const Eigenpair top = top_eigenpair(fim(m));
  return {eps * top.vector, 0.5 * top.value * eps * eps, top.degenerate};
}

/// GLM with identity features whose predictions equal the exact posterior:
/// W = Sigma_p A^T Lambda^-1, offset = Sigma_p (Sigma0^-1 mu0 - A^T Lambda^-1 b).
inline GlmEstimator analytic_estimator(const LinearGaussianModel& m) {
  m.validate();
  const GaussianPosterior p0 = posterior(m, Vector::Zero(m.x_dim()));
  const Matrix w = p0.cov * solve_spd(m.Lambda, m.A).transpose();
  GlmEstimator est(FeatureMap::identity(m.x_dim()), m.theta_dim());
  est.set_weights(w);
  est.set_covariance(p0.cov);
  est.offset = p0.mean;
  return est;
}

}  // namespace rnpe

#endif  // RNPE_ORACLES_HPP
