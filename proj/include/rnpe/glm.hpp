#ifndef RNPE_GLM_HPP
#define RNPE_GLM_HPP

#include "rnpe/feature_map.hpp"
#include "rnpe/gaussian.hpp"
#include "rnpe/numerics.hpp"
#include "rnpe/tasks.hpp"

#include <span>
#include <vector>

namespace rnpe {

struct SingularGram : NumericError {
  using NumericError::NumericError;
};

inline constexpr double kGlmEigenFloor = 1e-10;

/// q(theta | x) = N(theta; W phi(x) + offset, Sigma) with Sigma = L L^T.
///
/// Learnable parameters, flattened: W (column-major) followed by the lower
/// triangle of L column by column, diagonal entries stored as log L_jj.
/// `offset` is fixed (zero unless set explicitly).
class GlmEstimator {
 public:
  GlmEstimator() = default;

  GlmEstimator(FeatureMap fm, int theta_dim) : fm_(std::move(fm)), d_(theta_dim) {
    params_ = Vector::Zero(num_params());
    offset = Vector::Zero(d_);
  }

  Vector offset;

  const FeatureMap& feature_map() const { return fm_; }
  int x_dim() const { return fm_.x_dim; }
  int theta_dim() const { return d_; }
  int feature_dim() const { return fm_.feature_dim; }
  Eigen::Index num_weights() const { return static_cast<Eigen::Index>(d_) * fm_.feature_dim; }
  Eigen::Index num_params() const { return num_weights() + static_cast<Eigen::Index>(d_) * (d_ + 1) / 2; }

  Vector& params() { return params_; }
  const Vector& params() const { return params_; }

  Eigen::Map<const Matrix> weights() const { return {params_.data(), d_, fm_.feature_dim}; }
  void set_weights(const Matrix& w) { Eigen::Map<Matrix>(params_.data(), d_, fm_.feature_dim) = w; }

  Matrix chol() const {
    Matrix l = Matrix::Zero(d_, d_);
    Eigen::Index k = num_weights();
    for (int j = 0; j < d_; ++j)
      for (int i = j; i < d_; ++i, ++k) l(i, j) = i == j ? std::exp(params_(k)) : params_(k);
    return l;
  }

  Matrix covariance() const {
    const Matrix l = chol();
    return l * l.transpose();
  }

  /// Stores Sigma after flooring its eigenvalues at 1e-10.
  void set_covariance(const Matrix& sigma) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(sigma));
    const Vector ev = es.eigenvalues().cwiseMax(kGlmEigenFloor);
    const Matrix floored = symmetrize(es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose());
    const Matrix l = cholesky_lower(floored);
    Eigen::Index k = num_weights();
    for (int j = 0; j < d_; ++j)
      for (int i = j; i < d_; ++i, ++k) params_(k) = i == j ? std::log(l(i, j)) : l(i, j);
  }

  std::vector<GaussianPosterior> predict_batch(const Matrix& X) const {
    Matrix means = weights() * fm_.features(X);
    means.colwise() += offset;
    if (!means.allFinite()) throw NumericError("glm: non-finite mean");
    const Matrix cov = covariance();
    std::vector<GaussianPosterior> out;
    out.reserve(static_cast<std::size_t>(X.cols()));
    for (Eigen::Index b = 0; b < X.cols(); ++b) out.push_back(GaussianPosterior::full(means.col(b), cov));
    return out;
  }

  GaussianPosterior predict(const Vector& x) const {
    if (x.size() != x_dim()) throw std::invalid_argument("glm predict: wrong input dimension");
    return predict_batch(Matrix(x)).front();
  }

  Matrix pullback_x(const Matrix& X, std::span<const PosteriorCotangent> cot) const {
    Matrix mu_bar(d_, X.cols());
    for (Eigen::Index b = 0; b < X.cols(); ++b) mu_bar.col(b) = cot[static_cast<std::size_t>(b)].mean;
    return fm_.vjp(X, weights().transpose() * mu_bar);
  }

  void pullback_params(const Matrix& X, std::span<const PosteriorCotangent> cot, Vector& grad) const {
    const Matrix phi = fm_.features(X);
    const Matrix l = chol();
    Matrix mu_bar(d_, X.cols());
    Matrix sigma_bar = Matrix::Zero(d_, d_);
    Matrix l_bar = Matrix::Zero(d_, d_);
    for (Eigen::Index b = 0; b < X.cols(); ++b) {
      const auto& c = cot[static_cast<std::size_t>(b)];
      mu_bar.col(b) = c.mean;
      sigma_bar += c.cov;
      if (c.chol.size()) l_bar += c.chol;
    }
    Eigen::Map<Matrix>(grad.data(), d_, fm_.feature_dim).noalias() += mu_bar * phi.transpose();
    l_bar += (sigma_bar + sigma_bar.transpose()) * l;
    accumulate_chol(grad, l, l_bar);
  }

  /// Mean -log q(theta_b | x_b) over columns, with its parameter gradient.
  double nll_batch(const Matrix& X, const Matrix& T, Vector* grad) const {
    const Matrix phi = fm_.features(X);
    const Matrix l = chol();
    Matrix r = T - weights() * phi;
    r.colwise() -= offset;
    const Matrix z = l.triangularView<Eigen::Lower>().solve(r);
    const auto B = static_cast<double>(X.cols());
    const double nll = 0.5 * z.squaredNorm() / B + l.diagonal().array().log().sum() + 0.5 * d_ * kLog2Pi;
    if (grad) {
      const Matrix a = l.transpose().triangularView<Eigen::Upper>().solve(z);  // Sigma^-1 r
      Eigen::Map<Matrix>(grad->data(), d_, fm_.feature_dim).noalias() -= a * phi.transpose() / B;
      // d nll / d L = Sigma^-1 L - Sigma^-1 r r^T Sigma^-1 L / B
      const Matrix l_inv_t = l.transpose().triangularView<Eigen::Upper>().solve(Matrix::Identity(d_, d_));
      accumulate_chol(*grad, l, l_inv_t - a * (z.transpose() / B));
    }
    return nll;
  }

  /// J_phi^T W^T Sigma^-1 W J_phi.
  Matrix fim_exact(const Vector& x) const {
    const Matrix wj = weights() * fm_.jacobian(x);
    return symmetrize(wj.transpose() * solve_spd(covariance(), wj));
  }

  /// Same contract as MlpEstimator::fim_trace_mc. For theta = mu + L eps the
  /// score w.r.t. x is J^T W^T L^-T eps.
  double fim_trace_mc(const Matrix& X, const Matrix& noise, int n_mc, Vector* grad) const {
    const Eigen::Index B = X.cols();
    const Eigen::Index n = B * n_mc;
    if (noise.cols() != n || noise.rows() != d_) throw std::invalid_argument("fim_trace_mc: noise shape");
    const Matrix l = chol();
    const bool identity = fm_.kind == FeatureKind::identity;
    Matrix S;
    if (!identity) {
      const Matrix s0 = fm_.sines(X);
      S.resize(s0.rows(), n);
      for (Eigen::Index b = 0; b < B; ++b) S.middleCols(b * n_mc, n_mc) = s0.col(b).replicate(1, n_mc);
    }
    const Matrix U = l.transpose().triangularView<Eigen::Upper>().solve(noise);
    const Matrix V = weights().transpose() * U;
    const Matrix G = identity ? V : fm_.vjp_sines(S, V);
    const double r = G.colwise().squaredNorm().sum() / static_cast<double>(n);
    if (grad) {
      const double k = 2.0 / static_cast<double>(n);
      const Matrix JG = identity ? G : fm_.jvp_sines(S, G);
      Eigen::Map<Matrix>(grad->data(), d_, fm_.feature_dim).noalias() += k * U * JG.transpose();
      const Matrix Q = l.triangularView<Eigen::Lower>().solve(weights() * JG);
      accumulate_chol(*grad, l, -k * U * Q.transpose());
    }
    return r;
  }

 private:
  void accumulate_chol(Vector& grad, const Matrix& l, const Matrix& l_bar) const {
    Eigen::Index k = num_weights();
    for (int j = 0; j < d_; ++j)
      for (int i = j; i < d_; ++i, ++k) grad(k) += i == j ? l_bar(i, j) * l(i, j) : l_bar(i, j);
  }

  FeatureMap fm_;
  int d_ = 0;
  Vector params_;
};

namespace detail {

inline Matrix glm_gram(const Matrix& phi) { return phi * phi.transpose(); }

inline Matrix glm_solve_weights(const Matrix& gram, const Matrix& phi, const Matrix& thetas_t) {
  Eigen::LLT<Matrix> llt(gram);
  if (llt.info() != Eigen::Success) throw SingularGram("glm: feature Gram matrix is singular");
  return llt.solve(phi * thetas_t.transpose()).transpose();
}

inline Matrix glm_residual_cov(const Matrix& w, const Matrix& phi, const Matrix& thetas_t) {
  const Matrix r = w * phi - thetas_t;
  return r * r.transpose() / static_cast<double>(phi.cols());
}

}  // namespace detail

/// Global NPE minimiser of the GLM class: least-squares W and the residual
/// covariance (eigenvalues floored at 1e-10).
inline GlmEstimator glm_fit_closed_form(const Matrix& xs, const Matrix& thetas, const FeatureMap& fm) {
  if (xs.rows() <= fm.feature_dim) throw SingularGram("glm: need more rows than features");
  const Matrix phi = fm.features(Matrix(xs.transpose()));
  const Matrix tt = thetas.transpose();
  GlmEstimator est(fm, static_cast<int>(thetas.cols()));
  const Matrix w = detail::glm_solve_weights(detail::glm_gram(phi), phi, tt);
  est.set_weights(w);
  est.set_covariance(detail::glm_residual_cov(w, phi, tt));
  return est;
}

inline GlmEstimator glm_fit_closed_form(const Dataset& ds, const FeatureMap& fm) {
  return glm_fit_closed_form(ds.xs, ds.thetas, fm);
}

/// Minimiser of sum_i -log q(theta_i|x_i) + beta * mean_i tr I_{x_i}:
///   W = Theta phi^T (phi phi^T + 2 beta Omega)^-1, Omega = mean_i J_i J_i^T
///   Sigma = residual covariance + (2 beta / N) W Omega W^T.
/// In terms of the per-sample averaged objective used by training, beta
/// here equals N times the training beta.
inline GlmEstimator glm_fit_fim_closed_form(const Matrix& xs, const Matrix& thetas, const FeatureMap& fm,
                                            double beta) {
  if (!(beta >= 0.0)) throw ConfigError("glm_fit_fim_closed_form: beta must be >= 0");
  if (beta == 0.0) return glm_fit_closed_form(xs, thetas, fm);
  if (xs.rows() <= fm.feature_dim) throw SingularGram("glm: need more rows than features");
  const Matrix X = xs.transpose();
  const Matrix phi = fm.features(X);
  const Matrix tt = thetas.transpose();
  const Matrix omega = fm.mean_jacobian_gram(X);
  const Matrix w = detail::glm_solve_weights(detail::glm_gram(phi) + 2.0 * beta * omega, phi, tt);
  const auto n = static_cast<double>(xs.rows());
  const Matrix sigma = detail::glm_residual_cov(w, phi, tt) + (2.0 * beta / n) * (w * omega * w.transpose());
  GlmEstimator est(fm, static_cast<int>(thetas.cols()));
  est.set_weights(w);
  est.set_covariance(sigma);
  return est;
}

inline GlmEstimator glm_fit_fim_closed_form(const Dataset& ds, const FeatureMap& fm, double beta) {
  return glm_fit_fim_closed_form(ds.xs, ds.thetas, fm, beta);
}

}  // namespace rnpe

#endif  // RNPE_GLM_HPP
