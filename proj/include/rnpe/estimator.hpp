#ifndef RNPE_ESTIMATOR_HPP
#define RNPE_ESTIMATOR_HPP

#include "rnpe/gaussian.hpp"
#include "rnpe/glm.hpp"
#include "rnpe/mlp.hpp"

#include <concepts>
#include <span>
#include <vector>

namespace rnpe {

/// Anything mapping x to a Gaussian posterior with hand-derived reverse passes.
template <class E>
concept Estimator = requires(const E& e, E& m, const Vector& x, const Matrix& X,
                             std::span<const PosteriorCotangent> cot, Vector& g, Vector* gp) {
  { e.x_dim() } -> std::convertible_to<int>;
  { e.theta_dim() } -> std::convertible_to<int>;
  { e.predict(x) } -> std::same_as<GaussianPosterior>;
  { e.predict_batch(X) } -> std::same_as<std::vector<GaussianPosterior>>;
  { e.pullback_x(X, cot) } -> std::same_as<Matrix>;
  e.pullback_params(X, cot, g);
  { e.fim_exact(x) } -> std::same_as<Matrix>;
  { e.fim_trace_mc(X, X, 1, gp) } -> std::same_as<double>;
  { m.params() } -> std::same_as<Vector&>;
};

static_assert(Estimator<MlpEstimator>);
static_assert(Estimator<GlmEstimator>);

template <Estimator E>
double log_prob(const E& est, const Vector& x, const Vector& theta) {
  return log_prob(est.predict(x), theta);
}

template <Estimator E>
Vector grad_logprob_wrt_x(const E& est, const Vector& x, const Vector& theta) {
  const PosteriorCotangent c = log_prob_cotangent(est.predict(x), theta);
  return est.pullback_x(Matrix(x), std::span(&c, 1)).col(0);
}

/// Mean of -log q(theta_b | x_b) over columns through per-example posteriors;
/// accumulates its parameter gradient into `grad` when non-null.
template <Estimator E>
double nll_reference(const E& est, const Matrix& X, const Matrix& Theta, Vector* grad) {
  const auto posts = est.predict_batch(X);
  const auto B = static_cast<double>(X.cols());
  double nll = 0.0;
  std::vector<PosteriorCotangent> cot;
  if (grad) cot.reserve(posts.size());
  for (std::size_t b = 0; b < posts.size(); ++b) {
    const Vector th = Theta.col(static_cast<Eigen::Index>(b));
    nll -= log_prob(posts[b], th);
    if (grad) {
      cot.push_back(log_prob_cotangent(posts[b], th));
      cot.back() *= -1.0 / B;
    }
  }
  if (grad) est.pullback_params(X, cot, *grad);
  return nll / B;
}

/// Same value as nll_reference, through the estimator's batched path when it has one.
template <Estimator E>
double nll_and_grad(const E& est, const Matrix& X, const Matrix& Theta, Vector* grad) {
  if constexpr (requires { est.nll_batch(X, Theta, grad); }) return est.nll_batch(X, Theta, grad);
  else return nll_reference(est, X, Theta, grad);
}

/// (1/n) sum log p(theta_i) - log q(theta_i), theta_i = mean_p + L_p eps_i.
inline double kl_monte_carlo(const GaussianPosterior& p, const GaussianPosterior& q, RandomStream& stream,
                             Eigen::Index n) {
  const Matrix th = sample_reparam(p, stream, n);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vector t = th.row(i).transpose();
    acc += log_prob(p, t) - log_prob(q, t);
  }
  return acc / static_cast<double>(n);
}

/// MC estimate of KL(q(.|x) || q(.|x_pert)) at fixed samples from q(.|x),
/// with its gradient w.r.t. x_pert written to `grad_x` when non-null.
template <Estimator E>
double kl_monte_carlo(const E& est, const Vector& x, const Vector& x_pert, const Matrix& eps, Vector* grad_x) {
  const GaussianPosterior p = est.predict(x);
  const GaussianPosterior q = est.predict(x_pert);
  const Matrix th = sample_reparam(p, eps);
  const Eigen::Index n = th.rows();
  double acc = 0.0;
  PosteriorCotangent c = PosteriorCotangent::zero(p.dim());
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vector t = th.row(i).transpose();
    acc += log_prob(p, t) - log_prob(q, t);
    if (grad_x) c += log_prob_cotangent(q, t);
  }
  if (grad_x) {
    c *= -1.0 / static_cast<double>(n);
    *grad_x = est.pullback_x(Matrix(x_pert), std::span(&c, 1)).col(0);
  }
  return acc / static_cast<double>(n);
}

/// Convenience form: (1/n) sum ||grad_x log q(theta_i | x)||^2 at one x.
template <Estimator E>
double fim_trace_mc(const E& est, const Vector& x, RandomStream& stream, int n, Vector* grad = nullptr) {
  if (n < 1) throw std::invalid_argument("fim_trace_mc: n must be >= 1");
  return est.fim_trace_mc(Matrix(x), stream.standard_normal(est.theta_dim(), n), n, grad);
}

}  // namespace rnpe

#endif  // RNPE_ESTIMATOR_HPP
