#ifndef RNPE_MLP_HPP
#define RNPE_MLP_HPP

#include "rnpe/gaussian.hpp"
#include "rnpe/numerics.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace rnpe {

struct NonFiniteOutput : NumericError {
  using NumericError::NumericError;
};

/// Diagonal-Gaussian conditional density estimator: a tanh MLP whose output
/// splits into a mean head and a raw scale head, sigma = softplus(raw) + 1e-6.
///
/// Inputs and outputs pass through a fixed affine standardization
/// (input_shift/input_scale, output_shift/output_scale) that is part of the
/// architecture, not of the learnable parameters. With the identity
/// standardization the network output is used as is.
class MlpEstimator {
 public:
  static constexpr double kSigmaFloor = 1e-6;

  struct Cache {
    std::vector<Matrix> h;  // h[0] standardized input, h[l] hidden activations
    Matrix out;             // raw network output, 2d x B
    Matrix mu, sigma, sig;  // heads; sig = sigmoid(raw scale)
  };

  struct Tangent {
    std::vector<Matrix> hdot;  // tangent of h[l]
    std::vector<Matrix> zdot;  // tangent of hidden pre-activations (index aligned with h)
    Matrix odot;
    Matrix mudot, sigmadot;
  };

  MlpEstimator() = default;

  /// layer_sizes = {x_dim, hidden..., 2 * theta_dim}; weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  MlpEstimator(std::vector<int> layer_sizes, std::uint64_t seed) : sizes_(std::move(layer_sizes)) {
    if (sizes_.size() < 2 || sizes_.back() % 2 != 0) throw ConfigError("mlp: invalid layer sizes");
    layout();
    params_ = Vector::Zero(num_params_);
    RandomStream s = RandomStream(seed).derive("mlp.init");
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(sizes_[l]));
      for (Eigen::Index i = 0; i < weight_size(l) + sizes_[l + 1]; ++i)
        params_(w_off_[l] + i) = bound * (2.0 * s.uniform() - 1.0);
    }
    reset_standardization();
  }

  static MlpEstimator zeros(std::vector<int> layer_sizes) {
    MlpEstimator m(std::move(layer_sizes), 0);
    m.params_.setZero();
    return m;
  }

  const std::vector<int>& layer_sizes() const { return sizes_; }
  int x_dim() const { return sizes_.front(); }
  int theta_dim() const { return sizes_.back() / 2; }
  Eigen::Index num_params() const { return num_params_; }
  std::size_t num_layers() const { return sizes_.size() - 1; }

  Vector& params() { return params_; }
  const Vector& params() const { return params_; }

  Vector input_shift, input_scale, output_shift, output_scale;

  void reset_standardization() {
    input_shift = Vector::Zero(x_dim());
    input_scale = Vector::Ones(x_dim());
    output_shift = Vector::Zero(theta_dim());
    output_scale = Vector::Ones(theta_dim());
  }

  /// z-scores inputs and outputs with the statistics of (xs, thetas), rows = samples.
  void standardize_for(const Matrix& xs, const Matrix& thetas) {
    auto moments = [](const Matrix& m, Vector& mean, Vector& sd) {
      mean = m.colwise().mean().transpose();
      sd.resize(m.cols());
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        const double v = (m.col(j).array() - mean(j)).square().mean();
        sd(j) = std::sqrt(v) > 1e-12 ? std::sqrt(v) : 1.0;
      }
    };
    moments(xs, input_shift, input_scale);
    moments(thetas, output_shift, output_scale);
  }

  Eigen::Map<const Matrix> weight(std::size_t l) const {
    return {params_.data() + w_off_[l], sizes_[l + 1], sizes_[l]};
  }
  Eigen::Map<const Vector> bias(std::size_t l) const {
    return {params_.data() + w_off_[l] + weight_size(l), sizes_[l + 1]};
  }

  // -------------------------------------------------------------------------
  // Batched passes (columns are examples)
  // -------------------------------------------------------------------------

  Cache forward(const Matrix& X) const {
    const std::size_t L = num_layers();
    const int d = theta_dim();
    Cache c;
    c.h.resize(L);
    c.h[0] = (X.colwise() - input_shift).array().colwise() / input_scale.array();
    for (std::size_t l = 0; l + 1 < L; ++l) {
      Matrix z = weight(l) * c.h[l];
      z.colwise() += bias(l);
      c.h[l + 1] = z.array().tanh().matrix();
    }
    c.out = weight(L - 1) * c.h[L - 1];
    c.out.colwise() += bias(L - 1);
    const Eigen::Index B = X.cols();
    c.mu = (c.out.topRows(d).array().colwise() * output_scale.array()).matrix();
    c.mu.colwise() += output_shift;
    c.sigma.resize(d, B);
    c.sig.resize(d, B);
    for (Eigen::Index b = 0; b < B; ++b)
      for (int j = 0; j < d; ++j) {
        const double raw = c.out(d + j, b);
        c.sigma(j, b) = output_scale(j) * softplus(raw) + kSigmaFloor;
        c.sig(j, b) = sigmoid(raw);
      }
    if (!c.mu.allFinite() || !c.sigma.allFinite()) throw NonFiniteOutput("mlp: non-finite head output");
    return c;
  }

  /// Reverse pass from head cotangents (mu_bar, sigma_bar). Accumulates
  /// parameter gradients into `grad` when non-null; returns d/dx when
  /// `want_input`, otherwise an empty matrix.
  Matrix backward(const Cache& c, const Matrix& mu_bar, const Matrix& sigma_bar, Vector* grad, bool want_input) const {
    const std::size_t L = num_layers();
    const int d = theta_dim();
    const Eigen::Index B = mu_bar.cols();
    Matrix a(2 * d, B);
    a.topRows(d) = output_scale.asDiagonal() * mu_bar;
    a.bottomRows(d) = (output_scale.asDiagonal() * sigma_bar).cwiseProduct(c.sig);
    Matrix xbar;
    for (std::size_t l = L; l-- > 0;) {
      if (grad) accumulate(*grad, l, a, c.h[l]);
      if (l == 0 && !want_input) break;
      Matrix hbar = weight(l).transpose() * a;
      if (l == 0) {
        xbar = hbar.array().colwise() / input_scale.array();
        break;
      }
      a = hbar.cwiseProduct((1.0 - c.h[l].array().square()).matrix());
    }
    return xbar;
  }

  /// Forward-mode pass: directional derivatives of all activations along V (per column).
  Tangent tangent(const Cache& c, const Matrix& V) const {
    const std::size_t L = num_layers();
    const int d = theta_dim();
    Tangent t;
    t.hdot.resize(L);
    t.zdot.resize(L);
    t.hdot[0] = V.array().colwise() / input_scale.array();
    for (std::size_t l = 0; l + 1 < L; ++l) {
      t.zdot[l + 1] = weight(l) * t.hdot[l];
      t.hdot[l + 1] = t.zdot[l + 1].cwiseProduct((1.0 - c.h[l + 1].array().square()).matrix());
    }
    t.odot = weight(L - 1) * t.hdot[L - 1];
    t.mudot = output_scale.asDiagonal() * t.odot.topRows(d);
    t.sigmadot = (output_scale.asDiagonal() * t.odot.bottomRows(d)).cwiseProduct(c.sig);
    return t;
  }

  /// Reverse pass through the primal and tangent computations: parameter
  /// gradient of <mudot_bar, mudot> + <sigmadot_bar, sigmadot> + <mu_bar, mu> + <sigma_bar, sigma>
  /// with the tangent direction held fixed.
  void backward_tangent(const Cache& c, const Tangent& t, const Matrix& mudot_bar, const Matrix& sigmadot_bar,
                        const Matrix& mu_bar, const Matrix& sigma_bar, Vector& grad) const {
    const std::size_t L = num_layers();
    const int d = theta_dim();
    const Eigen::Index B = mu_bar.cols();
    Matrix adot(2 * d, B), a(2 * d, B);
    adot.topRows(d) = output_scale.asDiagonal() * mudot_bar;
    adot.bottomRows(d) = (output_scale.asDiagonal() * sigmadot_bar).cwiseProduct(c.sig);
    a.topRows(d) = output_scale.asDiagonal() * mu_bar;
    const Matrix dsig = c.sig.array() * (1.0 - c.sig.array());
    a.bottomRows(d) = (output_scale.asDiagonal() * sigma_bar).cwiseProduct(c.sig) +
                      (output_scale.asDiagonal() * sigmadot_bar)
                          .cwiseProduct(dsig)
                          .cwiseProduct(t.odot.bottomRows(d));
    for (std::size_t l = L; l-- > 0;) {
      accumulate(grad, l, a, c.h[l]);
      accumulate_weight_only(grad, l, adot, t.hdot[l]);
      if (l == 0) break;
      const Matrix hdot_bar = weight(l).transpose() * adot;
      Matrix hbar = weight(l).transpose() * a;
      const Matrix s = 1.0 - c.h[l].array().square();
      hbar.array() -= 2.0 * hdot_bar.array() * t.zdot[l].array() * c.h[l].array();
      adot = s.cwiseProduct(hdot_bar);
      a = s.cwiseProduct(hbar);
    }
  }

  // -------------------------------------------------------------------------
  // Estimator interface
  // -------------------------------------------------------------------------

  GaussianPosterior posterior_at(const Cache& c, Eigen::Index b) const {
    return GaussianPosterior::diagonal(c.mu.col(b), c.sigma.col(b).array().square().matrix());
  }

  GaussianPosterior predict(const Vector& x) const {
    if (x.size() != x_dim()) throw std::invalid_argument("mlp predict: wrong input dimension");
    return posterior_at(forward(Matrix(x)), 0);
  }

  std::vector<GaussianPosterior> predict_batch(const Matrix& X) const {
    const Cache c = forward(X);
    std::vector<GaussianPosterior> out;
    out.reserve(static_cast<std::size_t>(X.cols()));
    for (Eigen::Index b = 0; b < X.cols(); ++b) out.push_back(posterior_at(c, b));
    return out;
  }

  Matrix pullback_x(const Matrix& X, std::span<const PosteriorCotangent> cot) const {
    const Cache c = forward(X);
    Matrix mu_bar, sigma_bar;
    head_cotangents(c, cot, mu_bar, sigma_bar);
    return backward(c, mu_bar, sigma_bar, nullptr, true);
  }

  void pullback_params(const Matrix& X, std::span<const PosteriorCotangent> cot, Vector& grad) const {
    const Cache c = forward(X);
    Matrix mu_bar, sigma_bar;
    head_cotangents(c, cot, mu_bar, sigma_bar);
    backward(c, mu_bar, sigma_bar, &grad, false);
  }

  /// Mean -log q(theta_b | x_b) over columns, with its parameter gradient.
  double nll_batch(const Matrix& X, const Matrix& T, Vector* grad) const {
    const Cache c = forward(X);
    const auto B = static_cast<double>(X.cols());
    const Matrix z = (T - c.mu).cwiseQuotient(c.sigma);
    const double nll = (0.5 * z.squaredNorm() + c.sigma.array().log().sum()) / B + 0.5 * theta_dim() * kLog2Pi;
    if (grad) {
      const Matrix mu_bar = -z.cwiseQuotient(c.sigma) / B;
      const Matrix sigma_bar = (1.0 - z.array().square()).matrix().cwiseQuotient(c.sigma) / B;
      backward(c, mu_bar, sigma_bar, grad, false);
    }
    return nll;
  }

  /// Exact FIM w.r.t. x: J^T diag(1/sigma^2, 2/sigma^2) J with J = d(mu, sigma)/dx.
  Matrix fim_exact(const Vector& x) const {
    const int d = theta_dim();
    const Matrix X = x.replicate(1, 2 * d);
    const Cache c = forward(X);
    Matrix mu_bar = Matrix::Zero(d, 2 * d), sigma_bar = Matrix::Zero(d, 2 * d);
    for (int j = 0; j < d; ++j) {
      mu_bar(j, j) = 1.0;
      sigma_bar(j, d + j) = 1.0;
    }
    const Matrix J = backward(c, mu_bar, sigma_bar, nullptr, true);  // columns = gradients of heads
    Matrix fim = Matrix::Zero(x_dim(), x_dim());
    for (int j = 0; j < d; ++j) {
      const double s2 = c.sigma(j, 0) * c.sigma(j, 0);
      fim.noalias() += J.col(j) * J.col(j).transpose() / s2;
      fim.noalias() += 2.0 * J.col(d + j) * J.col(d + j).transpose() / s2;
    }
    return symmetrize(fim);
  }

  /// Monte Carlo FIM trace averaged over columns of X and n_mc samples each.
  ///
  /// noise is theta_dim x (B * n_mc), column b * n_mc + i drives sample i of
  /// input b through theta = mu + sigma * eps. With `grad` the parameter
  /// gradient (including the pathwise dependence of the samples) is
  /// accumulated.
  double fim_trace_mc(const Matrix& X, const Matrix& noise, int n_mc, Vector* grad) const {
    const Eigen::Index B = X.cols();
    const Eigen::Index n = B * n_mc;
    if (noise.cols() != n || noise.rows() != theta_dim()) throw std::invalid_argument("fim_trace_mc: noise shape");
    Matrix Xr(X.rows(), n);
    for (Eigen::Index b = 0; b < B; ++b)
      for (int i = 0; i < n_mc; ++i) Xr.col(b * n_mc + i) = X.col(b);
    const Cache c = forward(Xr);
    const Matrix w_mu = noise.cwiseQuotient(c.sigma);
    const Matrix w_sigma = (noise.array().square() - 1.0).matrix().cwiseQuotient(c.sigma);
    const Matrix G = backward(c, w_mu, w_sigma, nullptr, true);
    const double r = G.colwise().squaredNorm().sum() / static_cast<double>(n);
    if (grad) {
      const double k = 2.0 / static_cast<double>(n);
      const Tangent t = tangent(c, G);
      const Matrix sigma_bar =
          -k * (t.mudot.cwiseProduct(w_mu) + t.sigmadot.cwiseProduct(w_sigma)).cwiseQuotient(c.sigma);
      backward_tangent(c, t, k * w_mu, k * w_sigma, Matrix::Zero(theta_dim(), n), sigma_bar, *grad);
    }
    return r;
  }

  /// Converts posterior cotangents to (mu_bar, sigma_bar) head matrices.
  void head_cotangents(const Cache& c, std::span<const PosteriorCotangent> cot, Matrix& mu_bar,
                       Matrix& sigma_bar) const {
    const int d = theta_dim();
    const auto B = static_cast<Eigen::Index>(cot.size());
    mu_bar.resize(d, B);
    sigma_bar.resize(d, B);
    for (Eigen::Index b = 0; b < B; ++b) {
      const auto& ct = cot[static_cast<std::size_t>(b)];
      mu_bar.col(b) = ct.mean;
      for (int j = 0; j < d; ++j) {
        double sb = 2.0 * c.sigma(j, b) * ct.cov(j, j);
        if (ct.chol.size()) sb += ct.chol(j, j);
        sigma_bar(j, b) = sb;
      }
    }
  }

 private:
  Eigen::Index weight_size(std::size_t l) const {
    return static_cast<Eigen::Index>(sizes_[l]) * sizes_[l + 1];
  }

  void layout() {
    w_off_.clear();
    Eigen::Index off = 0;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      w_off_.push_back(off);
      off += weight_size(l) + sizes_[l + 1];
    }
    num_params_ = off;
  }

  void accumulate(Vector& grad, std::size_t l, const Matrix& a, const Matrix& h) const {
    Eigen::Map<Matrix> gw(grad.data() + w_off_[l], sizes_[l + 1], sizes_[l]);
    gw.noalias() += a * h.transpose();
    Eigen::Map<Vector> gb(grad.data() + w_off_[l] + weight_size(l), sizes_[l + 1]);
    gb += a.rowwise().sum();
  }

  void accumulate_weight_only(Vector& grad, std::size_t l, const Matrix& a, const Matrix& h) const {
    Eigen::Map<Matrix> gw(grad.data() + w_off_[l], sizes_[l + 1], sizes_[l]);
    gw.noalias() += a * h.transpose();
  }

  std::vector<int> sizes_;
  std::vector<Eigen::Index> w_off_;
  Eigen::Index num_params_ = 0;
  Vector params_;
};

}  // namespace rnpe

#endif  // RNPE_MLP_HPP
