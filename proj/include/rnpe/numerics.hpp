#ifndef RNPE_NUMERICS_HPP
#define RNPE_NUMERICS_HPP

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace rnpe {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Numeric failure: callers surface these with exit code 3.
struct NumericError : Error {
  using Error::Error;
};

struct NotPositiveDefinite : NumericError {
  using NumericError::NumericError;
};

struct NoConvergence : NumericError {
  using NumericError::NumericError;
};

/// Input/configuration problems (exit code 2 at the CLI).
struct ConfigError : Error {
  using Error::Error;
};

struct FormatError : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Dense linear algebra
// ---------------------------------------------------------------------------

inline bool is_symmetric(const Matrix& m, double rel_tol = 1e-10) {
  if (m.rows() != m.cols()) return false;
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  return (m - m.transpose()).cwiseAbs().maxCoeff() <= rel_tol * scale;
}

/// Lower Cholesky factor of an SPD matrix.
inline Matrix cholesky_lower(const Matrix& m) {
  if (!is_symmetric(m)) throw std::invalid_argument("cholesky_lower: matrix is not symmetric");
  Eigen::LLT<Matrix> llt(m);
  if (llt.info() != Eigen::Success) throw NotPositiveDefinite("Cholesky pivot <= 0");
  return llt.matrixL();
}

/// Solves m * x = rhs for symmetric positive-definite m.
inline Matrix solve_spd(const Matrix& m, const Matrix& rhs) {
  if (m.rows() != rhs.rows()) throw std::invalid_argument("solve_spd: dimension mismatch");
  if (!is_symmetric(m)) throw std::invalid_argument("solve_spd: matrix is not symmetric");
  Eigen::LLT<Matrix> llt(m);
  if (llt.info() != Eigen::Success) throw NotPositiveDefinite("solve_spd: Cholesky pivot <= 0");
  return llt.solve(rhs);
}

inline Matrix inverse_spd(const Matrix& m) {
  return solve_spd(m, Matrix::Identity(m.rows(), m.cols()));
}

inline Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

/// Flips v so that its largest-magnitude component is positive.
inline void canonical_sign(Vector& v) {
  Eigen::Index arg = 0;
  v.cwiseAbs().maxCoeff(&arg);
  if (v(arg) < 0.0) v = -v;
}

struct Eigenpair {
  double value = 0.0;
  Vector vector;
  /// Top two Ritz values closer than tol; any unit vector of the top eigenspace is then valid.
  bool degenerate = false;
  int iterations = 0;
};

namespace detail {

// Rayleigh quotient of an (approximately) deflated matrix, used only as a gap diagnostic.
inline double second_ritz_value(const Matrix& m, const Vector& top, double top_value) {
  const Eigen::Index n = m.rows();
  if (n < 2) return 0.0;
  const Matrix deflated = m - top_value * top * top.transpose();
  Vector v = Vector::Ones(n) / std::sqrt(static_cast<double>(n));
  v -= top.dot(v) * top;
  if (v.norm() < 1e-12) {
    v = Vector::Zero(n);
    v(0) = 1.0;
    v -= top.dot(v) * top;
  }
  v.normalize();
  for (int it = 0; it < 500; ++it) {
    Vector w = deflated * v;
    w -= top.dot(w) * top;
    const double nw = w.norm();
    if (nw < 1e-300) return 0.0;
    v = w / nw;
  }
  return v.dot(m * v);
}

}  // namespace detail

/// Largest eigenpair of a symmetric PSD matrix by power iteration.
///
/// The iteration runs on a normalized power of m (repeated squaring) so that
/// close top eigenvalues still converge within max_iters; the residual test
/// ||m v - lambda v|| <= tol * lambda is always checked against m itself.
inline Eigenpair top_eigenpair(const Matrix& m, double tol = 1e-8, int max_iters = 10'000) {
  if (m.rows() != m.cols() || m.rows() == 0) throw std::invalid_argument("top_eigenpair: need square matrix");
  if (!(tol > 0.0)) throw std::invalid_argument("top_eigenpair: tol must be positive");
  const Eigen::Index n = m.rows();

  Eigenpair out;
  const double scale = m.cwiseAbs().maxCoeff();
  Vector v = Vector::Ones(n) / std::sqrt(static_cast<double>(n));
  if (scale == 0.0) {
    out.value = 0.0;
    out.vector = Vector::Zero(n);
    out.vector(0) = 1.0;
    out.degenerate = n > 1;
    return out;
  }

  Matrix power = m / scale;
  constexpr int kSquarings = 3;
  for (int s = 0; s < kSquarings; ++s) {
    power = power * power;
    const double ps = power.cwiseAbs().maxCoeff();
    if (ps == 0.0) break;
    power /= ps;
  }

  for (int it = 1; it <= max_iters; ++it) {
    Vector w = power * v;
    double nw = w.norm();
    if (nw == 0.0 || !std::isfinite(nw)) {
      // Start vector orthogonal to the dominant space: fall back to m itself.
      w = m * v + Vector::LinSpaced(n, 1.0, 2.0) * 1e-3;
      nw = w.norm();
    }
    v = w / nw;
    const Vector mv = m * v;
    const double lambda = v.dot(mv);
    const double resid = (mv - lambda * v).norm();
    if (resid <= tol * std::max(lambda, 1e-300)) {
      out.value = lambda;
      out.vector = v;
      out.iterations = it;
      canonical_sign(out.vector);
      const double second = detail::second_ritz_value(m, out.vector, lambda);
      out.degenerate = std::abs(lambda - second) < tol * std::max(1.0, lambda);
      return out;
    }
  }
  throw NoConvergence("top_eigenpair: power iteration did not converge");
}

// ---------------------------------------------------------------------------
// Counter-based random streams
// ---------------------------------------------------------------------------

namespace detail {

constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace detail

/// Value-semantic counter-based generator: output k is a pure function of (seed, k).
class RandomStream {
 public:
  constexpr RandomStream() = default;
  constexpr explicit RandomStream(std::uint64_t seed, std::uint64_t counter = 0)
      : seed_(seed), counter_(counter), key_(detail::mix64(seed + 0x9E3779B97F4A7C15ULL)) {}

  constexpr std::uint64_t seed() const { return seed_; }
  constexpr std::uint64_t counter() const { return counter_; }

  /// Independent substream keyed by an integer label (row index, epoch, ...).
  constexpr RandomStream derive(std::uint64_t label) const {
    return RandomStream(detail::mix64(detail::mix64(seed_ ^ 0x6A09E667F3BCC909ULL) + detail::mix64(label + 1)));
  }
  constexpr RandomStream derive(std::string_view label) const { return derive(detail::fnv1a(label)); }

  constexpr std::uint64_t next_u64() {
    const std::uint64_t z = detail::mix64(counter_++ * 0xD1B54A32D192ED03ULL ^ key_);
    return detail::mix64(z ^ (key_ >> 17));
  }

  /// Uniform on [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Standard normal by Box-Muller; consumes exactly two counters.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// n normals, filled pairwise from both Box-Muller outputs (2 * ceil(n / 2) counters).
  void fill_normal(double* out, Eigen::Index n) {
    Eigen::Index i = 0;
    for (; i + 1 < n; i += 2) {
      const double u1 = 1.0 - uniform();
      const double u2 = uniform();
      const double r = std::sqrt(-2.0 * std::log(u1));
      const double a = 2.0 * std::numbers::pi * u2;
      out[i] = r * std::cos(a);
      out[i + 1] = r * std::sin(a);
    }
    if (i < n) out[i] = normal();
  }

  Vector standard_normal(Eigen::Index n) {
    Vector out(n);
    fill_normal(out.data(), n);
    return out;
  }

  /// Column-major fill.
  Matrix standard_normal(Eigen::Index rows, Eigen::Index cols) {
    Matrix out(rows, cols);
    fill_normal(out.data(), out.size());
    return out;
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t counter_ = 0;
  std::uint64_t key_ = detail::mix64(0x9E3779B97F4A7C15ULL);
};

inline Vector standard_normal(RandomStream& stream, Eigen::Index n) { return stream.standard_normal(n); }

/// Uniform draw from the d-dimensional L2 ball of radius eps.
inline Vector uniform_in_ball(RandomStream& stream, Eigen::Index d, double eps) {
  Vector dir = stream.standard_normal(d);
  double n = dir.norm();
  while (n == 0.0) {
    dir = stream.standard_normal(d);
    n = dir.norm();
  }
  const double r = eps * std::pow(stream.uniform(), 1.0 / static_cast<double>(d));
  return dir * (r / n);
}

/// Uniform draw from the sphere of radius eps.
inline Vector uniform_on_sphere(RandomStream& stream, Eigen::Index d, double eps) {
  Vector dir = stream.standard_normal(d);
  double n = dir.norm();
  while (n == 0.0) {
    dir = stream.standard_normal(d);
    n = dir.norm();
  }
  return dir * (eps / n);
}

// ---------------------------------------------------------------------------
// Parallel helpers
// ---------------------------------------------------------------------------

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Each index is
/// processed exactly once; callers write results by index so output does not
/// depend on scheduling.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn, unsigned workers = 1) {
  if (workers <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  workers = static_cast<unsigned>(std::min<std::size_t>(workers, n));
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  pool.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Small helpers
// ---------------------------------------------------------------------------

inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

/// Quantile with linear interpolation between order statistics.
inline double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("quantile: empty input");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

inline double median(std::vector<double> values) { return quantile(std::move(values), 0.5); }

}  // namespace rnpe

#endif  // RNPE_NUMERICS_HPP
