#ifndef RNPE_FEATURE_MAP_HPP
#define RNPE_FEATURE_MAP_HPP

#include "rnpe/numerics.hpp"

#include <cstdint>
#include <numbers>
#include <string_view>

namespace rnpe {

enum class FeatureKind { identity, random_fourier };

inline std::string_view to_string(FeatureKind k) {
  return k == FeatureKind::identity ? "identity" : "random_fourier";
}

inline FeatureKind feature_kind_from_string(std::string_view s) {
  if (s == "identity") return FeatureKind::identity;
  if (s == "random_fourier") return FeatureKind::random_fourier;
  throw ConfigError("unknown feature map '" + std::string(s) + "'");
}

/// Fixed (non-learnable) feature map phi: R^{x_dim} -> R^{feature_dim} with a
/// closed-form Jacobian.
///
/// random_fourier: phi(x) = sqrt(2 / d) * cos(Omega x + b), rows of Omega drawn
/// from N(0, I / bandwidth^2) and b from U(0, 2 pi), both at `seed`.
struct FeatureMap {
  FeatureKind kind = FeatureKind::identity;
  int x_dim = 0;
  int feature_dim = 0;
  double bandwidth = 1.0;
  std::uint64_t seed = 0;
  Matrix frequencies;  // feature_dim x x_dim
  Vector phases;       // feature_dim

  static FeatureMap identity(int x_dim) {
    FeatureMap fm;
    fm.kind = FeatureKind::identity;
    fm.x_dim = x_dim;
    fm.feature_dim = x_dim;
    return fm;
  }

  static FeatureMap random_fourier(int x_dim, int feature_dim, double bandwidth, std::uint64_t seed) {
    if (feature_dim < 1 || !(bandwidth > 0.0)) throw ConfigError("random_fourier: invalid feature_dim/bandwidth");
    FeatureMap fm;
    fm.kind = FeatureKind::random_fourier;
    fm.x_dim = x_dim;
    fm.feature_dim = feature_dim;
    fm.bandwidth = bandwidth;
    fm.seed = seed;
    RandomStream s = RandomStream(seed).derive("random_fourier");
    fm.frequencies = s.standard_normal(feature_dim, x_dim) / bandwidth;
    fm.phases.resize(feature_dim);
    for (int i = 0; i < feature_dim; ++i) fm.phases(i) = 2.0 * std::numbers::pi * s.uniform();
    return fm;
  }

  double amplitude() const { return std::sqrt(2.0 / static_cast<double>(feature_dim)); }

  /// Columns of X are inputs; columns of the result are features.
  Matrix features(const Matrix& X) const {
    if (kind == FeatureKind::identity) return X;
    Matrix arg = frequencies * X;
    arg.colwise() += phases;
    return amplitude() * arg.array().cos().matrix();
  }

  Vector features(const Vector& x) const { return features(Matrix(x)).col(0); }

  /// d phi / d x at x (feature_dim x x_dim).
  Matrix jacobian(const Vector& x) const {
    if (kind == FeatureKind::identity) return Matrix::Identity(x_dim, x_dim);
    const Vector arg = frequencies * x + phases;
    return -amplitude() * (arg.array().sin().matrix().asDiagonal() * frequencies);
  }

  /// Column-wise J(x_b)^T v_b.
  Matrix vjp(const Matrix& X, const Matrix& V) const {
    if (kind == FeatureKind::identity) return V;
    return vjp_sines(sines(X), V);
  }

  /// Column-wise J(x_b) g_b.
  Matrix jvp(const Matrix& X, const Matrix& G) const {
    if (kind == FeatureKind::identity) return G;
    return jvp_sines(sines(X), G);
  }

  /// sin(Omega x_b + b) per column; the state the Jacobian depends on.
  Matrix sines(const Matrix& X) const {
    Matrix arg = frequencies * X;
    arg.colwise() += phases;
    return arg.array().sin().matrix();
  }

  Matrix vjp_sines(const Matrix& S, const Matrix& V) const {
    return -amplitude() * (frequencies.transpose() * S.cwiseProduct(V));
  }

  Matrix jvp_sines(const Matrix& S, const Matrix& G) const {
    return -amplitude() * S.cwiseProduct(frequencies * G);
  }

  /// (1/N) sum_i J(x_i) J(x_i)^T over the columns of X.
  Matrix mean_jacobian_gram(const Matrix& X) const {
    if (kind == FeatureKind::identity) return Matrix::Identity(x_dim, x_dim);
    const Matrix s = sines(X);
    const Matrix ss = s * s.transpose() / static_cast<double>(X.cols());
    return amplitude() * amplitude() * (frequencies * frequencies.transpose()).cwiseProduct(ss);
  }

};

}  // namespace rnpe

#endif  // RNPE_FEATURE_MAP_HPP
