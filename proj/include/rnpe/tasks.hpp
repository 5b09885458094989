#ifndef RNPE_TASKS_HPP
#define RNPE_TASKS_HPP

#include "rnpe/numerics.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace rnpe {

struct NonFiniteTrajectory : NumericError {
  using NumericError::NumericError;
};

struct FatalSimulatorError : NumericError {
  using NumericError::NumericError;
};

enum class TaskName { gaussian_linear, sir, lotka_volterra };

inline std::string_view to_string(TaskName t) {
  switch (t) {
    case TaskName::gaussian_linear: return "gaussian_linear";
    case TaskName::sir: return "sir";
    case TaskName::lotka_volterra: return "lotka_volterra";
  }
  return "?";
}

inline TaskName task_from_string(std::string_view s) {
  if (s == "gaussian_linear") return TaskName::gaussian_linear;
  if (s == "sir") return TaskName::sir;
  if (s == "lotka_volterra") return TaskName::lotka_volterra;
  throw ConfigError("unknown task '" + std::string(s) + "'");
}

enum class PriorKind { standard_normal, scaled_normal };

struct PriorSpec {
  PriorKind kind = PriorKind::standard_normal;
  double sigma = 1.0;
  /// Raw Gaussian draws are mapped to (low, high) inside the simulator.
  bool sigmoid_transform = false;
  Vector transform_low;
  Vector transform_high;
};

struct TaskSpec {
  TaskName name = TaskName::gaussian_linear;
  int theta_dim = 0;
  int x_dim = 0;
  PriorSpec prior;
  double noise_sigma = 0.0;
  int time_points = 0;

  // gaussian_linear: diagonal of A, drawn once at task_seed.
  Vector linear_diag;
  std::uint64_t task_seed = 0;

  // ODE tasks.
  Vector initial_state;
  double t_end = 0.0;
  int substeps = 10;
};

// Defaults for the ODE tasks; exposed so configs and tests can override them.
inline constexpr double kSirPopulation = 5.0;
inline constexpr double kSirTEnd = 10.0;
inline constexpr double kLvTEnd = 10.0;
inline constexpr int kMaxSubsteps = 80;

/// Seed whose N(0,1) diagonal draw defines the gaussian_linear mapping.
inline constexpr std::uint64_t kGaussianLinearTaskSeed = 0;

inline Vector gaussian_linear_diag(std::uint64_t task_seed, int dim) {
  RandomStream s = RandomStream(task_seed).derive("gaussian_linear.A");
  Vector a(dim);
  for (int i = 0; i < dim; ++i) a(i) = s.normal();
  return a;
}

inline TaskSpec make_task(TaskName name) {
  TaskSpec t;
  t.name = name;
  switch (name) {
    case TaskName::gaussian_linear:
      t.theta_dim = 10;
      t.x_dim = 10;
      t.prior = PriorSpec{PriorKind::standard_normal, 1.0, false, {}, {}};
      t.noise_sigma = 0.1;
      t.time_points = 0;
      t.task_seed = kGaussianLinearTaskSeed;
      t.linear_diag = gaussian_linear_diag(t.task_seed, 10);
      break;
    case TaskName::sir: {
      t.theta_dim = 2;
      t.x_dim = 50;
      Vector lo(2), hi(2);
      lo << 0.0, 0.0;  // beta, gamma
      hi << 1.0, 1.0;
      t.prior = PriorSpec{PriorKind::scaled_normal, 2.0, true, lo, hi};
      t.noise_sigma = 0.2;
      t.time_points = 50;
      t.initial_state = Vector(3);
      t.initial_state << 4.99, 0.01, 0.0;
      t.t_end = kSirTEnd;
      break;
    }
    case TaskName::lotka_volterra: {
      t.theta_dim = 4;
      t.x_dim = 100;
      t.prior = PriorSpec{PriorKind::scaled_normal, 0.5, true, Vector::Constant(4, 0.5), Vector::Constant(4, 1.0)};
      t.noise_sigma = 0.05;
      t.time_points = 50;
      t.initial_state = Vector(2);
      t.initial_state << 0.5, 0.5;
      t.t_end = kLvTEnd;
      break;
    }
  }
  return t;
}

inline void validate(const TaskSpec& t) {
  if (t.prior.sigma <= 0.0) throw ConfigError("prior sigma must be positive");
  if (t.prior.sigmoid_transform) {
    if (t.prior.transform_low.size() != t.theta_dim || t.prior.transform_high.size() != t.theta_dim)
      throw ConfigError("sigmoid bounds must have theta_dim entries");
    if ((t.prior.transform_low.array() >= t.prior.transform_high.array()).any())
      throw ConfigError("sigmoid bounds require low < high");
  }
  switch (t.name) {
    case TaskName::gaussian_linear:
      if (t.x_dim != t.theta_dim || t.linear_diag.size() != t.theta_dim)
        throw ConfigError("gaussian_linear requires a square diagonal mapping");
      break;
    case TaskName::sir:
      if (t.theta_dim != 2 || t.x_dim != t.time_points) throw ConfigError("sir dimensions inconsistent");
      break;
    case TaskName::lotka_volterra:
      if (t.theta_dim != 4 || t.x_dim != 2 * t.time_points) throw ConfigError("lotka_volterra dimensions inconsistent");
      break;
  }
}

/// Constrained simulator parameters low + (high - low) * sigmoid(raw).
inline Vector transform_parameters(const TaskSpec& t, const Vector& raw) {
  if (!t.prior.sigmoid_transform) return raw;
  Vector out(raw.size());
  for (Eigen::Index i = 0; i < raw.size(); ++i)
    out(i) = t.prior.transform_low(i) + (t.prior.transform_high(i) - t.prior.transform_low(i)) * sigmoid(raw(i));
  return out;
}

/// Rows are i.i.d. prior draws in raw (untransformed) coordinates.
inline Matrix sample_prior(const TaskSpec& t, RandomStream& stream, Eigen::Index n) {
  if (n < 1) throw std::invalid_argument("sample_prior: n must be >= 1");
  Matrix out(n, t.theta_dim);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int j = 0; j < t.theta_dim; ++j) out(i, j) = t.prior.sigma * stream.normal();
  return out;
}

// ---------------------------------------------------------------------------
// Integrator
// ---------------------------------------------------------------------------

/// Classical RK4 with fixed step t_end / (obs_points * substeps).
/// Row k of the result is the state at time (k + 1) * t_end / obs_points.
template <class Rhs>
Matrix integrate_rk4(Rhs&& rhs, const Vector& state0, double t_end, int obs_points, int substeps) {
  if (substeps < 1) throw std::invalid_argument("integrate_rk4: substeps must be >= 1");
  if (!(t_end > 0.0)) throw std::invalid_argument("integrate_rk4: t_end must be positive");
  if (obs_points < 1) throw std::invalid_argument("integrate_rk4: obs_points must be >= 1");
  const double h = t_end / (static_cast<double>(obs_points) * substeps);
  Matrix out(obs_points, state0.size());
  Vector y = state0;
  for (int k = 0; k < obs_points; ++k) {
    for (int s = 0; s < substeps; ++s) {
      const Vector k1 = rhs(y);
      const Vector k2 = rhs(Vector(y + 0.5 * h * k1));
      const Vector k3 = rhs(Vector(y + 0.5 * h * k2));
      const Vector k4 = rhs(Vector(y + h * k3));
      y += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    if (!y.allFinite()) throw NonFiniteTrajectory("ODE state left finite range");
    out.row(k) = y.transpose();
  }
  return out;
}

namespace detail {

inline Matrix sir_trajectory(const TaskSpec& t, const Vector& params, int substeps) {
  const double beta = params(0), gamma = params(1);
  auto rhs = [beta, gamma](const Vector& s) {
    Vector d(3);
    const double infection = beta * s(0) * s(1) / kSirPopulation;
    d(0) = -infection;
    d(1) = infection - gamma * s(1);
    d(2) = gamma * s(1);
    return d;
  };
  return integrate_rk4(rhs, t.initial_state, t.t_end, t.time_points, substeps);
}

inline Matrix lv_trajectory(const TaskSpec& t, const Vector& params, int substeps) {
  const double alpha = params(0), beta = params(1), delta = params(2), gamma = params(3);
  auto rhs = [=](const Vector& s) {
    Vector d(2);
    d(0) = alpha * s(0) - beta * s(0) * s(1);
    d(1) = delta * s(0) * s(1) - gamma * s(1);
    return d;
  };
  return integrate_rk4(rhs, t.initial_state, t.t_end, t.time_points, substeps);
}

// Retries with doubled substeps on non-finite trajectories.
template <class F>
Matrix with_substep_fallback(const TaskSpec& t, F&& integrate) {
  for (int sub = std::max(1, t.substeps);; sub *= 2) {
    try {
      return integrate(sub);
    } catch (const NonFiniteTrajectory&) {
      if (sub * 2 > kMaxSubsteps) throw;
    }
  }
}

}  // namespace detail

/// Full ODE state at the observation points (rows), raw theta.
inline Matrix simulate_trajectory(const TaskSpec& t, const Vector& theta) {
  const Vector p = transform_parameters(t, theta);
  switch (t.name) {
    case TaskName::sir:
      return detail::with_substep_fallback(t, [&](int sub) { return detail::sir_trajectory(t, p, sub); });
    case TaskName::lotka_volterra:
      return detail::with_substep_fallback(t, [&](int sub) { return detail::lv_trajectory(t, p, sub); });
    case TaskName::gaussian_linear: break;
  }
  throw std::invalid_argument("simulate_trajectory: task has no ODE");
}

/// Observation without noise (the simulator's mean / median path).
inline Vector simulate_noiseless(const TaskSpec& t, const Vector& theta) {
  if (theta.size() != t.theta_dim) throw std::invalid_argument("simulate: theta has wrong dimension");
  switch (t.name) {
    case TaskName::gaussian_linear: return t.linear_diag.cwiseProduct(theta);
    case TaskName::sir: return simulate_trajectory(t, theta).col(1);
    case TaskName::lotka_volterra: {
      const Matrix traj = simulate_trajectory(t, theta);
      Vector x(t.x_dim);
      x.head(t.time_points) = traj.col(0);
      x.tail(t.time_points) = traj.col(1);
      return x;
    }
  }
  return {};
}

inline Vector simulate(const TaskSpec& t, const Vector& theta, RandomStream& stream) {
  Vector x = simulate_noiseless(t, theta);
  switch (t.name) {
    case TaskName::gaussian_linear:
    case TaskName::lotka_volterra:
      for (Eigen::Index i = 0; i < x.size(); ++i) x(i) += t.noise_sigma * stream.normal();
      break;
    case TaskName::sir:
      // Multiplicative log-normal noise on the infected series.
      for (Eigen::Index i = 0; i < x.size(); ++i) x(i) *= std::exp(t.noise_sigma * stream.normal());
      break;
  }
  return x;
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

struct Dataset {
  TaskSpec task;
  Matrix thetas;  // N x theta_dim
  Matrix xs;      // N x x_dim
  std::uint64_t seed = 0;
  Vector x_min;
  Vector x_max;
  double prior_predictive_std = 0.0;

  Eigen::Index size() const { return thetas.rows(); }
};

/// Recomputes the x extrema and prior-predictive scale from xs.
inline void compute_statistics(Dataset& ds) {
  ds.x_min = ds.xs.colwise().minCoeff().transpose();
  ds.x_max = ds.xs.colwise().maxCoeff().transpose();
  const double n = static_cast<double>(ds.xs.rows());
  double acc = 0.0;
  for (Eigen::Index j = 0; j < ds.xs.cols(); ++j) {
    const double mean = ds.xs.col(j).mean();
    const double var = (ds.xs.col(j).array() - mean).square().sum() / std::max(1.0, n - 1.0);
    acc += std::sqrt(var);
  }
  ds.prior_predictive_std = acc / static_cast<double>(ds.xs.cols());
}

inline constexpr int kMaxSimulationAttempts = 100;

/// Row i uses the substream (seed, i), so the result is independent of `workers`.
inline Dataset generate_dataset(const TaskSpec& task, Eigen::Index n, std::uint64_t seed, unsigned workers = 1) {
  if (n < 2) throw std::invalid_argument("generate_dataset: n must be >= 2");
  validate(task);
  Dataset ds;
  ds.task = task;
  ds.seed = seed;
  ds.thetas.resize(n, task.theta_dim);
  ds.xs.resize(n, task.x_dim);
  const RandomStream root(seed);
  parallel_for(
      static_cast<std::size_t>(n),
      [&](std::size_t i) {
        RandomStream row = root.derive(static_cast<std::uint64_t>(i));
        for (int attempt = 0; attempt < kMaxSimulationAttempts; ++attempt) {
          const Vector theta = sample_prior(task, row, 1).row(0).transpose();
          try {
            const Vector x = simulate(task, theta, row);
            if (!x.allFinite()) continue;
            ds.thetas.row(static_cast<Eigen::Index>(i)) = theta.transpose();
            ds.xs.row(static_cast<Eigen::Index>(i)) = x.transpose();
            return;
          } catch (const NonFiniteTrajectory&) {
          }
        }
        throw FatalSimulatorError("simulation failed after " + std::to_string(kMaxSimulationAttempts) + " attempts");
      },
      workers);
  compute_statistics(ds);
  return ds;
}

/// Dataset restricted to rows [begin, begin + count), statistics recomputed.
inline Dataset slice_rows(const Dataset& ds, Eigen::Index begin, Eigen::Index count) {
  Dataset out;
  out.task = ds.task;
  out.seed = ds.seed;
  out.thetas = ds.thetas.middleRows(begin, count);
  out.xs = ds.xs.middleRows(begin, count);
  compute_statistics(out);
  return out;
}

inline double absolute_tolerance(const Dataset& ds, double relative_eps) {
  if (relative_eps < 0.0) throw std::invalid_argument("absolute_tolerance: relative eps must be >= 0");
  return relative_eps * ds.prior_predictive_std;
}

/// Relative tolerance grid used throughout the robustness evaluation.
inline const std::vector<double>& relative_eps_grid() {
  static const std::vector<double> grid{0.1, 0.2, 0.3, 0.5, 1.0, 2.0};
  return grid;
}

}  // namespace rnpe

#endif  // RNPE_TASKS_HPP
