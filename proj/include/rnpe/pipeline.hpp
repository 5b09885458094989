#ifndef RNPE_PIPELINE_HPP
#define RNPE_PIPELINE_HPP

#include "rnpe/checkpoint.hpp"
#include "rnpe/config.hpp"
#include "rnpe/metrics.hpp"
#include "rnpe/oracles.hpp"
#include "rnpe/svg.hpp"

#include <cstdio>
#include <ostream>
#include <sstream>

#ifndef RNPE_BUILD_ID
#define RNPE_BUILD_ID "unknown"
#endif

namespace rnpe {

inline constexpr const char* kBuildId = RNPE_BUILD_ID;

/// Fixed layout of an output directory.
struct OutputPaths {
  fs::path root;
  fs::path train_data() const { return root / "data" / "train"; }
  fs::path test_data() const { return root / "data" / "test"; }
  fs::path checkpoint() const { return root / "model" / "estimator"; }
  fs::path training_log() const { return root / "model" / "training_log.csv"; }
  fs::path attacks_dir() const { return root / "attacks"; }
  fs::path attacks_index() const { return attacks_dir() / "index.json"; }
  fs::path report_dir() const { return root / "report"; }
  fs::path robustness_csv() const { return report_dir() / "robustness.csv"; }
  fs::path tradeoff_csv() const { return root / "sweep" / "tradeoff.csv"; }
};

/// Held for the lifetime of a subcommand; a second holder on the same
/// directory is rejected.
class OutputLock {
 public:
  explicit OutputLock(const fs::path& dir) : path_(dir / ".rnpe.lock") {
    fs::create_directories(dir);
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) throw ConfigError("output directory '" + dir.string() + "' is locked (" + path_.string() + " exists)");
    std::fclose(f);
  }
  ~OutputLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  fs::path path_;
};

namespace detail {

inline void refuse_overwrite(const std::vector<fs::path>& outputs, bool force) {
  if (force) return;
  for (const auto& p : outputs)
    if (fs::exists(p)) throw ConfigError("'" + p.string() + "' exists; pass --force to overwrite");
}

inline void require_inputs(const std::vector<fs::path>& inputs, std::string_view stage) {
  std::string missing;
  for (const auto& p : inputs)
    if (!fs::exists(p)) missing += "\n  " + p.string();
  if (!missing.empty()) throw ConfigError(std::string(stage) + ": missing inputs:" + missing);
}

inline void check_hash(const std::string& found, const std::string& expected, const fs::path& what) {
  if (found != expected)
    throw ConfigError("'" + what.string() + "' was produced under config hash " + found + ", current config is " +
                      expected);
}

inline std::string csv_header(const std::string& hash) { return "# config_hash=" + hash + "\n"; }

inline std::string eps_tag(double rel) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", rel);
  return buf;
}

inline std::string csv_field(std::string s) {
  for (char& c : s)
    if (c == ',' || c == '\n' || c == '\r' || c == '"') c = ';';
  return s;
}

inline fs::path stem_file(const fs::path& stem, const char* suffix) { return stem.string() + suffix; }

inline LoadedDataset load_checked(const fs::path& stem, const std::string& hash) {
  LoadedDataset d = load_dataset(stem);
  check_hash(d.config_hash, hash, stem_file(stem, ".json"));
  return d;
}

inline LoadedCheckpoint load_checked_checkpoint(const fs::path& stem, const std::string& hash) {
  LoadedCheckpoint c = load_checkpoint(stem);
  check_hash(c.config_hash, hash, stem_file(stem, ".json"));
  return c;
}

inline Bounds attack_bounds(const ExperimentConfig& c, const Dataset& test) {
  if (!c.clamp) return {};
  return {test.x_min, test.x_max};
}

}  // namespace detail

/// Untrained estimator of the configured architecture for the dataset.
inline AnyEstimator make_estimator(const ExperimentConfig& c, const Dataset& ds) {
  if (c.estimator == "glm") {
    const FeatureMap fm = c.features == "identity" ? FeatureMap::identity(c.task.x_dim)
                                                   : FeatureMap::random_fourier(c.task.x_dim, c.feature_dim,
                                                                                c.bandwidth, stage_seed(c, "features"));
    return GlmEstimator(fm, c.task.theta_dim);
  }
  std::vector<int> sizes{c.task.x_dim};
  sizes.insert(sizes.end(), c.hidden.begin(), c.hidden.end());
  sizes.push_back(2 * c.task.theta_dim);
  MlpEstimator m(sizes, stage_seed(c, "estimator.init"));
  m.standardize_for(ds.xs, ds.thetas);
  return m;
}

inline TrainConfig train_config(const ExperimentConfig& c) {
  TrainConfig t = c.train;
  t.seed = stage_seed(c, "train");
  return t;
}

/// Dispatch on the configured defense.
template <Estimator E>
TrainResult<E> train_with_defense(const E& init, const ExperimentConfig& c, const Dataset& ds) {
  const TrainConfig t = train_config(c);
  const double eps = absolute_tolerance(ds, c.defense_eps);
  switch (c.defense) {
    case DefenseKind::none: return train_npe(init, ds, t);
    case DefenseKind::fim: return train_fim_regularized(init, ds, t, FimRegConfig{c.effective_beta(), c.gamma, c.n_mc});
    case DefenseKind::trades: return train_trades(init, ds, t, c.effective_beta(), eps, c.defense_steps);
    case DefenseKind::adversarial: return train_adversarial(init, ds, t, eps, c.defense_steps);
    case DefenseKind::noise: return train_noise_augmented(init, ds, t, eps);
  }
  throw ConfigError("unknown defense");
}

inline AttackConfig attack_config(const ExperimentConfig& c, AttackKind kind, double abs_eps) {
  AttackConfig a;
  a.kind = kind;
  a.eps = abs_eps;
  a.steps = c.attack_steps;
  a.step_size = c.attack_step_size;
  a.monte_carlo = c.monte_carlo;
  a.mc_per_step = c.mc_per_step;
  a.mc_final = c.mc_final;
  a.mmd_samples = c.mmd_samples;
  a.seed = RandomStream(stage_seed(c, "attack")).derive(to_string(kind)).derive(detail::eps_tag(abs_eps)).next_u64();
  return a;
}

/// Attack kinds run by cmd_attack: the configured ones plus random_l2.
inline std::vector<AttackKind> attack_kinds_with_baseline(const ExperimentConfig& c) {
  std::vector<AttackKind> kinds = c.attack_kinds;
  if (std::find(kinds.begin(), kinds.end(), AttackKind::random_l2) == kinds.end())
    kinds.push_back(AttackKind::random_l2);
  return kinds;
}

inline void cmd_simulate(const ExperimentConfig& c, const fs::path& out, bool force, std::ostream& log) {
  const OutputPaths p{out};
  OutputLock lock(out);
  const std::string hash = config_hash(c);
  detail::refuse_overwrite({detail::stem_file(p.train_data(), ".json"), detail::stem_file(p.test_data(), ".json")},
                           force);
  const Dataset train = generate_dataset(c.task, c.n_train, stage_seed(c, "simulate.train"), c.workers);
  const Dataset test = generate_dataset(c.task, std::max<Eigen::Index>(c.n_test, 2), stage_seed(c, "simulate.test"),
                                        c.workers);
  save_dataset(p.train_data(), train, hash);
  save_dataset(p.test_data(), test, hash);
  log << "simulate: " << to_string(c.task.name) << " n_train=" << train.size() << " n_test=" << test.size()
      << " prior_predictive_std=" << train.prior_predictive_std << "\n";
}

inline void cmd_train(const ExperimentConfig& c, const fs::path& out, bool force, std::ostream& log) {
  const OutputPaths p{out};
  OutputLock lock(out);
  const std::string hash = config_hash(c);
  detail::require_inputs({detail::stem_file(p.train_data(), ".json")}, "train");
  detail::refuse_overwrite({detail::stem_file(p.checkpoint(), ".json"), p.training_log()}, force);
  const Dataset ds = detail::load_checked(p.train_data(), hash).data;
  const AnyEstimator init = make_estimator(c, ds);
  std::visit(
      [&](const auto& e) {
        const auto res = train_with_defense(e, c, ds);
        json extra;
        extra["build_id"] = kBuildId;
        extra["defense"] = std::string(to_string(c.defense));
        extra["beta"] = c.effective_beta();
        extra["best_epoch"] = res.best_epoch;
        extra["lr"] = res.lr;
        extra["lr_fallbacks"] = res.fallbacks;
        extra["config"] = config_json(c);
        save_checkpoint(p.checkpoint(), res.estimator, hash, extra);
        std::ostringstream csv;
        csv << detail::csv_header(hash);
        write_training_log(csv, res.history);
        write_text(p.training_log(), csv.str());
        log << "train: defense=" << to_string(c.defense) << " epochs=" << res.history.size()
            << " best_epoch=" << res.best_epoch << " lr=" << res.lr << "\n";
      },
      init);
}

inline void cmd_attack(const ExperimentConfig& c, const fs::path& out, bool force, std::ostream& log) {
  const OutputPaths p{out};
  OutputLock lock(out);
  const std::string hash = config_hash(c);
  detail::require_inputs({detail::stem_file(p.train_data(), ".json"), detail::stem_file(p.test_data(), ".json"),
                          detail::stem_file(p.checkpoint(), ".json")},
                         "attack");
  detail::refuse_overwrite({p.attacks_index()}, force);
  const Dataset train = detail::load_checked(p.train_data(), hash).data;
  const Dataset test = detail::load_checked(p.test_data(), hash).data;
  const AnyEstimator est = detail::load_checked_checkpoint(p.checkpoint(), hash).estimator;
  if (c.n_points > test.size()) throw ConfigError("attack.n_points exceeds the held-out set size");
  const Bounds bounds = detail::attack_bounds(c, test);
  json index;
  index["format"] = "rnpe-attacks-1";
  index["config_hash"] = hash;
  index["build_id"] = kBuildId;
  index["n_points"] = c.n_points;
  index["x_dim"] = c.task.x_dim;
  index["prior_predictive_std"] = train.prior_predictive_std;
  index["entries"] = json::array();
  for (AttackKind kind : attack_kinds_with_baseline(c)) {
    for (double rel : c.attack_eps) {
      const double abs_eps = absolute_tolerance(train, rel);
      const AttackConfig ac = attack_config(c, kind, abs_eps);
      const std::string name = std::string(to_string(kind)) + "_eps" + detail::eps_tag(rel);
      std::vector<AttackResult> results;
      std::vector<double> kls;
      std::visit(
          [&](const auto& e) {
            results = batch_attack(e, test.xs, test.thetas, ac, c.n_points, bounds, c.workers);
            kls = pointwise_kl(e, results, test.xs);
          },
          est);
      std::ostringstream csv;
      csv << detail::csv_header(hash);
      csv << "point,kind,rel_eps,abs_eps,final_objective,kl,clamped,restarts,zero_gradient,error\n";
      Matrix deltas(c.n_points, c.task.x_dim);
      std::size_t failures = 0;
      for (std::size_t i = 0; i < results.size(); ++i) {
        const auto& r = results[i];
        deltas.row(static_cast<Eigen::Index>(i)) = r.delta.transpose();
        if (!r.error.empty()) ++failures;
        csv << i << ',' << to_string(kind) << ',' << detail::csv_number(rel) << ',' << detail::csv_number(abs_eps)
            << ',' << detail::csv_number(r.final_objective) << ',' << detail::csv_number(kls[i]) << ','
            << (r.clamped ? 1 : 0) << ',' << r.restarts << ',' << (r.zero_gradient ? 1 : 0) << ','
            << detail::csv_field(r.error) << '\n';
      }
      write_text(p.attacks_dir() / (name + ".csv"), csv.str());
      write_f64(p.attacks_dir() / (name + ".delta.f64"), flatten_rows(deltas));
      index["entries"].push_back({{"kind", std::string(to_string(kind))},
                                  {"rel_eps", rel},
                                  {"abs_eps", abs_eps},
                                  {"csv", name + ".csv"},
                                  {"delta", name + ".delta.f64"},
                                  {"failures", failures}});
      log << "attack: " << name << " points=" << results.size() << " failures=" << failures << "\n";
    }
  }
  write_manifest(p.attacks_index(), index);
}

struct RobustnessRow {
  std::string kind;
  double rel_eps = 0.0, abs_eps = 0.0;
  KlSummary kl;
  std::string coverage_id;
  CoverageCurve coverage;
};

inline void write_robustness_csv(std::ostream& os, const ExperimentConfig& c, const std::vector<RobustnessRow>& rows) {
  os << "task,estimator,defense,kind,rel_eps,abs_eps,median_kl,q15_kl,q85_kl,coverage_id\n";
  for (const auto& r : rows)
    os << to_string(c.task.name) << ',' << c.estimator << ',' << to_string(c.defense) << ',' << r.kind << ','
       << detail::csv_number(r.rel_eps) << ',' << detail::csv_number(r.abs_eps) << ','
       << detail::csv_number(r.kl.median) << ',' << detail::csv_number(r.kl.q15) << ','
       << detail::csv_number(r.kl.q85) << ',' << r.coverage_id << '\n';
}

inline void cmd_evaluate(const ExperimentConfig& c, const fs::path& out, bool force, std::ostream& log) {
  const OutputPaths p{out};
  OutputLock lock(out);
  const std::string hash = config_hash(c);
  detail::require_inputs({detail::stem_file(p.test_data(), ".json"), detail::stem_file(p.checkpoint(), ".json"),
                          p.attacks_index()},
                         "evaluate");
  detail::refuse_overwrite({p.robustness_csv()}, force);
  const Dataset test = detail::load_checked(p.test_data(), hash).data;
  const AnyEstimator est = detail::load_checked_checkpoint(p.checkpoint(), hash).estimator;
  const json index = read_manifest(p.attacks_index());
  detail::check_hash(manifest_get<std::string>(index, "config_hash", p.attacks_index()), hash, p.attacks_index());
  const auto n = manifest_get<Eigen::Index>(index, "n_points", p.attacks_index());
  const json& entries = index.at("entries");
  if (n == 0 || entries.empty()) throw ConfigError("evaluate: the attack set is empty");
  std::vector<fs::path> needed;
  for (const auto& e : entries) {
    needed.push_back(p.attacks_dir() / e.at("csv").get<std::string>());
    needed.push_back(p.attacks_dir() / e.at("delta").get<std::string>());
  }
  detail::require_inputs(needed, "evaluate");

  const PosteriorFn post = [&est](const Vector& x) {
    return std::visit([&](const auto& e) { return e.predict(x); }, est);
  };
  const RandomStream cov_stream(stage_seed(c, "evaluate.coverage"));
  const auto grid = nominal_grid(c.coverage_levels);
  const Matrix thetas = test.thetas.topRows(n);
  const Matrix xs = test.xs.topRows(n);

  std::vector<RobustnessRow> rows;
  for (const auto& e : entries) {
    RobustnessRow r;
    r.kind = e.at("kind").get<std::string>();
    r.rel_eps = e.at("rel_eps").get<double>();
    r.abs_eps = e.at("abs_eps").get<double>();
    const Matrix delta = unflatten_rows(
        read_f64(p.attacks_dir() / e.at("delta").get<std::string>(), static_cast<std::size_t>(n * c.task.x_dim)), n,
        c.task.x_dim);
    const Matrix xp = xs + delta;
    std::vector<double> kls;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double kl = kl_gaussian(post(xs.row(i).transpose()), post(xp.row(i).transpose()));
      if (std::isfinite(kl)) kls.push_back(kl);
    }
    if (kls.empty()) throw NumericError("evaluate: every KL value is non-finite for " + r.kind);
    r.kl = summarize_kl(kls);
    r.coverage_id = "coverage_" + r.kind + "_eps" + detail::eps_tag(r.rel_eps);
    r.coverage = expected_coverage(post, thetas, xp, c.coverage_samples, grid, cov_stream);
    rows.push_back(std::move(r));
  }
  const CoverageCurve clean = expected_coverage(post, thetas, xs, c.coverage_samples, grid, cov_stream);

  std::ostringstream rob;
  rob << detail::csv_header(hash);
  write_robustness_csv(rob, c, rows);
  write_text(p.robustness_csv(), rob.str());
  auto write_cov = [&](const std::string& id, const CoverageCurve& cc) {
    std::ostringstream os;
    os << detail::csv_header(hash);
    write_coverage_csv(os, cc);
    write_text(p.report_dir() / (id + ".csv"), os.str());
  };
  write_cov("coverage_clean", clean);
  for (const auto& r : rows) write_cov(r.coverage_id, r.coverage);

  LinePlot kl_plot{"Posterior KL under attack (" + std::string(to_string(c.task.name)) + ")",
                   "relative epsilon", "KL(q(.|x) || q(.|x'))", true, true, {}};
  std::vector<std::string> kinds;
  for (const auto& r : rows)
    if (std::find(kinds.begin(), kinds.end(), r.kind) == kinds.end()) kinds.push_back(r.kind);
  for (const auto& k : kinds) {
    PlotSeries med{k + " median", {}, {}, false}, lo{k + " q15", {}, {}, true}, hi{k + " q85", {}, {}, true};
    for (const auto& r : rows)
      if (r.kind == k) {
        med.x.push_back(r.rel_eps), med.y.push_back(r.kl.median);
        lo.x.push_back(r.rel_eps), lo.y.push_back(r.kl.q15);
        hi.x.push_back(r.rel_eps), hi.y.push_back(r.kl.q85);
      }
    kl_plot.series.push_back(med);
    kl_plot.series.push_back(lo);
    kl_plot.series.push_back(hi);
  }
  if (c.task.name == TaskName::gaussian_linear) {
    const double lmax = top_eigenpair(fim(LinearGaussianModel::from_task(c.task))).value;
    PlotSeries bound{"bound 0.5 lambda_max eps^2", {}, {}, true};
    for (const auto& r : rows)
      if (r.kind == kinds.front()) bound.x.push_back(r.rel_eps), bound.y.push_back(0.5 * lmax * r.abs_eps * r.abs_eps);
    kl_plot.series.push_back(bound);
  }
  write_text(p.report_dir() / "kl_vs_eps.svg", render_svg(kl_plot));

  LinePlot cov_plot{"Expected coverage", "nominal coverage", "empirical coverage", false, false, {}};
  cov_plot.series.push_back({"identity", {0.0, 1.0}, {0.0, 1.0}, true});
  cov_plot.series.push_back({"clean", clean.nominal, clean.empirical, false});
  for (const auto& r : rows)
    if (r.kind != "random_l2") cov_plot.series.push_back({r.coverage_id, r.coverage.nominal, r.coverage.empirical, false});
  write_text(p.report_dir() / "coverage.svg", render_svg(cov_plot));
  log << "evaluate: " << rows.size() << " attack sets, clean coverage@0.9=" << coverage_at(clean, 0.9) << "\n";
}

inline void cmd_sweep(const ExperimentConfig& c, const fs::path& out, bool force, std::ostream& log) {
  const OutputPaths p{out};
  OutputLock lock(out);
  const std::string hash = config_hash(c);
  detail::require_inputs({detail::stem_file(p.train_data(), ".json"), detail::stem_file(p.test_data(), ".json")},
                         "sweep");
  detail::refuse_overwrite({p.tradeoff_csv()}, force);
  const Dataset train = detail::load_checked(p.train_data(), hash).data;
  const Dataset test = detail::load_checked(p.test_data(), hash).data;
  if (c.n_points > test.size()) throw ConfigError("attack.n_points exceeds the held-out set size");
  AttackKind kind = AttackKind::pgd_kl_forward;
  for (AttackKind k : c.attack_kinds)
    if (k != AttackKind::random_l2) {
      kind = k;
      break;
    }
  const AttackConfig ac = attack_config(c, kind, absolute_tolerance(train, c.sweep_eps));
  const FimRegConfig reg{0.0, c.gamma, c.n_mc};
  std::vector<TradeoffRow> rows;
  std::visit(
      [&](const auto& e) {
        rows = tradeoff_sweep(e, train, test, c.sweep_betas, train_config(c), reg, ac, c.n_points, c.workers);
      },
      make_estimator(c, train));
  std::ostringstream os;
  os << detail::csv_header(hash);
  write_tradeoff_csv(os, rows);
  write_text(p.tradeoff_csv(), os.str());
  for (const auto& r : rows)
    log << "sweep: beta=" << r.beta << " accuracy=" << r.accuracy << " robustness=" << r.robustness
        << (r.diverged ? " (diverged)" : "") << "\n";
}

}  // namespace rnpe

#endif  // RNPE_PIPELINE_HPP
