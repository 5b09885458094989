#ifndef RNPE_CONFIG_HPP
#define RNPE_CONFIG_HPP

#include "rnpe/attacks.hpp"
#include "rnpe/io.hpp"
#include "rnpe/training.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace rnpe {

enum class DefenseKind { none, fim, trades, adversarial, noise };

inline std::string_view to_string(DefenseKind d) {
  switch (d) {
    case DefenseKind::none: return "none";
    case DefenseKind::fim: return "fim";
    case DefenseKind::trades: return "trades";
    case DefenseKind::adversarial: return "adversarial";
    case DefenseKind::noise: return "noise";
  }
  return "?";
}

inline DefenseKind defense_from_string(std::string_view s) {
  for (DefenseKind d : {DefenseKind::none, DefenseKind::fim, DefenseKind::trades, DefenseKind::adversarial,
                        DefenseKind::noise})
    if (to_string(d) == s) return d;
  throw ConfigError("unknown defense kind '" + std::string(s) + "'");
}

struct ExperimentConfig {
  TaskSpec task = make_task(TaskName::gaussian_linear);
  std::uint64_t seed = 0;
  std::string output_dir = "rnpe_out";
  unsigned workers = 1;

  Eigen::Index n_train = 10000;
  Eigen::Index n_test = 300;

  std::string estimator = "mlp";  // mlp | glm
  std::vector<int> hidden{100, 100};
  std::string features = "identity";
  int feature_dim = 32;
  double bandwidth = 1.0;

  DefenseKind defense = DefenseKind::none;
  double beta = -1.0;  // < 0: per-task default (fim) or 1 (trades)
  double gamma = 0.85;
  int n_mc = 5;
  double defense_eps = 0.5;  // relative to the prior-predictive std
  int defense_steps = 20;

  TrainConfig train;

  std::vector<AttackKind> attack_kinds{AttackKind::pgd_kl_forward};
  std::vector<double> attack_eps = relative_eps_grid();
  int attack_steps = 200;
  double attack_step_size = 0.0;
  Eigen::Index n_points = 300;
  bool monte_carlo = false;
  int mc_per_step = 5;
  int mc_final = 256;
  int mmd_samples = 10;
  bool clamp = true;

  Eigen::Index coverage_samples = 1000;
  int coverage_levels = 21;

  std::vector<double> sweep_betas{0.0, 1e-3, 1e-2, 1e-1, 1.0, 10.0};
  double sweep_eps = 0.5;

  double effective_beta() const {
    if (beta >= 0.0) return beta;
    if (defense == DefenseKind::fim) return default_fim_beta(task.name);
    if (defense == DefenseKind::trades) return 1.0;
    return 0.0;
  }

  void validate() const {
    rnpe::validate(task);
    train.validate();
    if (n_train < 2 || n_test < 1) throw ConfigError("simulate: n_train must be >= 2 and n_test >= 1");
    if (estimator != "mlp" && estimator != "glm") throw ConfigError("estimator.kind must be mlp or glm");
    if (features != "identity" && features != "random_fourier")
      throw ConfigError("estimator.features must be identity or random_fourier");
    if (feature_dim < 1 || !(bandwidth > 0.0)) throw ConfigError("estimator: feature_dim and bandwidth must be positive");
    for (int h : hidden)
      if (h < 1) throw ConfigError("estimator.hidden: widths must be positive");
    if (!(gamma > 0.0 && gamma <= 1.0) || n_mc < 1) throw ConfigError("defense: invalid gamma or n_mc");
    if (!(defense_eps > 0.0) || defense_steps < 1) throw ConfigError("defense: eps and steps must be positive");
    if (attack_kinds.empty()) throw ConfigError("attack.kinds is empty");
    if (attack_eps.empty()) throw ConfigError("attack.eps is empty");
    for (double e : attack_eps)
      if (!(e > 0.0)) throw ConfigError("attack.eps: every value must be positive");
    if (attack_steps < 1 || n_points < 0) throw ConfigError("attack: steps >= 1 and n_points >= 0 required");
    if (mc_per_step < 1 || mc_final < 1 || mmd_samples < 2 || mmd_samples % 2)
      throw ConfigError("attack: invalid Monte Carlo budgets");
    if (coverage_samples < 100 || coverage_levels < 2) throw ConfigError("evaluate: n_samples >= 100, levels >= 2");
    if (sweep_betas.empty()) throw ConfigError("sweep.betas is empty");
    for (double b : sweep_betas)
      if (!(b >= 0.0)) throw ConfigError("sweep.betas: values must be >= 0");
    if (!(sweep_eps > 0.0)) throw ConfigError("sweep.eps must be positive");
  }
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

template <class I>
I parse_int(const std::string& key, const std::string& v) {
  I out{};
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

inline std::vector<double> parse_doubles(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const auto& s : split_list(v)) out.push_back(parse_double(key, s));
  return out;
}

inline Vector parse_vector(const std::string& key, const std::string& v) {
  const auto d = parse_doubles(key, v);
  return Eigen::Map<const Vector>(d.data(), static_cast<Eigen::Index>(d.size()));
}

}  // namespace detail

/// Flattens `[section] key = value` and dotted `section.key = value` lines
/// into one map; repeated keys are errors.
inline std::map<std::string, std::string> read_config_entries(std::istream& in, const std::string& origin) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(origin + ": line " + std::to_string(e.line()) + ": " + e.message());
  }
  std::map<std::string, std::string> out;
  auto put = [&](const std::string& key, const std::string& value) {
    if (!out.emplace(key, detail::trim(value)).second) throw ConfigError(origin + ": duplicate key '" + key + "'");
  };
  for (const auto& [name, node] : tree) {
    if (node.empty()) {
      put(name, node.data());
      continue;
    }
    for (const auto& [key, leaf] : node) put(name + "." + key, leaf.data());
  }
  return out;
}

/// Applies the key/value entries on top of the defaults. The task key is
/// applied first so task.* overrides edit the chosen task.
inline ExperimentConfig config_from_entries(const std::map<std::string, std::string>& entries) {
  using namespace detail;
  ExperimentConfig c;
  if (auto it = entries.find("task"); it != entries.end()) c.task = make_task(task_from_string(it->second));
  using Setter = std::function<void(const std::string&, const std::string&)>;
  const std::map<std::string, Setter> setters{
      {"task", [](auto&, auto&) {}},
      {"seed", [&](auto& k, auto& v) { c.seed = parse_int<std::uint64_t>(k, v); }},
      {"output_dir", [&](auto&, auto& v) { c.output_dir = v; }},
      {"workers", [&](auto& k, auto& v) { c.workers = parse_int<unsigned>(k, v); }},
      {"task.noise_sigma", [&](auto& k, auto& v) { c.task.noise_sigma = parse_double(k, v); }},
      {"task.t_end", [&](auto& k, auto& v) { c.task.t_end = parse_double(k, v); }},
      {"task.substeps", [&](auto& k, auto& v) { c.task.substeps = parse_int<int>(k, v); }},
      {"task.initial_state", [&](auto& k, auto& v) { c.task.initial_state = parse_vector(k, v); }},
      {"task.prior_low", [&](auto& k, auto& v) { c.task.prior.transform_low = parse_vector(k, v); }},
      {"task.prior_high", [&](auto& k, auto& v) { c.task.prior.transform_high = parse_vector(k, v); }},
      {"task.task_seed",
       [&](auto& k, auto& v) {
         c.task.task_seed = parse_int<std::uint64_t>(k, v);
         if (c.task.name == TaskName::gaussian_linear)
           c.task.linear_diag = gaussian_linear_diag(c.task.task_seed, c.task.theta_dim);
       }},
      {"simulate.n_train", [&](auto& k, auto& v) { c.n_train = parse_int<Eigen::Index>(k, v); }},
      {"simulate.n_test", [&](auto& k, auto& v) { c.n_test = parse_int<Eigen::Index>(k, v); }},
      {"estimator.kind", [&](auto&, auto& v) { c.estimator = v; }},
      {"estimator.hidden",
       [&](auto& k, auto& v) {
         c.hidden.clear();
         for (const auto& s : split_list(v)) c.hidden.push_back(parse_int<int>(k, s));
       }},
      {"estimator.features", [&](auto&, auto& v) { c.features = v; }},
      {"estimator.feature_dim", [&](auto& k, auto& v) { c.feature_dim = parse_int<int>(k, v); }},
      {"estimator.bandwidth", [&](auto& k, auto& v) { c.bandwidth = parse_double(k, v); }},
      {"defense.kind", [&](auto&, auto& v) { c.defense = defense_from_string(v); }},
      {"defense.beta", [&](auto& k, auto& v) { c.beta = parse_double(k, v); }},
      {"defense.gamma", [&](auto& k, auto& v) { c.gamma = parse_double(k, v); }},
      {"defense.n_mc", [&](auto& k, auto& v) { c.n_mc = parse_int<int>(k, v); }},
      {"defense.eps", [&](auto& k, auto& v) { c.defense_eps = parse_double(k, v); }},
      {"defense.steps", [&](auto& k, auto& v) { c.defense_steps = parse_int<int>(k, v); }},
      {"train.batch_size", [&](auto& k, auto& v) { c.train.batch_size = parse_int<int>(k, v); }},
      {"train.max_epochs", [&](auto& k, auto& v) { c.train.max_epochs = parse_int<int>(k, v); }},
      {"train.lr", [&](auto& k, auto& v) { c.train.lr = parse_double(k, v); }},
      {"train.val_size", [&](auto& k, auto& v) { c.train.val_size = parse_int<int>(k, v); }},
      {"train.patience", [&](auto& k, auto& v) { c.train.patience = parse_int<int>(k, v); }},
      {"train.lr_fallbacks", [&](auto& k, auto& v) { c.train.lr_fallbacks = parse_int<int>(k, v); }},
      {"attack.kinds",
       [&](auto&, auto& v) {
         c.attack_kinds.clear();
         for (const auto& s : split_list(v)) c.attack_kinds.push_back(attack_kind_from_string(s));
       }},
      {"attack.eps", [&](auto& k, auto& v) { c.attack_eps = parse_doubles(k, v); }},
      {"attack.steps", [&](auto& k, auto& v) { c.attack_steps = parse_int<int>(k, v); }},
      {"attack.step_size", [&](auto& k, auto& v) { c.attack_step_size = parse_double(k, v); }},
      {"attack.n_points", [&](auto& k, auto& v) { c.n_points = parse_int<Eigen::Index>(k, v); }},
      {"attack.monte_carlo", [&](auto& k, auto& v) { c.monte_carlo = parse_bool(k, v); }},
      {"attack.mc_per_step", [&](auto& k, auto& v) { c.mc_per_step = parse_int<int>(k, v); }},
      {"attack.mc_final", [&](auto& k, auto& v) { c.mc_final = parse_int<int>(k, v); }},
      {"attack.mmd_samples", [&](auto& k, auto& v) { c.mmd_samples = parse_int<int>(k, v); }},
      {"attack.clamp", [&](auto& k, auto& v) { c.clamp = parse_bool(k, v); }},
      {"evaluate.n_samples", [&](auto& k, auto& v) { c.coverage_samples = parse_int<Eigen::Index>(k, v); }},
      {"evaluate.levels", [&](auto& k, auto& v) { c.coverage_levels = parse_int<int>(k, v); }},
      {"sweep.betas", [&](auto& k, auto& v) { c.sweep_betas = parse_doubles(k, v); }},
      {"sweep.eps", [&](auto& k, auto& v) { c.sweep_eps = parse_double(k, v); }},
  };
  for (const auto& [k, v] : entries) {
    const auto it = setters.find(k);
    if (it == setters.end()) throw ConfigError("unknown config key '" + k + "'");
    it->second(k, v);
  }
  c.validate();
  return c;
}

inline ExperimentConfig parse_config(const std::string& text, const std::string& origin = "<config>") {
  std::istringstream in(text);
  return config_from_entries(read_config_entries(in, origin));
}

inline ExperimentConfig load_config(const fs::path& p) {
  std::string text;
  try {
    text = read_text(p);
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
  return parse_config(text, p.string());
}

/// Every setting that influences results; output_dir and workers are left out.
inline json config_json(const ExperimentConfig& c) {
  json j;
  j["task"] = task_json(c.task);
  j["seed"] = c.seed;
  j["simulate"] = {{"n_train", c.n_train}, {"n_test", c.n_test}};
  j["estimator"] = {{"kind", c.estimator}, {"hidden", c.hidden}, {"features", c.features},
                    {"feature_dim", c.feature_dim}, {"bandwidth", c.bandwidth}};
  j["defense"] = {{"kind", std::string(to_string(c.defense))}, {"beta", c.effective_beta()}, {"gamma", c.gamma},
                  {"n_mc", c.n_mc}, {"eps", c.defense_eps}, {"steps", c.defense_steps}};
  j["train"] = {{"batch_size", c.train.batch_size}, {"max_epochs", c.train.max_epochs}, {"lr", c.train.lr},
                {"val_size", c.train.val_size}, {"patience", c.train.patience},
                {"lr_fallbacks", c.train.lr_fallbacks}};
  std::vector<std::string> kinds;
  for (auto k : c.attack_kinds) kinds.emplace_back(to_string(k));
  j["attack"] = {{"kinds", kinds}, {"eps", c.attack_eps}, {"steps", c.attack_steps},
                 {"step_size", c.attack_step_size}, {"n_points", c.n_points}, {"monte_carlo", c.monte_carlo},
                 {"mc_per_step", c.mc_per_step}, {"mc_final", c.mc_final}, {"mmd_samples", c.mmd_samples},
                 {"clamp", c.clamp}};
  j["evaluate"] = {{"n_samples", c.coverage_samples}, {"levels", c.coverage_levels}};
  j["sweep"] = {{"betas", c.sweep_betas}, {"eps", c.sweep_eps}};
  return j;
}

inline std::string config_hash(const ExperimentConfig& c) { return hex64(fnv1a(config_json(c).dump())); }

/// Seed for a named pipeline stage, derived from the root seed.
inline std::uint64_t stage_seed(const ExperimentConfig& c, std::string_view stage) {
  return RandomStream(c.seed).derive(stage).next_u64();
}

}  // namespace rnpe

#endif  // RNPE_CONFIG_HPP
