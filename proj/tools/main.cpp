#include "rnpe/pipeline.hpp"

#include <CLI11.hpp>

#include <malloc.h>

#include <iostream>

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
};

int run(const std::string& cmd, const Options& o) {
  rnpe::ExperimentConfig cfg = o.config.empty() ? rnpe::ExperimentConfig{} : rnpe::load_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  const rnpe::fs::path out = o.out.empty() ? rnpe::fs::path(cfg.output_dir) : rnpe::fs::path(o.out);
  std::cerr << "rnpe " << rnpe::kBuildId << " " << cmd << " config_hash=" << rnpe::config_hash(cfg)
            << " out=" << out.string() << "\n";
  if (cmd == "simulate") rnpe::cmd_simulate(cfg, out, o.force, std::cout);
  else if (cmd == "train") rnpe::cmd_train(cfg, out, o.force, std::cout);
  else if (cmd == "attack") rnpe::cmd_attack(cfg, out, o.force, std::cout);
  else if (cmd == "evaluate") rnpe::cmd_evaluate(cfg, out, o.force, std::cout);
  else if (cmd == "sweep") rnpe::cmd_sweep(cfg, out, o.force, std::cout);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);

  CLI::App app{"Adversarial robustness toolkit for neural posterior estimation"};
  app.set_version_flag("--version", std::string(rnpe::kBuildId));
  app.require_subcommand(1, 1);
  Options o;
  const std::pair<const char*, const char*> commands[] = {
      {"simulate", "simulate training and held-out datasets"},
      {"train", "train the configured estimator and defense"},
      {"attack", "attack the trained estimator on held-out points"},
      {"evaluate", "KL robustness, coverage curves and plots"},
      {"sweep", "robustness/accuracy trade-off over beta"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config, "configuration file")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "override the root seed");
    sub->add_option("--out", o.out, "output directory (overrides output_dir)");
    sub->add_flag("--force", o.force, "overwrite existing outputs");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }
  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    return run(cmd, o);
  } catch (const rnpe::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const rnpe::FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const rnpe::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
