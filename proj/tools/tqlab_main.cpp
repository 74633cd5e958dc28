// Command-line front end: run, sweep, verify, and oracle over a TOML config.
// Exit codes: 0 success, 1 usage or config error, 2 verification failure,
// 3 runtime error.
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "tqlab/harness.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::string> mode;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("config", args.config_path, "TOML config file")->required();
  cmd->add_option("--seed", args.seed, "override run.seed");
  cmd->add_option("--out-dir", args.out_dir, "override run.out_dir");
  cmd->add_option("--mode", args.mode, "override decoding.mode (exact or mc)")
      ->check(CLI::IsMember({"exact", "mc"}));
}

tqlab::ExperimentConfig load_with_overrides(const CommonArgs& args) {
  tqlab::ExperimentConfig cfg = tqlab::load_config(args.config_path);
  if (args.seed) cfg.seed = *args.seed;
  if (args.out_dir) cfg.out_dir = *args.out_dir;
  if (args.mode) {
    cfg.mode = *args.mode == "exact" ? tqlab::ScoreMode::exact : tqlab::ScoreMode::monte_carlo;
  }
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tqlab: exact decoding-time alignment laboratory"};
  app.require_subcommand(1);

  CommonArgs run_args;
  CLI::App* run_cmd = app.add_subcommand("run", "full decoder grid, reports under out_dir");
  add_common(run_cmd, run_args);

  CommonArgs sweep_args;
  std::string axis;
  CLI::App* sweep_cmd = app.add_subcommand("sweep", "one-axis grid with the others pinned");
  add_common(sweep_cmd, sweep_args);
  sweep_cmd->add_option("--axis", axis, "axis to sweep: alpha, beta, or k")
      ->required()
      ->check(CLI::IsMember({"alpha", "beta", "k"}));

  CommonArgs verify_args;
  int n_instances = 100;
  CLI::App* verify_cmd =
      app.add_subcommand("verify", "randomized bound and identity checks on seeded instances");
  add_common(verify_cmd, verify_args);
  verify_cmd->add_option("--instances", n_instances, "number of random instances")
      ->check(CLI::PositiveNumber);

  CommonArgs oracle_args;
  std::string what;
  CLI::App* oracle_cmd = app.add_subcommand("oracle", "exact table dumps to stdout");
  add_common(oracle_cmd, oracle_args);
  oracle_cmd->add_option("--what", what, "table: qstar, qpi, rho, or partition")
      ->required()
      ->check(CLI::IsMember({"qstar", "qpi", "rho", "partition"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (run_cmd->parsed()) {
      tqlab::ExperimentConfig cfg = load_with_overrides(run_args);
      tqlab::RunOutcome outcome = tqlab::run_experiment(cfg);
      std::cout << "run: " << outcome.rows << " rows written to " << outcome.out_dir << "\n";
      if (outcome.bound_failures > 0) {
        std::cerr << "run: " << outcome.bound_failures << " bound failures\n";
        return 2;
      }
      return 0;
    }
    if (sweep_cmd->parsed()) {
      tqlab::ExperimentConfig cfg = load_with_overrides(sweep_args);
      tqlab::RunOutcome outcome = tqlab::run_sweep(cfg, axis);
      std::cout << "sweep: " << outcome.rows << " rows written to " << outcome.out_dir << "\n";
      if (outcome.bound_failures > 0) {
        std::cerr << "sweep: " << outcome.bound_failures << " bound failures\n";
        return 2;
      }
      return 0;
    }
    if (verify_cmd->parsed()) {
      tqlab::ExperimentConfig cfg = load_with_overrides(verify_args);
      tqlab::VerifyOutcome outcome = tqlab::run_verify(cfg, n_instances, std::cout);
      return outcome.violations == 0 ? 0 : 2;
    }
    if (oracle_cmd->parsed()) {
      tqlab::ExperimentConfig cfg = load_with_overrides(oracle_args);
      tqlab::run_oracle(cfg, what, std::cout);
      return 0;
    }
  } catch (const tqlab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const tqlab::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 1;
}
