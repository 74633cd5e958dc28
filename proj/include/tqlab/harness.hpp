// Experiment orchestration: config loading and validation, the run/sweep
// drivers and their JSONL/CSV outputs, the randomized verification suite,
// and the oracle table dumps. Outputs carry a schema version and a config
// fingerprint and contain nothing nondeterministic, so identical config and
// seed reproduce identical bytes.
#pragma once

#include <iosfwd>
#include <optional>

#include "tqlab/instance.hpp"
#include "tqlab/metrics.hpp"

namespace tqlab {

inline constexpr int kSchemaVersion = 1;

struct SftSpec {
  enum class Kind { uniform, dirichlet, table };
  Kind kind = Kind::uniform;
  double concentration = 1.0;
  // table kind: per prompt, one probability row per decision node.
  std::map<std::string, std::vector<std::vector<double>>> rows;
};

struct RewardSpec {
  enum class Kind { token_weights, table, bt_fit };
  Kind kind = Kind::token_weights;
  std::string id = "reward";
  // token_weights
  std::vector<double> weights;
  double scale = 1.0;
  double offset = 0.0;
  // table: per prompt, one value per canonical trajectory
  std::map<std::string, std::vector<double>> values;
  // bt_fit: fit to a synthetic star-design preference dataset
  int bt_records = 5000;
  int bt_steps = 6000;
  double bt_learning_rate = 4.0;
};

struct InstanceConfig {
  std::string id = "instance";
  std::vector<std::string> vocab;  // content token names; EOS is appended
  int horizon = 3;
  double r_max = 1.0;
  ForcedRewardMode forced = ForcedRewardMode::full;
  std::vector<Prompt> prompts;
  SftSpec sft;
  RewardSpec reward;
  std::optional<RewardSpec> baseline;
};

struct ExperimentConfig {
  InstanceConfig instance;
  std::vector<double> betas{0.5};
  std::vector<double> alphas{1.0};
  std::vector<int> ks{10};
  std::vector<DecoderKind> decoders{DecoderKind::sft,    DecoderKind::best_of_n,
                                    DecoderKind::args,   DecoderKind::cd,
                                    DecoderKind::tq_direct, DecoderKind::tq_indirect};
  ScoreMode mode = ScoreMode::exact;
  int n_rollouts = 64;
  bool greedy = true;
  int n_best = 8;
  double args_weight = 1.0;
  CandidateSource candidate_source = CandidateSource::baseline;
  AnchorChoice anchor = AnchorChoice::target;
  std::uint64_t seed = 0;
  std::string out_dir = "out";
};

// Parses and validates; unknown fields, type mismatches, and bad values
// throw ConfigError naming the field and line.
ExperimentConfig load_config(const std::string& path);
ExperimentConfig parse_config(std::string_view text, const std::string& origin);

// Node budget for response-space enumeration; the TQLAB_ENUM_CAP environment
// variable overrides the default.
std::size_t enum_cap_from_env();

// Materializes the configured instance (policies, rewards, any BT fit).
Instance build_instance(const ExperimentConfig& config);

// Hash of every semantic config field, recorded in reports.
std::string config_fingerprint(const ExperimentConfig& config);

struct RunOutcome {
  int rows = 0;
  int bound_failures = 0;
  std::string out_dir;
};

// Full grid: every prompt x beta x alpha x k x decoder. Writes rows.jsonl,
// summary.csv, tradeoff.csv, report.json under config.out_dir.
RunOutcome run_experiment(const ExperimentConfig& config);

// Grid over one axis ("alpha", "beta", or "k") with the other axes pinned to
// their first configured value. Writes sweep_<axis>.csv.
RunOutcome run_sweep(const ExperimentConfig& config, const std::string& axis);

struct VerifyOutcome {
  int instances = 0;
  int checks = 0;
  int violations = 0;
  double worst_slack_gap = std::numeric_limits<double>::infinity();
  double worst_slack_kl = std::numeric_limits<double>::infinity();
  double worst_transfer_normalizer_rel_err = 0.0;
  double worst_transfer_pointwise_err = 0.0;
  double worst_objective_slack = std::numeric_limits<double>::infinity();
};

// Randomized verification: n seeded instances (vocab size 2..6 with EOS,
// horizon 1..5, Dirichlet references, random rewards), beta and alpha cycled
// over {0.1, 0.5, 1} x {0.5, 1, 2}. Checks both suboptimality bounds, the
// transfer normalizer and pointwise identities, and per-step objective
// optimality against seeded competitor distributions. Writes verify.csv and
// prints one line per instance plus the worst slacks.
VerifyOutcome run_verify(const ExperimentConfig& config, int n_instances, std::ostream& log);

// Exact table dumps for the configured instance: "qstar", "qpi", "rho"
// (reference and aligned, at the first configured beta), or "partition"
// (log Z per beta in the configured list).
void run_oracle(const ExperimentConfig& config, const std::string& what, std::ostream& out);

}  // namespace tqlab
