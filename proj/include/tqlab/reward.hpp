// Trajectory-level rewards and the preference pipeline. A reward scores the
// EOS-free response content given a prompt and is bounded in [0, r_max]
// (asserted over the full enumeration at construction). Token-level reward
// is zero everywhere except the EOS step, which pays the content score; the
// per-step sum therefore reproduces the trajectory reward exactly. Forced
// terminations normally score the truncated content in full; the "zero"
// forced mode gates them to zero instead.
#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tqlab/policy.hpp"

namespace tqlab {

enum class ForcedRewardMode { full, zero };

class TrajectoryReward {
 public:
  // Empty shell; usable objects come from the factories below.
  TrajectoryReward() = default;

  // value = scale * sum(weights[token] for token in content) + offset,
  // prompt-independent. weights has one entry per vocabulary token.
  static TrajectoryReward token_weights(SpacePtr space, std::vector<double> weights,
                                        double scale, double offset, double r_max,
                                        std::string id,
                                        ForcedRewardMode forced = ForcedRewardMode::full);
  // Explicit per-prompt tables aligned to the canonical trajectory order.
  static TrajectoryReward table(SpacePtr space,
                                std::map<std::string, std::vector<double>> values_by_prompt,
                                double r_max, std::string id,
                                ForcedRewardMode forced = ForcedRewardMode::full);

  const ResponseSpace& space() const { return *space_; }
  const SpacePtr& space_ptr() const { return space_; }
  const std::string& id() const { return id_; }
  double r_max() const { return r_max_; }
  ForcedRewardMode forced_mode() const { return forced_; }

  // Score of a full response identified by its content; forcedness is
  // implied by content length == horizon.
  double of_response(const Prompt& prompt, std::span<const TokenId> content) const;
  double of(const Prompt& prompt, const Trajectory& traj) const {
    return of_response(prompt, traj.content());
  }
  // Score by canonical trajectory index.
  double of_index(const Prompt& prompt, int traj) const;

  // Free-form provenance (fit parameters, rescale transform, ...).
  const std::map<std::string, std::string>& metadata() const { return metadata_; }
  void set_metadata(std::string key, std::string value) {
    metadata_[std::move(key)] = std::move(value);
  }

 private:
  void check_bounds(const std::vector<std::string>& prompt_ids) const;
  double raw_of_index(const std::string& prompt_id, int traj) const;

  SpacePtr space_;
  std::string id_;
  double r_max_ = 1.0;
  ForcedRewardMode forced_ = ForcedRewardMode::full;
  // Exactly one representation is active.
  std::optional<std::vector<double>> weights_;
  double scale_ = 1.0;
  double offset_ = 0.0;
  std::map<std::string, std::vector<double>> values_by_prompt_;
  std::map<std::string, std::string> metadata_;
};

// R(prefix, token): zero unless token is EOS; the EOS step pays the content
// score (gated when the step is the forced one at the horizon).
double token_reward(const TrajectoryReward& reward, const Prompt& prompt,
                    std::span<const TokenId> prefix, TokenId token);

// The trajectory's scalar return (equals the sum of token_reward along it).
double trajectory_return(const TrajectoryReward& reward, const Prompt& prompt,
                         const Trajectory& traj);

struct PreferenceRecord {
  std::string prompt_id;
  std::vector<TokenId> winner;  // response content, EOS-free
  std::vector<TokenId> loser;
};

struct PreferenceDataset {
  std::vector<PreferenceRecord> records;
  // Throws unless every record references two distinct enumerable responses.
  void validate(const ResponseSpace& space) const;
};

// Tabular reward parameters: one value per (prompt, canonical trajectory).
struct TabularRewardParams {
  std::map<std::string, std::vector<double>> values;

  double& at(const std::string& prompt_id, int traj) { return values.at(prompt_id)[traj]; }
  double at(const std::string& prompt_id, int traj) const { return values.at(prompt_id)[traj]; }
  static TabularRewardParams zeros(const ResponseSpace& space,
                                   const std::vector<std::string>& prompt_ids);
};

// P(first beats second) under the Bradley-Terry model for this reward.
double bt_preference_prob(const TrajectoryReward& reward, const Prompt& prompt,
                          std::span<const TokenId> first, std::span<const TokenId> second);

// Mean negative log-likelihood of the dataset under tabular parameters, and
// its exact gradient with respect to every table entry.
struct BtObjective {
  double loss = 0.0;
  TabularRewardParams gradient;
};
BtObjective bt_nll_objective(const ResponseSpace& space, const TabularRewardParams& params,
                             const PreferenceDataset& dataset);
double bt_nll_loss(const ResponseSpace& space, const TabularRewardParams& params,
                   const PreferenceDataset& dataset);

struct BtFitResult {
  TabularRewardParams raw;      // fitted values, zero-initialized gauge
  TrajectoryReward reward;      // raw values affinely rescaled into [0, r_max]
  double rescale_scale = 1.0;   // reward = raw * scale + offset
  double rescale_offset = 0.0;
  double final_loss = 0.0;
};

// Full-batch gradient descent from zero initialization.
BtFitResult fit_reward_bt(SpacePtr space, const std::vector<std::string>& prompt_ids,
                          const PreferenceDataset& dataset, int steps, double learning_rate,
                          double r_max, std::uint64_t seed);

// Affine map of the reward's enumerated range onto [lo, hi]; a constant
// reward maps to the midpoint. Returns a table reward; the transform is
// recorded in its metadata.
TrajectoryReward rescale_reward(const TrajectoryReward& reward, const std::vector<Prompt>& prompts,
                                double lo, double hi);

// Synthetic preference data over a star comparison design: every trajectory
// is compared against the first one in canonical order. The ground-truth
// reward is drawn so that each pair's expected win count lands exactly on an
// integer, and the dataset realizes those counts; the maximum-likelihood
// reward differences then equal the truth exactly, so fitting quality
// measures the optimizer rather than Bernoulli noise. Records are split
// evenly across prompts, then across pairs.
struct StarDatasetResult {
  PreferenceDataset dataset;
  TrajectoryReward truth;
};
StarDatasetResult synthetic_star_dataset(SpacePtr space, const std::vector<Prompt>& prompts,
                                         int num_records, double r_max, std::uint64_t seed);

}  // namespace tqlab
