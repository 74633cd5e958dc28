// KL-regularized alignment in closed form and reward transfer between
// aligned policies. The aligned policy is the exponential tilt of its
// reference by reward/beta, normalized by the partition value Z; transfer
// re-tilts an existing aligned policy from its baseline reward to a target
// reward without touching the reference, and the unnormalized transferred
// mass must sum to Z_target / Z_baseline (checked).
#pragma once

#include <optional>

#include "tqlab/value.hpp"

namespace tqlab {

struct AlignedPolicy {
  TrajectoryPolicy policy;
  TrajectoryPolicy reference;  // the policy it was tilted from
  double beta = 0.0;
  double log_partition = 0.0;  // log Z with respect to the reference
  std::string reference_id;
  std::string reward_id;
  // Set by transfer_policy: log of the unnormalized transferred mass.
  std::optional<double> log_transfer_normalizer;
  std::optional<std::string> note;
};

// Closed-form maximizer of E[reward] - beta * KL(. || reference).
// A constant tilt (reward/beta identical across trajectories) short-circuits
// to a bit-identical copy of the reference.
AlignedPolicy rlhf_optimal_policy(const TrajectoryPolicy& reference,
                                  const TrajectoryReward& reward, const Prompt& prompt,
                                  double beta);

// E_rho[reward] - beta * KL(rho || reference).
double kl_regularized_value(const TrajectoryPolicy& rho, const TrajectoryPolicy& reference,
                            const TrajectoryReward& reward, const Prompt& prompt, double beta);

// beta * log(rho / reference) per trajectory; recovers the aligning reward
// up to one additive constant (beta * log Z), which stays unknown here.
struct ImplicitReward {
  std::vector<double> values;  // aligned to the enumeration; NaN off rho's support
  double beta = 0.0;
  bool up_to_additive_constant = true;
};
ImplicitReward implicit_reward(const TrajectoryPolicy& rho, const TrajectoryPolicy& reference,
                               double beta);

struct TransferOptions {
  bool allow_beta_mismatch = false;
  double normalizer_rel_tol = 1e-8;
};

// Re-tilt baseline-aligned rho_bl to the target reward:
// rho_target ~ rho_bl * exp((target - baseline) / beta). The independent
// normalizer check compares against Z_target / Z_baseline computed from the
// reference; disagreement beyond tolerance signals inconsistent inputs.
AlignedPolicy transfer_policy(const AlignedPolicy& rho_bl, const TrajectoryReward& target,
                              const TrajectoryReward& baseline, const Prompt& prompt, double beta,
                              const TransferOptions& options = {});

// Exact conditional importance weight
// rho_r(traj | prefix+candidate) / rho_bl(traj | prefix+candidate).
double importance_weight_exact(const AlignedPolicy& rho_r, const AlignedPolicy& rho_bl,
                               const DecodeState& state, TokenId candidate,
                               const Trajectory& traj);

// log of the unnormalized weight exp((target - baseline)/beta) on one full
// trajectory; the Monte Carlo path self-normalizes these over a batch.
double log_unnormalized_transfer_weight(const TrajectoryReward& target,
                                        const TrajectoryReward& baseline, const Prompt& prompt,
                                        const Trajectory& traj, double beta);

struct SelfNormalizedWeights {
  std::vector<double> normalized;   // sums to 1
  double log_sum_unnormalized = 0;  // log of the batch normalizer
};
SelfNormalizedWeights self_normalize_log_weights(std::vector<double> log_weights);

}  // namespace tqlab
