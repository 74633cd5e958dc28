#include "tqlab/align.hpp"

#include <cmath>

namespace tqlab {
namespace {

void require_positive_beta(double beta) {
  if (!(beta > 0.0) || !std::isfinite(beta)) throw Error("beta must be positive and finite");
}

// Tilted policy shared by alignment and transfer. A constant tilt yields a
// bit-identical copy of the base distribution, which keeps identities such
// as "zero reward leaves the reference untouched" exact rather than
// approximate.
std::pair<TrajectoryPolicy, double> tilt(const TrajectoryPolicy& base,
                                         const std::vector<double>& tilts) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (double t : tilts) {
    if (!std::isfinite(t)) throw Error("tilt exponent is not finite");
    lo = std::min(lo, t);
    hi = std::max(hi, t);
  }
  if (lo == hi) {
    return {base, lo + base.log_total_mass()};
  }
  std::vector<double> logw(base.log_probs().begin(), base.log_probs().end());
  for (std::size_t i = 0; i < logw.size(); ++i) logw[i] += tilts[i];
  return TrajectoryPolicy::normalize_log_weights(base.space_ptr(), base.prompt_id(),
                                                 std::move(logw));
}

std::vector<double> reward_tilts(const TrajectoryReward& reward, const Prompt& prompt,
                                 const ResponseSpace& space, double beta) {
  std::vector<double> tilts(space.num_trajectories());
  for (int i = 0; i < space.num_trajectories(); ++i) {
    tilts[i] = reward.of_index(prompt, i) / beta;
  }
  return tilts;
}

}  // namespace

AlignedPolicy rlhf_optimal_policy(const TrajectoryPolicy& reference,
                                  const TrajectoryReward& reward, const Prompt& prompt,
                                  double beta) {
  require_positive_beta(beta);
  if (reference.prompt_id() != prompt.id) {
    throw Error("rlhf_optimal_policy: reference belongs to a different prompt");
  }
  auto [policy, log_z] = tilt(reference, reward_tilts(reward, prompt, reference.space(), beta));
  AlignedPolicy out{std::move(policy), reference, beta, log_z,
                    reference.prompt_id(), reward.id(), std::nullopt, std::nullopt};
  return out;
}

double kl_regularized_value(const TrajectoryPolicy& rho, const TrajectoryPolicy& reference,
                            const TrajectoryReward& reward, const Prompt& prompt, double beta) {
  require_positive_beta(beta);
  double expected = 0.0;
  for (int i = 0; i < rho.space().num_trajectories(); ++i) {
    const double p = rho.prob(i);
    if (p > 0.0) expected += p * reward.of_index(prompt, i);
  }
  return expected - beta * kl_trajectory(rho, reference);
}

ImplicitReward implicit_reward(const TrajectoryPolicy& rho, const TrajectoryPolicy& reference,
                               double beta) {
  require_positive_beta(beta);
  ImplicitReward out;
  out.beta = beta;
  out.values.assign(rho.space().num_trajectories(),
                    std::numeric_limits<double>::quiet_NaN());
  for (int i = 0; i < rho.space().num_trajectories(); ++i) {
    const double lp = rho.log_prob(i);
    if (lp == kNegInf) continue;  // outside rho's support: no evidence
    const double lq = reference.log_prob(i);
    if (lq == kNegInf) {
      throw AbsoluteContinuityError(
          "implicit_reward: rho puts mass where the reference has none (trajectory " +
          std::to_string(i) + ")");
    }
    out.values[i] = beta * (lp - lq);
  }
  return out;
}

AlignedPolicy transfer_policy(const AlignedPolicy& rho_bl, const TrajectoryReward& target,
                              const TrajectoryReward& baseline, const Prompt& prompt, double beta,
                              const TransferOptions& options) {
  require_positive_beta(beta);
  std::optional<std::string> note;
  if (beta != rho_bl.beta) {
    if (!options.allow_beta_mismatch) {
      throw Error("transfer_policy: beta " + std::to_string(beta) +
                  " differs from the baseline policy's beta " + std::to_string(rho_bl.beta) +
                  "; the transfer identity requires a shared beta");
    }
    note = "beta mismatch allowed for experimentation; transfer identities do not apply";
  }
  const ResponseSpace& space = rho_bl.policy.space();
  std::vector<double> tilts(space.num_trajectories());
  for (int i = 0; i < space.num_trajectories(); ++i) {
    tilts[i] = (target.of_index(prompt, i) - baseline.of_index(prompt, i)) / beta;
  }
  auto [policy, log_z_tilde] = tilt(rho_bl.policy, tilts);

  // Independent normalizer: Z_target / Z_baseline from the shared reference.
  const auto target_tilts = reward_tilts(target, prompt, space, beta);
  std::vector<double> logw(rho_bl.reference.log_probs().begin(),
                           rho_bl.reference.log_probs().end());
  for (std::size_t i = 0; i < logw.size(); ++i) logw[i] += target_tilts[i];
  const double log_z_target = log_sum_exp(logw);
  if (!note) {
    const double expected = log_z_target - rho_bl.log_partition;
    const double rel = std::abs(std::expm1(log_z_tilde - expected));
    if (rel > options.normalizer_rel_tol) {
      throw Error("transfer_policy: unnormalized mass " + std::to_string(std::exp(log_z_tilde)) +
                  " disagrees with Z_target/Z_baseline " + std::to_string(std::exp(expected)) +
                  " (relative error " + std::to_string(rel) + "); inputs are inconsistent");
    }
  }

  AlignedPolicy out{std::move(policy), rho_bl.reference, beta, log_z_target,
                    rho_bl.reference_id, target.id(), log_z_tilde, note};
  return out;
}

double importance_weight_exact(const AlignedPolicy& rho_r, const AlignedPolicy& rho_bl,
                               const DecodeState& state, TokenId candidate,
                               const Trajectory& traj) {
  const ResponseSpace& space = rho_r.policy.space();
  if (!space.vocab().contains(candidate)) {
    throw Error("importance_weight: candidate outside the vocabulary");
  }
  const int traj_node = space.node_at(traj.content());
  if (traj_node < 0) throw Error("importance_weight: trajectory outside the space");
  const int traj_index = space.trajectory_at(traj_node);

  if (candidate == space.vocab().eos) {
    // Conditioning on EOS pins the single completed trajectory for both
    // distributions; the ratio of point masses is 1.
    const int node = space.node_at(state.partial);
    if (node < 0 || space.trajectory_at(node) != traj_index) {
      throw Error("importance_weight: trajectory does not match the EOS-closed prefix");
    }
    if (rho_r.policy.log_prob(traj_index) == kNegInf ||
        rho_bl.policy.log_prob(traj_index) == kNegInf) {
      throw UnreachablePrefixError("importance_weight: conditioning on a zero-mass completion");
    }
    return 1.0;
  }

  std::vector<TokenId> prefix = state.partial;
  prefix.push_back(candidate);
  const int node = space.node_at(prefix);
  if (node < 0) throw Error("importance_weight: prefix+candidate outside the space");
  const double log_w = rho_r.policy.log_conditional(traj_index, node) -
                       rho_bl.policy.log_conditional(traj_index, node);
  return std::exp(log_w);
}

double log_unnormalized_transfer_weight(const TrajectoryReward& target,
                                        const TrajectoryReward& baseline, const Prompt& prompt,
                                        const Trajectory& traj, double beta) {
  require_positive_beta(beta);
  return (trajectory_return(target, prompt, traj) - trajectory_return(baseline, prompt, traj)) /
         beta;
}

SelfNormalizedWeights self_normalize_log_weights(std::vector<double> log_weights) {
  if (log_weights.empty()) throw Error("self-normalization over an empty batch");
  const double log_sum = log_sum_exp(log_weights);
  if (!std::isfinite(log_sum)) {
    throw Error("all importance weights vanished; the batch is degenerate");
  }
  SelfNormalizedWeights out;
  out.log_sum_unnormalized = log_sum;
  out.normalized.resize(log_weights.size());
  for (std::size_t i = 0; i < log_weights.size(); ++i) {
    out.normalized[i] = std::exp(log_weights[i] - log_sum);
  }
  return out;
}

}  // namespace tqlab
