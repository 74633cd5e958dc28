// Policies over a ResponseSpace, in two interchangeable representations:
// per-state token distributions and explicit trajectory distributions.
// Probabilities live in log space; exponentiation happens at output
// boundaries (sampling, reporting). Both types are immutable after
// construction and safe for concurrent reads.
#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "tqlab/mdp.hpp"
#include "tqlab/rng.hpp"

namespace tqlab {

using SpacePtr = std::shared_ptr<const ResponseSpace>;

// pi(. | state) for every decision node (depth < horizon). Rows a policy
// never defines (states unreachable under the distribution that induced it)
// raise UnreachablePrefixError on access.
class TokenPolicy {
 public:
  using Rows = std::vector<std::optional<std::vector<double>>>;

  // Rows hold probabilities; each defined row must sum to 1 within 1e-9.
  static TokenPolicy from_rows(SpacePtr space, std::string prompt_id, Rows probability_rows);
  // Rows hold log probabilities; same normalization contract.
  static TokenPolicy from_log_rows(SpacePtr space, std::string prompt_id, Rows log_rows);
  static TokenPolicy uniform(SpacePtr space, std::string prompt_id);
  // Independent Dirichlet(concentration) row per decision node.
  static TokenPolicy dirichlet(SpacePtr space, std::string prompt_id, RngStream& rng,
                               double concentration = 1.0);

  const ResponseSpace& space() const { return *space_; }
  const SpacePtr& space_ptr() const { return space_; }
  const std::string& prompt_id() const { return prompt_id_; }

  bool defined_at(int node) const;
  std::span<const double> log_row(int node) const;
  double log_prob(int node, TokenId t) const { return log_row(node)[t]; }
  double prob(int node, TokenId t) const { return std::exp(log_prob(node, t)); }

  // Inverse-CDF draw over ascending token index.
  TokenId sample(int node, RngStream& rng) const;
  // k most probable tokens, ties broken toward the lower token index.
  std::vector<TokenId> top_k(int node, int k) const;

 private:
  TokenPolicy(SpacePtr space, std::string prompt_id, Rows log_rows);

  SpacePtr space_;
  std::string prompt_id_;
  Rows log_rows_;
};

// Explicit distribution over the canonical trajectory enumeration, with the
// per-node prefix masses (log of the total probability of trajectories whose
// content extends the node's prefix) precomputed for conditional queries.
class TrajectoryPolicy {
 public:
  static TrajectoryPolicy from_probs(SpacePtr space, std::string prompt_id,
                                     std::vector<double> probs);
  // Must sum to 1 within 1e-9 (in probability space).
  static TrajectoryPolicy from_log_probs(SpacePtr space, std::string prompt_id,
                                         std::vector<double> log_probs);
  // Normalizes arbitrary finite log weights; returns the policy and the log
  // normalizer. At least one weight must exceed -inf.
  static std::pair<TrajectoryPolicy, double> normalize_log_weights(SpacePtr space,
                                                                   std::string prompt_id,
                                                                   std::vector<double> log_weights);

  const ResponseSpace& space() const { return *space_; }
  const SpacePtr& space_ptr() const { return space_; }
  const std::string& prompt_id() const { return prompt_id_; }

  std::span<const double> log_probs() const { return log_probs_; }
  double log_prob(int traj) const { return log_probs_[traj]; }
  double prob(int traj) const { return std::exp(log_probs_[traj]); }

  double log_prefix_mass(int node) const { return log_prefix_mass_[node]; }
  // log rho(traj | prefix at node); traj's content must extend the prefix.
  double log_conditional(int traj, int node) const;
  // Total mass as stored (log of the sum over all trajectories, ~0).
  double log_total_mass() const { return log_prefix_mass_[0]; }

  // One conditional decode step from a node with positive mass: EOS with the
  // node's own-stop conditional, else a child token. Inverse-CDF over
  // ascending token index.
  TokenId sample_next(int node, RngStream& rng) const;

  bool operator==(const TrajectoryPolicy& o) const { return log_probs_ == o.log_probs_; }

 private:
  TrajectoryPolicy(SpacePtr space, std::string prompt_id, std::vector<double> log_probs);

  SpacePtr space_;
  std::string prompt_id_;
  std::vector<double> log_probs_;
  std::vector<double> log_prefix_mass_;
};

// Product of per-step choice probabilities; the forced EOS contributes no
// factor. Throws UnreachablePrefixError if the walk crosses an undefined row.
double trajectory_log_prob(const TokenPolicy& policy, const Trajectory& traj);
inline double trajectory_prob(const TokenPolicy& policy, const Trajectory& traj) {
  return std::exp(trajectory_log_prob(policy, traj));
}

// Pushforward of a token policy onto full trajectories.
TrajectoryPolicy to_trajectory_policy(const TokenPolicy& policy);

// Per-state conditionals of a trajectory distribution. Zero-mass prefixes
// yield undefined rows.
TokenPolicy induce_token_policy(const TrajectoryPolicy& rho);

// State-level wrappers used by callers that hold DecodeStates.
TokenId sample_token(const TokenPolicy& policy, const DecodeState& state, RngStream& rng);
std::vector<TokenId> top_k_tokens(const TokenPolicy& policy, const DecodeState& state, int k);

// KL(p || q) over trajectories; 0 log 0 = 0; throws AbsoluteContinuityError
// where p > 0 and q == 0.
double kl_trajectory(const TrajectoryPolicy& p, const TrajectoryPolicy& q);

// Same, over one pair of token log-prob rows.
double kl_token_row(std::span<const double> log_p, std::span<const double> log_q);

}  // namespace tqlab
