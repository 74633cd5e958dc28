// Independent reference computations for the tests. These deliberately avoid
// the library's recursions: expectations and optima are taken by direct
// summation over the trajectory enumeration, probabilities by multiplying
// per-step choices along the walk, gradients by finite differences. Slower
// and simpler than the production paths, and wrong in different ways.
#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "tqlab/align.hpp"
#include "tqlab/instance.hpp"

namespace oracle {

using namespace tqlab;

// Number of responses of a (content vocabulary size, horizon) space: one per
// content string of length < horizon plus the forced full-length ones.
inline long long count_trajectories(int content_tokens, int horizon) {
  long long total = 0;
  long long pow = 1;
  for (int len = 0; len <= horizon; ++len) {
    total += pow;
    pow *= content_tokens;
  }
  return total;
}

// Does the trajectory's content extend (or equal) the given prefix?
inline bool extends(const Trajectory& traj, std::span<const TokenId> prefix) {
  auto content = traj.content();
  if (content.size() < prefix.size()) return false;
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    if (content[i] != prefix[i]) return false;
  }
  return true;
}

// Trajectory probability as the plain product of per-step token choices.
inline double walk_prob(const TokenPolicy& pi, const Trajectory& traj) {
  const ResponseSpace& space = pi.space();
  double p = 1.0;
  int node = space.root();
  auto content = traj.content();
  for (TokenId t : content) {
    p *= pi.prob(node, t);
    node = space.child(node, t);
  }
  if (!traj.forced_eos) p *= pi.prob(node, space.vocab().eos);
  return p;
}

// Gibbs tilt by direct exponentiation and naive normalization.
inline std::vector<double> gibbs(const std::vector<double>& probs,
                                 const std::vector<double>& rewards, double beta) {
  std::vector<double> out(probs.size());
  double z = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    out[i] = probs[i] * std::exp(rewards[i] / beta);
    z += out[i];
  }
  for (double& x : out) x /= z;
  return out;
}

// Best return over trajectories consistent with committing `token` after
// `prefix`. EOS commits to stopping at the prefix itself.
inline double best_return_after(const ResponseSpace& space, const TrajectoryReward& reward,
                                const Prompt& prompt, std::vector<TokenId> prefix, TokenId token) {
  if (token == space.vocab().eos) {
    return reward.of_response(prompt, prefix);
  }
  prefix.push_back(token);
  double best = -std::numeric_limits<double>::infinity();
  for (const Trajectory& traj : space.trajectories()) {
    if (extends(traj, prefix)) best = std::max(best, reward.of(prompt, traj));
  }
  return best;
}

// Expected return after committing `token` and then following `pi`, as a sum
// of walk probabilities times rewards over the consistent completions.
inline double expected_return_after(const TokenPolicy& pi, const TrajectoryReward& reward,
                                    const Prompt& prompt, std::vector<TokenId> prefix,
                                    TokenId token) {
  const ResponseSpace& space = pi.space();
  if (token == space.vocab().eos) {
    return reward.of_response(prompt, prefix);
  }
  prefix.push_back(token);
  double total = 0.0;
  for (const Trajectory& traj : space.trajectories()) {
    if (!extends(traj, prefix)) continue;
    auto content = traj.content();
    double p = 1.0;
    int node = space.node_at(std::span<const TokenId>(prefix));
    for (std::size_t i = prefix.size(); i < content.size(); ++i) {
      p *= pi.prob(node, content[i]);
      node = space.child(node, content[i]);
    }
    if (!traj.forced_eos) p *= pi.prob(node, space.vocab().eos);
    total += p * reward.of(prompt, traj);
  }
  return total;
}

// Conditional expected reward E_rho[r | content extends prefix+token].
inline double conditional_expected_reward(const TrajectoryPolicy& rho,
                                          const TrajectoryReward& reward, const Prompt& prompt,
                                          std::vector<TokenId> prefix, TokenId token) {
  const ResponseSpace& space = rho.space();
  if (token != space.vocab().eos) prefix.push_back(token);
  double mass = 0.0;
  double total = 0.0;
  for (int i = 0; i < space.num_trajectories(); ++i) {
    const Trajectory& traj = space.trajectories()[i];
    if (token == space.vocab().eos) {
      // Committing EOS pins the trajectory to the prefix itself.
      auto content = traj.content();
      if (!std::equal(content.begin(), content.end(), prefix.begin(), prefix.end())) continue;
    } else if (!extends(traj, std::span<const TokenId>(prefix))) {
      continue;
    }
    mass += rho.prob(i);
    total += rho.prob(i) * reward.of(prompt, traj);
  }
  return total / mass;
}

inline double kl(std::span<const double> p, std::span<const double> q) {
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) total += p[i] * (std::log(p[i]) - std::log(q[i]));
  }
  return total;
}

// Central finite difference of the BT loss in one table coordinate.
inline double fd_bt_gradient(const ResponseSpace& space, TabularRewardParams params,
                             const PreferenceDataset& dataset, const std::string& prompt_id,
                             int traj, double h = 1e-5) {
  params.at(prompt_id, traj) += h;
  const double up = bt_nll_loss(space, params, dataset);
  params.at(prompt_id, traj) -= 2 * h;
  const double down = bt_nll_loss(space, params, dataset);
  return (up - down) / (2 * h);
}

}  // namespace oracle
