// Exact action values by backward induction over the response tree, their
// Monte Carlo counterparts, and the trajectory-level optima. Transitions are
// deterministic and rewards terminal, so Q* reduces to a max over suffix
// completions and Q^pi to a suffix expectation.
#pragma once

#include <cstdint>

#include "tqlab/reward.hpp"

namespace tqlab {

enum class ScoreProvenance { exact_dp, monte_carlo };

// (decision node, token) -> score, with provenance. values[node][token].
struct ScoreTable {
  ScoreProvenance provenance = ScoreProvenance::exact_dp;
  int mc_rollouts = 0;
  std::uint64_t seed = 0;
  std::vector<std::vector<double>> values;

  double at(int node, TokenId t) const { return values[node][t]; }
};

// Q^pi(s, z): expected return after committing token z in state s and
// following pi afterwards. Exact, full table.
ScoreTable build_q_pi_table(const TokenPolicy& policy, const TrajectoryReward& reward,
                            const Prompt& prompt);
double q_pi_exact(const TokenPolicy& policy, const TrajectoryReward& reward, const Prompt& prompt,
                  const DecodeState& state, TokenId token);

// Q*(s, z): best achievable return after committing token z.
ScoreTable build_q_star_table(const ResponseSpace& space, const TrajectoryReward& reward,
                              const Prompt& prompt);
double q_star_exact(const ResponseSpace& space, const TrajectoryReward& reward,
                    const Prompt& prompt, const DecodeState& state, TokenId token);

struct McEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  int n = 0;
};

// Monte Carlo Q^pi from n rollouts (n >= 1). std_error is the sample
// standard error; zero when n == 1 or the returns are constant.
McEstimate q_mc(const TokenPolicy& policy, const TrajectoryReward& reward, const Prompt& prompt,
                const DecodeState& state, TokenId token, int n, RngStream& rng);

// Best trajectory return for the prompt.
double v_star(const ResponseSpace& space, const TrajectoryReward& reward, const Prompt& prompt);

// Expected return under an explicit trajectory distribution.
double v_of(const TrajectoryPolicy& rho, const TrajectoryReward& reward, const Prompt& prompt);

}  // namespace tqlab
