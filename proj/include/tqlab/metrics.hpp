// Evaluation: the trajectory distribution a decoder induces, suboptimality
// against the best achievable return, the KL-vs-return bound checks, and the
// surface statistics (diversity, coherence proxy, normalized reward).
#pragma once

#include <functional>

#include "tqlab/decode.hpp"

namespace tqlab {

// Pushforward of the decoder's exact step distributions onto trajectories.
TrajectoryPolicy induced_rho_alg(const Decoder& decoder);

// v_star(prompt) minus the expected return of rho.
double sub_gap(const ResponseSpace& space, const TrajectoryReward& reward, const Prompt& prompt,
               const TrajectoryPolicy& rho);

// Sum over prefix depths 1..horizon-1 of the rho_alg-prefix-mass-weighted
// per-state KL(pi_alg || pi_anchor). The empty prefix is excluded; a horizon
// of 1 makes the sum empty. Dropping nonnegative terms only loosens the
// bound this enters, so the restriction is safe.
double h_alpha(const TokenPolicy& pi_alg, const TrajectoryPolicy& rho_alg,
               const TokenPolicy& pi_anchor);

// Both sides of the suboptimality bounds for a direct-transfer decoder, with
// the optimal comparison policy taken as uniform over the reward's argmax
// set (and, separately, as a point mass on its first element in canonical
// order). KLs against a reference that misses the argmax support are +inf;
// the bound then holds vacuously and is flagged.
struct BoundReport {
  std::string prompt_id;
  double alpha = 0.0;
  double beta = 0.0;
  double v_star = 0.0;
  double v_alg = 0.0;
  double sub_gap = 0.0;
  double kl_star_sft = 0.0;  // uniform-over-argmax comparison policy
  double h_alpha = 0.0;
  double bound_gap = 0.0;   // beta * kl_star_sft - alpha * h_alpha
  double slack_gap = 0.0;   // bound_gap - sub_gap
  bool gap_bound_holds = false;
  bool kl_star_infinite = false;
  double sub_gap_point = 0.0;  // point-mass comparison policy
  double kl_point_sft = 0.0;
  double bound_gap_point = 0.0;
  bool gap_bound_point_holds = false;
  bool kl_point_infinite = false;
  double kl_alg_sft = 0.0;
  double bound_kl = 0.0;   // (1/beta + horizon/alpha) * r_max
  double slack_kl = 0.0;   // bound_kl - kl_alg_sft
  bool kl_bound_holds = false;
  // The guarantee is stated for the direct anchor; reports computed against
  // an indirect decoder's anchor carry this flag.
  bool informational = false;
};

// Checks the bounds for a tq_direct decoder. Demands exact scores and the
// full candidate set (k == |V|); refuses Monte Carlo mode.
BoundReport bound_check(const Decoder& decoder, double tol = 1e-9);

// The same inequalities evaluated for a tq_indirect decoder against its own
// anchor, flagged informational (the guarantee is not claimed there).
BoundReport indirect_bound_info(const Decoder& decoder, double tol = 1e-9);

// E_p[score] - alpha * KL(p || base restricted to the candidates and
// renormalized), for a distribution p aligned with sd.candidates. The
// distribution decode_step produced maximizes this over the simplex; its own
// value is step_objective(sd, exp(sd.log_probs), ...).
double step_objective(const StepDistribution& sd, std::span<const double> probs,
                      const TokenPolicy& base, double alpha);

// (method - sft) / (tq - sft); nullopt when the window is degenerate.
std::optional<double> normalized_reward(double method, double sft, double tq,
                                        double eps = 1e-12);

// Fraction of distinct n-grams among the content's n-grams; 1 when the
// content is shorter than n.
double distinct_fraction(std::span<const TokenId> content, int n);

// Product of the distinct-fraction over n = 2..4.
double diversity(std::span<const TokenId> content);

// Cosine similarity of token-count vectors; 0 when either side is empty.
double count_cosine(std::span<const TokenId> a, std::span<const TokenId> b, int vocab_size);

// Pluggable response-vs-prompt coherence scorer; the default is count_cosine
// against the prompt tokens.
using CoherenceFn =
    std::function<double(std::span<const TokenId> prompt, std::span<const TokenId> content)>;
CoherenceFn default_coherence(int vocab_size);

}  // namespace tqlab
