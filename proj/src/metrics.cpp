#include "tqlab/metrics.hpp"

#include <cmath>
#include <map>

namespace tqlab {

TrajectoryPolicy induced_rho_alg(const Decoder& decoder) {
  return to_trajectory_policy(decoder.materialize_policy());
}

double sub_gap(const ResponseSpace& space, const TrajectoryReward& reward, const Prompt& prompt,
               const TrajectoryPolicy& rho) {
  return v_star(space, reward, prompt) - v_of(rho, reward, prompt);
}

double h_alpha(const TokenPolicy& pi_alg, const TrajectoryPolicy& rho_alg,
               const TokenPolicy& pi_anchor) {
  const ResponseSpace& space = rho_alg.space();
  double total = 0.0;
  for (int d = 1; d <= space.horizon() - 1; ++d) {
    for (int node = space.depth_begin(d); node < space.depth_end(d); ++node) {
      const double lm = rho_alg.log_prefix_mass(node);
      if (lm == kNegInf) continue;
      total += std::exp(lm) * kl_token_row(pi_alg.log_row(node), pi_anchor.log_row(node));
    }
  }
  return total;
}

namespace {

// KL against the reference, +inf when the reference misses the support.
double kl_or_inf(const TrajectoryPolicy& p, const TrajectoryPolicy& q, bool* infinite) {
  try {
    const double v = kl_trajectory(p, q);
    *infinite = false;
    return v;
  } catch (const AbsoluteContinuityError&) {
    *infinite = true;
    return std::numeric_limits<double>::infinity();
  }
}

}  // namespace

namespace {

BoundReport bound_report_core(const Decoder& decoder, double tol) {
  const DecoderInputs& in = decoder.inputs();
  const ResponseSpace& space = *in.space;
  if (decoder.config().mode != ScoreMode::exact)
    throw Error("bound check: needs exact scores, not Monte Carlo");
  if (decoder.config().k < space.vocab().size())
    throw Error("bound check: needs the full candidate set (k == |V|)");

  BoundReport rep;
  rep.prompt_id = in.prompt.id;
  rep.alpha = decoder.config().alpha;
  rep.beta = in.rho_bl->beta;

  const TokenPolicy pi_alg = decoder.materialize_policy();
  const TrajectoryPolicy rho_alg = to_trajectory_policy(pi_alg);
  const TrajectoryReward& reward = *in.target;
  const TrajectoryPolicy& rho_sft = in.rho_bl->reference;

  rep.v_star = v_star(space, reward, in.prompt);
  rep.v_alg = v_of(rho_alg, reward, in.prompt);
  rep.sub_gap = rep.v_star - rep.v_alg;
  rep.sub_gap_point = rep.sub_gap;  // every argmax trajectory attains v_star

  // Comparison optima: uniform over the argmax set, and the first argmax.
  std::vector<int> argmax;
  for (int i = 0; i < space.num_trajectories(); ++i)
    if (reward.of_index(in.prompt, i) >= rep.v_star - 1e-12) argmax.push_back(i);
  std::vector<double> uniform_probs(static_cast<std::size_t>(space.num_trajectories()), 0.0);
  for (int i : argmax)
    uniform_probs[static_cast<std::size_t>(i)] = 1.0 / static_cast<double>(argmax.size());
  const TrajectoryPolicy rho_star_uniform =
      TrajectoryPolicy::from_probs(in.space, in.prompt.id, std::move(uniform_probs));
  std::vector<double> point_probs(static_cast<std::size_t>(space.num_trajectories()), 0.0);
  point_probs[static_cast<std::size_t>(argmax.front())] = 1.0;
  const TrajectoryPolicy rho_star_point =
      TrajectoryPolicy::from_probs(in.space, in.prompt.id, std::move(point_probs));

  rep.kl_star_sft = kl_or_inf(rho_star_uniform, rho_sft, &rep.kl_star_infinite);
  rep.kl_point_sft = kl_or_inf(rho_star_point, rho_sft, &rep.kl_point_infinite);
  rep.h_alpha = h_alpha(pi_alg, rho_alg, decoder.anchor_policy());

  rep.bound_gap = rep.beta * rep.kl_star_sft - rep.alpha * rep.h_alpha;
  rep.slack_gap = rep.bound_gap - rep.sub_gap;
  rep.gap_bound_holds = rep.sub_gap <= rep.bound_gap + tol;
  rep.bound_gap_point = rep.beta * rep.kl_point_sft - rep.alpha * rep.h_alpha;
  rep.gap_bound_point_holds = rep.sub_gap_point <= rep.bound_gap_point + tol;

  bool alg_infinite = false;
  rep.kl_alg_sft = kl_or_inf(rho_alg, rho_sft, &alg_infinite);
  rep.bound_kl =
      (1.0 / rep.beta + static_cast<double>(space.horizon()) / rep.alpha) * reward.r_max();
  rep.slack_kl = rep.bound_kl - rep.kl_alg_sft;
  rep.kl_bound_holds = !alg_infinite && rep.kl_alg_sft <= rep.bound_kl + tol;
  return rep;
}

}  // namespace

BoundReport bound_check(const Decoder& decoder, double tol) {
  if (decoder.kind() != DecoderKind::tq_direct)
    throw Error("bound_check: needs a tq_direct decoder");
  return bound_report_core(decoder, tol);
}

BoundReport indirect_bound_info(const Decoder& decoder, double tol) {
  if (decoder.kind() != DecoderKind::tq_indirect)
    throw Error("indirect_bound_info: needs a tq_indirect decoder");
  BoundReport rep = bound_report_core(decoder, tol);
  rep.informational = true;
  return rep;
}

double step_objective(const StepDistribution& sd, std::span<const double> probs,
                      const TokenPolicy& base, double alpha) {
  if (probs.size() != sd.candidates.size())
    throw Error("step_objective: distribution and candidates differ in length");
  const std::span<const double> row = base.log_row(sd.node);
  std::vector<double> restricted(sd.candidates.size());
  for (std::size_t i = 0; i < sd.candidates.size(); ++i)
    restricted[i] = row[static_cast<std::size_t>(sd.candidates[i])];
  const double lz = log_sum_exp(restricted);
  if (lz == kNegInf) throw Error("step_objective: base has no mass on the candidates");
  double value = 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = probs[i];
    if (p < -1e-12) throw Error("step_objective: negative probability");
    total += p;
    if (p <= 0.0) continue;
    const double lq = restricted[i] - lz;
    if (lq == kNegInf)
      throw AbsoluteContinuityError("step_objective: mass on a zero-base candidate");
    value += p * sd.scores[i] - alpha * p * (std::log(p) - lq);
  }
  if (std::abs(total - 1.0) > 1e-9) throw Error("step_objective: distribution does not sum to 1");
  return value;
}

std::optional<double> normalized_reward(double method, double sft, double tq, double eps) {
  const double window = tq - sft;
  if (std::abs(window) < eps) return std::nullopt;
  return (method - sft) / window;
}

double distinct_fraction(std::span<const TokenId> content, int n) {
  const int total = static_cast<int>(content.size()) - n + 1;
  if (total <= 0) return 1.0;
  std::map<std::vector<TokenId>, int> seen;
  for (int i = 0; i < total; ++i)
    seen[std::vector<TokenId>(content.begin() + i, content.begin() + i + n)] += 1;
  return static_cast<double>(seen.size()) / static_cast<double>(total);
}

double diversity(std::span<const TokenId> content) {
  double prod = 1.0;
  for (int n = 2; n <= 4; ++n) prod *= distinct_fraction(content, n);
  return prod;
}

double count_cosine(std::span<const TokenId> a, std::span<const TokenId> b, int vocab_size) {
  std::vector<double> ca(static_cast<std::size_t>(vocab_size), 0.0);
  std::vector<double> cb(static_cast<std::size_t>(vocab_size), 0.0);
  for (TokenId t : a) ca.at(static_cast<std::size_t>(t)) += 1.0;
  for (TokenId t : b) cb.at(static_cast<std::size_t>(t)) += 1.0;
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (int i = 0; i < vocab_size; ++i) {
    dot += ca[static_cast<std::size_t>(i)] * cb[static_cast<std::size_t>(i)];
    na += ca[static_cast<std::size_t>(i)] * ca[static_cast<std::size_t>(i)];
    nb += cb[static_cast<std::size_t>(i)] * cb[static_cast<std::size_t>(i)];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

CoherenceFn default_coherence(int vocab_size) {
  return [vocab_size](std::span<const TokenId> prompt, std::span<const TokenId> content) {
    return count_cosine(prompt, content, vocab_size);
  };
}

}  // namespace tqlab
