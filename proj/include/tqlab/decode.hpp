// Decoding-time alignment. Every step decoder shares one shape: pick a
// candidate set from a token policy, score each candidate with an action
// value, then sample from base(z) * exp(score(z) / alpha) renormalized over
// the candidates. The transfer scores evaluate candidates under an aligned
// trajectory policy, either directly (suffix expectation under the aligned
// baseline) or indirectly (under the transferred policy, or by importance
// weighting baseline rollouts in Monte Carlo mode).
#pragma once

#include "tqlab/align.hpp"

namespace tqlab {

enum class DecoderKind { sft, best_of_n, args, cd, tq_direct, tq_indirect };
enum class ScoreMode { exact, monte_carlo };
// Where the indirect decoder's candidate set comes from.
enum class CandidateSource { baseline, target };
// Which policy anchors the indirect decoder's step KL.
enum class AnchorChoice { target, baseline };

const char* decoder_name(DecoderKind kind);

struct DecoderConfig {
  double alpha = 1.0;
  int k = 10;  // capped to |V| at construction
  int n_rollouts = 1;
  ScoreMode mode = ScoreMode::exact;
  CandidateSource candidate_source = CandidateSource::baseline;
  AnchorChoice anchor = AnchorChoice::target;
  bool greedy = true;
  std::uint64_t seed = 0;
  int n_best = 8;            // best-of-N sample count; 0 means exhaustive
  double args_weight = 1.0;  // reward weight of the args scorer
};

// One decoding step: the candidate set with scores and the aligned
// distribution over it. Candidates keep top-k order (descending base
// probability, ties toward the lower token index).
struct StepDistribution {
  int node = -1;
  std::vector<TokenId> candidates;
  std::vector<double> scores;
  std::vector<double> log_probs;
  double log_normalizer = 0.0;  // log sum of base * exp(score / alpha)

  double log_prob_of(TokenId t) const;
  double prob_of(TokenId t) const { return std::exp(log_prob_of(t)); }
  // Highest probability, ties toward the lower token index.
  TokenId argmax() const;
  // Inverse-CDF over the stored candidate order.
  TokenId sample(RngStream& rng) const;
};

// base(z) * exp(score(z)/alpha) over the candidate set. Candidates with zero
// base mass get zero probability (their scores are ignored); at least one
// candidate must carry base mass, and scores must be finite wherever the
// base does. Alpha must be positive and finite.
StepDistribution decode_step(const TokenPolicy& base, int node, std::vector<TokenId> candidates,
                             std::vector<double> scores, double alpha);

// Exact transfer scores. The direct form evaluates the conditional expected
// return of the aligned baseline after committing the candidate; the
// indirect form is the same expectation under the transferred policy.
double tq_star_direct(const AlignedPolicy& rho_bl, const TrajectoryReward& reward,
                      const Prompt& prompt, const DecodeState& state, TokenId candidate);
double tq_star_indirect(const AlignedPolicy& rho_r, const TrajectoryReward& target,
                        const Prompt& prompt, const DecodeState& state, TokenId candidate);

// Monte Carlo transfer scores. Direct: mean return over suffix rollouts of
// the aligned baseline (n == 1 is the single-rollout estimate). Indirect:
// rollouts still come from the aligned baseline; returns are reweighted by
// self-normalized exp((target - baseline)/beta) weights.
McEstimate tq_star_direct_mc(const AlignedPolicy& rho_bl, const TrajectoryReward& reward,
                             const Prompt& prompt, const DecodeState& state, TokenId candidate,
                             int n, RngStream& rng);
struct IsEstimate {
  double mean = 0.0;
  std::vector<double> returns;
  std::vector<double> normalized_weights;
  double log_sum_unnormalized = 0.0;
};
IsEstimate tq_star_indirect_mc(const AlignedPolicy& rho_bl, const TrajectoryReward& target,
                               const TrajectoryReward& baseline, const Prompt& prompt,
                               const DecodeState& state, TokenId candidate, int n, double beta,
                               RngStream& rng);

// Everything a decoder may bind to; which fields must be set depends on the
// kind. Pointees must outlive the decoder.
struct DecoderInputs {
  SpacePtr space;
  Prompt prompt;
  const TokenPolicy* pi_sft = nullptr;
  const TrajectoryPolicy* rho_sft = nullptr;
  const TrajectoryReward* target = nullptr;
  const TrajectoryReward* baseline = nullptr;  // == target when not transferring
  const AlignedPolicy* rho_bl = nullptr;       // tq kinds
  const AlignedPolicy* rho_r = nullptr;        // tq_indirect
  const TokenPolicy* pi_bl = nullptr;          // conditionals of rho_bl
  const TokenPolicy* pi_r = nullptr;           // conditionals of rho_r
  const TokenPolicy* args_base = nullptr;      // args kind
  double beta = 0.0;
};

struct DecodeResult {
  Trajectory trajectory;
  std::vector<StepDistribution> steps;
};

class Decoder {
 public:
  Decoder(DecoderKind kind, const DecoderInputs* inputs, DecoderConfig config);

  DecoderKind kind() const { return kind_; }
  const DecoderConfig& config() const { return config_; }
  const DecoderInputs& inputs() const { return *in_; }
  std::string name() const { return decoder_name(kind_); }
  // best_of_n selects whole responses; it has no per-step distribution.
  bool has_step_semantics() const { return kind_ != DecoderKind::best_of_n; }

  // The aligned step distribution at a decision node. Monte Carlo scores
  // derive their streams from (seed, prompt, decoder, node, candidate).
  StepDistribution step(int node) const;

  // Greedy or sampled decode; the stream drives token selection (and
  // best-of-N draws), never the scores.
  DecodeResult decode(RngStream& rng) const;
  DecodeResult decode() const;  // stream derived from (seed, prompt, decoder)

  // Full per-state policy induced by exact step distributions. Refuses
  // Monte Carlo mode: the induced distribution is only meaningful exactly.
  TokenPolicy materialize_policy() const;

  const TokenPolicy& candidate_policy() const;
  const TokenPolicy& anchor_policy() const;

 private:
  std::vector<TokenId> candidates_at(int node) const;
  std::vector<double> scores_at(int node, const std::vector<TokenId>& candidates) const;
  DecodeResult decode_best_of_n(RngStream& rng) const;
  RngStream score_stream(int node, TokenId candidate) const;

  DecoderKind kind_;
  const DecoderInputs* in_;
  DecoderConfig config_;
  // Exact scoring tables, built once per decoder.
  std::vector<double> cond_return_;  // per node, under the scoring policy
  std::optional<ScoreTable> q_pi_;   // cd kind
};

// Plain sampling (or greedy) from the SFT policy over the full vocabulary.
DecodeResult decode_sft(const DecoderInputs& inputs, bool greedy, RngStream& rng);

// Reward argmax over the full enumeration; ties resolve to the first
// trajectory in canonical order.
Trajectory decode_best_of_exhaustive(const ResponseSpace& space, const TrajectoryReward& reward,
                                     const Prompt& prompt);

}  // namespace tqlab
