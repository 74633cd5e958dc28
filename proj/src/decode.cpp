#include "tqlab/decode.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace tqlab {

namespace {

// Conditional expected return of rho's suffix distribution at every node,
// computed children-first (children always have larger indices). Zero-mass
// nodes stay NaN.
std::vector<double> conditional_return_table(const TrajectoryPolicy& rho,
                                             const TrajectoryReward& reward,
                                             const Prompt& prompt) {
  const ResponseSpace& space = rho.space();
  const int vocab_size = space.vocab().size();
  const TokenId eos = space.vocab().eos;
  std::vector<double> table(space.num_nodes(), std::numeric_limits<double>::quiet_NaN());
  for (int node = static_cast<int>(space.num_nodes()) - 1; node >= 0; --node) {
    const double lm = rho.log_prefix_mass(node);
    if (lm == kNegInf) continue;
    double acc = 0.0;
    const int own = space.trajectory_at(node);
    const double lp = rho.log_prob(own);
    if (lp != kNegInf) acc += std::exp(lp - lm) * reward.of_index(prompt, own);
    if (space.depth(node) < space.horizon()) {
      for (TokenId z = 0; z < vocab_size; ++z) {
        if (z == eos) continue;
        const int child = space.child(node, z);
        const double lmc = rho.log_prefix_mass(child);
        if (lmc == kNegInf) continue;
        acc += std::exp(lmc - lm) * table[child];
      }
    }
    table[node] = acc;
  }
  return table;
}

// Resolves a DecodeState to its decision node, validating prompt identity.
int decision_node(const ResponseSpace& space, const Prompt& prompt, const DecodeState& state) {
  if (state.prompt.id != prompt.id) throw Error("decode: state prompt does not match");
  const int node = space.node_at(state.partial);
  if (node < 0) throw Error("decode: state is not a prefix of the response space");
  if (space.depth(node) >= space.horizon()) throw Error("decode: state is at the horizon");
  return node;
}

// Completes a suffix by sampling rho's conditionals from the node onward.
Trajectory rollout_suffix(const TrajectoryPolicy& rho, int node, RngStream& rng) {
  const ResponseSpace& space = rho.space();
  while (true) {
    const TokenId z = rho.sample_next(node, rng);
    if (z == space.vocab().eos) return space.trajectories()[space.trajectory_at(node)];
    node = space.child(node, z);
  }
}

// The node scored by a candidate: the child for a content token, the node
// itself for EOS (whose own trajectory is then pinned). Requires positive
// mass under rho for the conditional to exist.
struct CandidateTarget {
  int node = -1;
  bool pinned = false;  // EOS: the conditional is a point mass on node's trajectory
};

CandidateTarget candidate_target(const TrajectoryPolicy& rho, int node, TokenId candidate) {
  const ResponseSpace& space = rho.space();
  if (!space.vocab().contains(candidate)) throw Error("decode: candidate token out of vocabulary");
  if (candidate == space.vocab().eos) {
    if (rho.log_prob(space.trajectory_at(node)) == kNegInf)
      throw UnreachablePrefixError("decode: EOS completion has zero probability");
    return {node, true};
  }
  const int child = space.child(node, candidate);
  if (rho.log_prefix_mass(child) == kNegInf)
    throw UnreachablePrefixError("decode: candidate prefix has zero probability");
  return {child, false};
}

}  // namespace

const char* decoder_name(DecoderKind kind) {
  switch (kind) {
    case DecoderKind::sft: return "sft";
    case DecoderKind::best_of_n: return "best_of_n";
    case DecoderKind::args: return "args";
    case DecoderKind::cd: return "cd";
    case DecoderKind::tq_direct: return "tq_direct";
    case DecoderKind::tq_indirect: return "tq_indirect";
  }
  throw Error("decoder_name: unknown kind");
}

double StepDistribution::log_prob_of(TokenId t) const {
  for (std::size_t i = 0; i < candidates.size(); ++i)
    if (candidates[i] == t) return log_probs[i];
  return kNegInf;
}

TokenId StepDistribution::argmax() const {
  TokenId best = candidates.front();
  double best_lp = log_probs.front();
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    if (log_probs[i] > best_lp || (log_probs[i] == best_lp && candidates[i] < best)) {
      best = candidates[i];
      best_lp = log_probs[i];
    }
  }
  return best;
}

TokenId StepDistribution::sample(RngStream& rng) const {
  const double u = rng.u01();
  double cum = 0.0;
  int last_positive = -1;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const double p = std::exp(log_probs[i]);
    if (p <= 0.0) continue;
    last_positive = static_cast<int>(i);
    cum += p;
    if (u < cum) return candidates[i];
  }
  return candidates[last_positive];  // rounding left u above the final cum
}

StepDistribution decode_step(const TokenPolicy& base, int node, std::vector<TokenId> candidates,
                             std::vector<double> scores, double alpha) {
  if (!(alpha > 0.0) || !std::isfinite(alpha))
    throw ConfigError("decode_step: alpha must be positive and finite");
  if (candidates.empty()) throw Error("decode_step: empty candidate set");
  if (candidates.size() != scores.size())
    throw Error("decode_step: candidates and scores differ in length");
  const std::span<const double> row = base.log_row(node);
  const Vocabulary& vocab = base.space().vocab();
  std::vector<char> seen(static_cast<std::size_t>(vocab.size()), 0);
  std::vector<double> logits(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const TokenId t = candidates[i];
    if (!vocab.contains(t)) throw Error("decode_step: candidate token out of vocabulary");
    if (seen[static_cast<std::size_t>(t)]) throw Error("decode_step: duplicate candidate");
    seen[static_cast<std::size_t>(t)] = 1;
    const double lb = row[static_cast<std::size_t>(t)];
    if (lb == kNegInf) {
      logits[i] = kNegInf;  // zero base mass; the score is irrelevant
      continue;
    }
    if (!std::isfinite(scores[i]))
      throw Error("decode_step: non-finite score on a candidate with base mass");
    logits[i] = lb + scores[i] / alpha;
  }
  const double lz = log_sum_exp(logits);
  if (lz == kNegInf) throw Error("decode_step: no candidate carries base mass");
  StepDistribution out;
  out.node = node;
  out.candidates = std::move(candidates);
  out.scores = std::move(scores);
  out.log_probs.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i)
    out.log_probs[i] = logits[i] == kNegInf ? kNegInf : logits[i] - lz;
  out.log_normalizer = lz;
  return out;
}

double tq_star_direct(const AlignedPolicy& rho_bl, const TrajectoryReward& reward,
                      const Prompt& prompt, const DecodeState& state, TokenId candidate) {
  const ResponseSpace& space = rho_bl.policy.space();
  const int node = decision_node(space, prompt, state);
  const CandidateTarget tgt = candidate_target(rho_bl.policy, node, candidate);
  if (tgt.pinned) return reward.of_index(prompt, space.trajectory_at(tgt.node));
  return conditional_return_table(rho_bl.policy, reward, prompt)[tgt.node];
}

double tq_star_indirect(const AlignedPolicy& rho_r, const TrajectoryReward& target,
                        const Prompt& prompt, const DecodeState& state, TokenId candidate) {
  return tq_star_direct(rho_r, target, prompt, state, candidate);
}

McEstimate tq_star_direct_mc(const AlignedPolicy& rho_bl, const TrajectoryReward& reward,
                             const Prompt& prompt, const DecodeState& state, TokenId candidate,
                             int n, RngStream& rng) {
  if (n < 1) throw ConfigError("tq_star_direct_mc: need at least one rollout");
  const ResponseSpace& space = rho_bl.policy.space();
  const int node = decision_node(space, prompt, state);
  const CandidateTarget tgt = candidate_target(rho_bl.policy, node, candidate);
  std::vector<double> returns(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const Trajectory traj = tgt.pinned ? space.trajectories()[space.trajectory_at(tgt.node)]
                                       : rollout_suffix(rho_bl.policy, tgt.node, rng);
    returns[static_cast<std::size_t>(i)] = reward.of(prompt, traj);
  }
  McEstimate est;
  est.n = n;
  double sum = 0.0;
  for (double r : returns) sum += r;
  est.mean = sum / n;
  if (n > 1) {
    double ss = 0.0;
    for (double r : returns) ss += (r - est.mean) * (r - est.mean);
    est.std_error = std::sqrt(ss / (n - 1)) / std::sqrt(static_cast<double>(n));
  }
  return est;
}

IsEstimate tq_star_indirect_mc(const AlignedPolicy& rho_bl, const TrajectoryReward& target,
                               const TrajectoryReward& baseline, const Prompt& prompt,
                               const DecodeState& state, TokenId candidate, int n, double beta,
                               RngStream& rng) {
  if (n < 1) throw ConfigError("tq_star_indirect_mc: need at least one rollout");
  if (!(beta > 0.0) || !std::isfinite(beta))
    throw ConfigError("tq_star_indirect_mc: beta must be positive and finite");
  const ResponseSpace& space = rho_bl.policy.space();
  const int node = decision_node(space, prompt, state);
  const CandidateTarget tgt = candidate_target(rho_bl.policy, node, candidate);
  IsEstimate est;
  est.returns.resize(static_cast<std::size_t>(n));
  std::vector<double> log_weights(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const Trajectory traj = tgt.pinned ? space.trajectories()[space.trajectory_at(tgt.node)]
                                       : rollout_suffix(rho_bl.policy, tgt.node, rng);
    est.returns[static_cast<std::size_t>(i)] = target.of(prompt, traj);
    log_weights[static_cast<std::size_t>(i)] =
        log_unnormalized_transfer_weight(target, baseline, prompt, traj, beta);
  }
  SelfNormalizedWeights w = self_normalize_log_weights(std::move(log_weights));
  est.normalized_weights = std::move(w.normalized);
  est.log_sum_unnormalized = w.log_sum_unnormalized;
  est.mean = 0.0;
  for (std::size_t i = 0; i < est.returns.size(); ++i)
    est.mean += est.normalized_weights[i] * est.returns[i];
  return est;
}

Decoder::Decoder(DecoderKind kind, const DecoderInputs* inputs, DecoderConfig config)
    : kind_(kind), in_(inputs), config_(config) {
  if (in_ == nullptr || !in_->space) throw Error("decoder: inputs with a response space required");
  const ResponseSpace& space = *in_->space;
  if (!(config_.alpha > 0.0) || !std::isfinite(config_.alpha))
    throw ConfigError("decoder: alpha must be positive and finite");
  if (config_.k < 1) throw ConfigError("decoder: k must be at least 1");
  config_.k = std::min(config_.k, space.vocab().size());
  if (config_.n_rollouts < 1) throw ConfigError("decoder: n_rollouts must be at least 1");
  if (config_.n_best < 0) throw ConfigError("decoder: n_best must be nonnegative");
  if (!std::isfinite(config_.args_weight)) throw ConfigError("decoder: args_weight must be finite");

  auto require = [&](const void* p, const char* what) {
    if (p == nullptr) {
      std::ostringstream msg;
      msg << "decoder " << name() << ": missing " << what;
      throw Error(msg.str());
    }
  };
  auto check_policy = [&](const TokenPolicy* p, const char* what) {
    require(p, what);
    if (p->space_ptr().get() != in_->space.get())
      throw Error(std::string("decoder: ") + what + " built on a different response space");
    if (p->prompt_id() != in_->prompt.id)
      throw Error(std::string("decoder: ") + what + " built for a different prompt");
  };
  auto check_reward = [&](const TrajectoryReward* r, const char* what) {
    require(r, what);
    if (r->space_ptr().get() != in_->space.get())
      throw Error(std::string("decoder: ") + what + " built on a different response space");
  };

  switch (kind_) {
    case DecoderKind::sft:
      check_policy(in_->pi_sft, "pi_sft");
      break;
    case DecoderKind::best_of_n:
      check_policy(in_->pi_sft, "pi_sft");
      check_reward(in_->target, "target reward");
      break;
    case DecoderKind::args:
      check_policy(in_->args_base ? in_->args_base : in_->pi_sft, "scoring base policy");
      check_reward(in_->target, "target reward");
      break;
    case DecoderKind::cd:
      check_policy(in_->pi_sft, "pi_sft");
      check_reward(in_->target, "target reward");
      if (config_.mode == ScoreMode::exact)
        q_pi_ = build_q_pi_table(*in_->pi_sft, *in_->target, in_->prompt);
      break;
    case DecoderKind::tq_direct:
      require(in_->rho_bl, "aligned policy rho_bl");
      check_policy(in_->pi_bl, "pi_bl");
      check_reward(in_->target, "target reward");
      if (config_.mode == ScoreMode::exact)
        cond_return_ = conditional_return_table(in_->rho_bl->policy, *in_->target, in_->prompt);
      break;
    case DecoderKind::tq_indirect:
      require(in_->rho_bl, "aligned policy rho_bl");
      require(in_->rho_r, "transferred policy rho_r");
      check_policy(in_->pi_bl, "pi_bl");
      check_policy(in_->pi_r, "pi_r");
      check_reward(in_->target, "target reward");
      check_reward(in_->baseline, "baseline reward");
      if (!(in_->beta > 0.0) || !std::isfinite(in_->beta))
        throw ConfigError("decoder tq_indirect: beta must be positive and finite");
      if (config_.mode == ScoreMode::exact)
        cond_return_ = conditional_return_table(in_->rho_r->policy, *in_->target, in_->prompt);
      break;
  }
}

const TokenPolicy& Decoder::candidate_policy() const {
  switch (kind_) {
    case DecoderKind::sft:
    case DecoderKind::best_of_n:
    case DecoderKind::cd:
      return *in_->pi_sft;
    case DecoderKind::args:
      return in_->args_base ? *in_->args_base : *in_->pi_sft;
    case DecoderKind::tq_direct:
      return *in_->pi_bl;
    case DecoderKind::tq_indirect:
      return config_.candidate_source == CandidateSource::baseline ? *in_->pi_bl : *in_->pi_r;
  }
  throw Error("decoder: unknown kind");
}

const TokenPolicy& Decoder::anchor_policy() const {
  switch (kind_) {
    case DecoderKind::sft:
    case DecoderKind::best_of_n:
    case DecoderKind::cd:
      return *in_->pi_sft;
    case DecoderKind::args:
      return in_->args_base ? *in_->args_base : *in_->pi_sft;
    case DecoderKind::tq_direct:
      return *in_->pi_bl;
    case DecoderKind::tq_indirect:
      return config_.anchor == AnchorChoice::target ? *in_->pi_r : *in_->pi_bl;
  }
  throw Error("decoder: unknown kind");
}

std::vector<TokenId> Decoder::candidates_at(int node) const {
  const TokenPolicy& source = candidate_policy();
  if (kind_ == DecoderKind::sft) {
    // Full support, no truncation.
    const std::span<const double> row = source.log_row(node);
    std::vector<TokenId> out;
    for (TokenId t = 0; t < in_->space->vocab().size(); ++t)
      if (row[static_cast<std::size_t>(t)] != kNegInf) out.push_back(t);
    return out;
  }
  std::vector<TokenId> top = source.top_k(node, config_.k);
  std::vector<TokenId> out;
  out.reserve(top.size());
  for (TokenId t : top)
    if (source.log_prob(node, t) != kNegInf) out.push_back(t);
  if (out.empty()) throw UnreachablePrefixError("decoder: no candidate carries base mass");
  return out;
}

std::vector<double> Decoder::scores_at(int node, const std::vector<TokenId>& candidates) const {
  const ResponseSpace& space = *in_->space;
  std::vector<double> scores(candidates.size(), 0.0);
  switch (kind_) {
    case DecoderKind::sft:
      return scores;  // pure anchor sampling
    case DecoderKind::best_of_n:
      throw Error("decoder best_of_n: no per-step distribution");
    case DecoderKind::args: {
      // Proxy reward of the prefix extended by the candidate, read as if the
      // response ended there.
      for (std::size_t i = 0; i < candidates.size(); ++i) {
        const TokenId t = candidates[i];
        const int end = t == space.vocab().eos ? node : space.child(node, t);
        scores[i] = config_.args_weight * in_->target->of_index(in_->prompt, space.trajectory_at(end));
      }
      return scores;
    }
    case DecoderKind::cd: {
      if (config_.mode == ScoreMode::exact) {
        for (std::size_t i = 0; i < candidates.size(); ++i) {
          const double v = q_pi_->at(node, candidates[i]);
          if (std::isnan(v))
            throw UnreachablePrefixError("decoder cd: state-action value undefined");
          scores[i] = v;
        }
        return scores;
      }
      const DecodeState state{in_->prompt, space.prefix_of(node)};
      for (std::size_t i = 0; i < candidates.size(); ++i) {
        RngStream rs = score_stream(node, candidates[i]);
        scores[i] =
            q_mc(*in_->pi_sft, *in_->target, in_->prompt, state, candidates[i], config_.n_rollouts,
                 rs)
                .mean;
      }
      return scores;
    }
    case DecoderKind::tq_direct:
    case DecoderKind::tq_indirect: {
      const AlignedPolicy& scoring =
          kind_ == DecoderKind::tq_direct ? *in_->rho_bl : *in_->rho_r;
      if (config_.mode == ScoreMode::exact) {
        for (std::size_t i = 0; i < candidates.size(); ++i) {
          const CandidateTarget tgt = candidate_target(scoring.policy, node, candidates[i]);
          const double v = tgt.pinned
                               ? in_->target->of_index(in_->prompt, space.trajectory_at(tgt.node))
                               : cond_return_[static_cast<std::size_t>(tgt.node)];
          if (std::isnan(v))
            throw UnreachablePrefixError("decoder: transfer score undefined at this prefix");
          scores[i] = v;
        }
        return scores;
      }
      const DecodeState state{in_->prompt, space.prefix_of(node)};
      for (std::size_t i = 0; i < candidates.size(); ++i) {
        RngStream rs = score_stream(node, candidates[i]);
        if (kind_ == DecoderKind::tq_direct) {
          scores[i] = tq_star_direct_mc(*in_->rho_bl, *in_->target, in_->prompt, state,
                                        candidates[i], config_.n_rollouts, rs)
                          .mean;
        } else {
          scores[i] = tq_star_indirect_mc(*in_->rho_bl, *in_->target, *in_->baseline, in_->prompt,
                                          state, candidates[i], config_.n_rollouts, in_->beta, rs)
                          .mean;
        }
      }
      return scores;
    }
  }
  throw Error("decoder: unknown kind");
}

StepDistribution Decoder::step(int node) const {
  const ResponseSpace& space = *in_->space;
  if (node < 0 || node >= space.num_decision_nodes())
    throw Error("decoder: step requires a decision node");
  std::vector<TokenId> candidates = candidates_at(node);
  std::vector<double> scores = scores_at(node, candidates);
  // The args tilt already carries its weight in the scores; its anchor mix
  // uses unit temperature. The sft decoder's scores are all zero, so alpha
  // cancels there too.
  const double alpha = kind_ == DecoderKind::args ? 1.0 : config_.alpha;
  return decode_step(anchor_policy(), node, std::move(candidates), std::move(scores), alpha);
}

DecodeResult Decoder::decode(RngStream& rng) const {
  if (kind_ == DecoderKind::best_of_n) return decode_best_of_n(rng);
  const ResponseSpace& space = *in_->space;
  DecodeResult out;
  DecodeState state{in_->prompt, {}};
  int node = space.root();
  while (true) {
    if (state.step() == space.horizon()) {
      out.trajectory = force_terminate(state, space.vocab(), space.horizon());
      break;
    }
    StepDistribution sd = step(node);
    const TokenId z = config_.greedy ? sd.argmax() : sd.sample(rng);
    out.steps.push_back(std::move(sd));
    StepOutcome next = advance(state, z, space.vocab(), space.horizon());
    if (std::holds_alternative<Trajectory>(next)) {
      out.trajectory = std::get<Trajectory>(std::move(next));
      break;
    }
    state = std::get<DecodeState>(std::move(next));
    node = space.child(node, z);
  }
  return out;
}

DecodeResult Decoder::decode() const {
  RngStream rng =
      StreamKey(config_.seed).with(in_->prompt.id).with(name()).with("select").stream();
  return decode(rng);
}

DecodeResult Decoder::decode_best_of_n(RngStream& rng) const {
  DecodeResult out;
  if (config_.n_best == 0) {
    out.trajectory = decode_best_of_exhaustive(*in_->space, *in_->target, in_->prompt);
    return out;
  }
  double best = kNegInf;
  for (int i = 0; i < config_.n_best; ++i) {
    DecodeResult draw = decode_sft(*in_, /*greedy=*/false, rng);
    const double r = in_->target->of(in_->prompt, draw.trajectory);
    if (r > best) {  // ties keep the earliest draw
      best = r;
      out.trajectory = std::move(draw.trajectory);
    }
  }
  return out;
}

TokenPolicy Decoder::materialize_policy() const {
  if (config_.mode != ScoreMode::exact)
    throw Error("decoder: only exact scores induce a policy");
  if (!has_step_semantics()) throw Error("decoder best_of_n: no per-step distribution");
  const ResponseSpace& space = *in_->space;
  TokenPolicy::Rows rows(static_cast<std::size_t>(space.num_decision_nodes()));
  for (int node = 0; node < space.num_decision_nodes(); ++node) {
    StepDistribution sd;
    try {
      sd = step(node);
    } catch (const UnreachablePrefixError&) {
      continue;  // node unreachable under the decoder's own distribution
    }
    std::vector<double> row(static_cast<std::size_t>(space.vocab().size()), kNegInf);
    for (std::size_t i = 0; i < sd.candidates.size(); ++i)
      row[static_cast<std::size_t>(sd.candidates[i])] = sd.log_probs[i];
    rows[static_cast<std::size_t>(node)] = std::move(row);
  }
  return TokenPolicy::from_log_rows(in_->space, in_->prompt.id, std::move(rows));
}

RngStream Decoder::score_stream(int node, TokenId candidate) const {
  return StreamKey(config_.seed)
      .with(in_->prompt.id)
      .with(name())
      .with("node")
      .with(static_cast<std::uint64_t>(node))
      .with("cand")
      .with(static_cast<std::uint64_t>(candidate))
      .stream();
}

DecodeResult decode_sft(const DecoderInputs& inputs, bool greedy, RngStream& rng) {
  if (inputs.pi_sft == nullptr) throw Error("decode_sft: missing pi_sft");
  const ResponseSpace& space = *inputs.space;
  const TokenPolicy& pi = *inputs.pi_sft;
  DecodeResult out;
  DecodeState state{inputs.prompt, {}};
  int node = space.root();
  while (true) {
    if (state.step() == space.horizon()) {
      out.trajectory = force_terminate(state, space.vocab(), space.horizon());
      break;
    }
    TokenId z;
    if (greedy) {
      const std::span<const double> row = pi.log_row(node);
      z = 0;
      for (TokenId t = 1; t < space.vocab().size(); ++t)
        if (row[static_cast<std::size_t>(t)] > row[static_cast<std::size_t>(z)]) z = t;
    } else {
      z = pi.sample(node, rng);
    }
    StepOutcome next = advance(state, z, space.vocab(), space.horizon());
    if (std::holds_alternative<Trajectory>(next)) {
      out.trajectory = std::get<Trajectory>(std::move(next));
      break;
    }
    state = std::get<DecodeState>(std::move(next));
    node = space.child(node, z);
  }
  return out;
}

Trajectory decode_best_of_exhaustive(const ResponseSpace& space, const TrajectoryReward& reward,
                                     const Prompt& prompt) {
  int best = 0;
  double best_r = kNegInf;
  for (int i = 0; i < space.num_trajectories(); ++i) {
    const double r = reward.of_index(prompt, i);
    if (r > best_r) {  // ties keep the first trajectory in canonical order
      best_r = r;
      best = i;
    }
  }
  return space.trajectories()[static_cast<std::size_t>(best)];
}

}  // namespace tqlab
