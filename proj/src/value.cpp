#include "tqlab/value.hpp"

#include <cmath>

namespace tqlab {
namespace {

// State value per node under a policy: defined wherever every row along the
// suffix tree is defined; NaN marks nodes the policy does not cover.
std::vector<double> state_values(const TokenPolicy& policy, const TrajectoryReward& reward,
                                 const Prompt& prompt) {
  const ResponseSpace& space = policy.space();
  const int horizon = space.horizon();
  const int m = space.vocab().size();
  std::vector<double> v(space.num_nodes(), std::numeric_limits<double>::quiet_NaN());
  for (int n = space.depth_begin(horizon); n < space.depth_end(horizon); ++n) {
    v[n] = reward.of_index(prompt, space.trajectory_at(n));
  }
  for (int d = horizon - 1; d >= 0; --d) {
    for (int n = space.depth_begin(d); n < space.depth_end(d); ++n) {
      if (!policy.defined_at(n)) continue;
      auto row = policy.log_row(n);
      double acc = 0.0;
      bool ok = true;
      for (TokenId t = 0; t < m && ok; ++t) {
        const double p = std::exp(row[t]);
        if (p == 0.0) continue;
        double q;
        if (t == space.vocab().eos) {
          q = reward.of_index(prompt, space.trajectory_at(n));
        } else {
          q = v[space.child(n, t)];
          if (std::isnan(q)) ok = false;
        }
        acc += p * q;
      }
      if (ok) v[n] = acc;
    }
  }
  return v;
}

void check_prompt(const std::string& have, const std::string& want, const char* what) {
  if (have != want) {
    throw Error(std::string(what) + ": prompt '" + want + "' does not match '" + have + "'");
  }
}

int decision_node(const ResponseSpace& space, const DecodeState& state) {
  if (state.step() >= space.horizon()) {
    throw Error("no action value at the horizon; the forced EOS is not a choice");
  }
  const int node = space.node_at(state.partial);
  if (node < 0) throw Error("state outside the response space");
  return node;
}

}  // namespace

ScoreTable build_q_pi_table(const TokenPolicy& policy, const TrajectoryReward& reward,
                            const Prompt& prompt) {
  check_prompt(policy.prompt_id(), prompt.id, "build_q_pi_table");
  const ResponseSpace& space = policy.space();
  const int m = space.vocab().size();
  const std::vector<double> v = state_values(policy, reward, prompt);
  ScoreTable table;
  table.provenance = ScoreProvenance::exact_dp;
  table.values.assign(space.num_decision_nodes(), {});
  for (int n = 0; n < space.num_decision_nodes(); ++n) {
    std::vector<double> row(m);
    for (TokenId t = 0; t < m; ++t) {
      row[t] = t == space.vocab().eos ? reward.of_index(prompt, space.trajectory_at(n))
                                      : v[space.child(n, t)];
    }
    table.values[n] = std::move(row);
  }
  return table;
}

double q_pi_exact(const TokenPolicy& policy, const TrajectoryReward& reward, const Prompt& prompt,
                  const DecodeState& state, TokenId token) {
  const ResponseSpace& space = policy.space();
  if (!space.vocab().contains(token)) throw Error("q_pi_exact: token outside the vocabulary");
  const int node = decision_node(space, state);
  const double q = build_q_pi_table(policy, reward, prompt).at(node, token);
  if (std::isnan(q)) {
    throw UnreachablePrefixError("q_pi_exact: policy undefined along the suffix tree");
  }
  return q;
}

ScoreTable build_q_star_table(const ResponseSpace& space, const TrajectoryReward& reward,
                              const Prompt& prompt) {
  const int horizon = space.horizon();
  const int m = space.vocab().size();
  std::vector<double> best(space.num_nodes(), 0.0);
  for (int d = horizon; d >= 0; --d) {
    for (int n = space.depth_begin(d); n < space.depth_end(d); ++n) {
      double b = reward.of_index(prompt, space.trajectory_at(n));
      if (d < horizon) {
        for (TokenId t = 0; t < m; ++t) {
          if (t == space.vocab().eos) continue;
          b = std::max(b, best[space.child(n, t)]);
        }
      }
      best[n] = b;
    }
  }
  ScoreTable table;
  table.provenance = ScoreProvenance::exact_dp;
  table.values.assign(space.num_decision_nodes(), {});
  for (int n = 0; n < space.num_decision_nodes(); ++n) {
    std::vector<double> row(m);
    for (TokenId t = 0; t < m; ++t) {
      row[t] = t == space.vocab().eos ? reward.of_index(prompt, space.trajectory_at(n))
                                      : best[space.child(n, t)];
    }
    table.values[n] = std::move(row);
  }
  return table;
}

double q_star_exact(const ResponseSpace& space, const TrajectoryReward& reward,
                    const Prompt& prompt, const DecodeState& state, TokenId token) {
  if (!space.vocab().contains(token)) throw Error("q_star_exact: token outside the vocabulary");
  return build_q_star_table(space, reward, prompt).at(decision_node(space, state), token);
}

McEstimate q_mc(const TokenPolicy& policy, const TrajectoryReward& reward, const Prompt& prompt,
                const DecodeState& state, TokenId token, int n, RngStream& rng) {
  check_prompt(policy.prompt_id(), prompt.id, "q_mc");
  if (n < 1) throw Error("q_mc: need at least one rollout");
  const ResponseSpace& space = policy.space();
  if (!space.vocab().contains(token)) throw Error("q_mc: token outside the vocabulary");
  decision_node(space, state);  // validates the state
  std::vector<double> returns;
  returns.reserve(n);
  for (int i = 0; i < n; ++i) {
    DecodeState s = state;
    TokenId next = token;
    double ret = 0.0;
    for (;;) {
      StepOutcome out = advance(s, next, space.vocab(), space.horizon());
      if (std::holds_alternative<Trajectory>(out)) {
        ret = trajectory_return(reward, prompt, std::get<Trajectory>(out));
        break;
      }
      s = std::move(std::get<DecodeState>(out));
      if (s.step() == space.horizon()) {
        ret = trajectory_return(reward, prompt, force_terminate(s, space.vocab(), space.horizon()));
        break;
      }
      next = policy.sample(space.node_at(s.partial), rng);
    }
    returns.push_back(ret);
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

double v_star(const ResponseSpace& space, const TrajectoryReward& reward, const Prompt& prompt) {
  double best = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < space.num_trajectories(); ++i) {
    best = std::max(best, reward.of_index(prompt, i));
  }
  return best;
}

double v_of(const TrajectoryPolicy& rho, const TrajectoryReward& reward, const Prompt& prompt) {
  double acc = 0.0;
  for (int i = 0; i < rho.space().num_trajectories(); ++i) {
    const double p = rho.prob(i);
    if (p > 0.0) acc += p * reward.of_index(prompt, i);
  }
  return acc;
}

}  // namespace tqlab
