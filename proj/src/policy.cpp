#include "tqlab/policy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace tqlab {
namespace {

constexpr double kNormTol = 1e-9;

// Marsaglia-Tsang for shape >= 1; shape < 1 boosts through Gamma(shape + 1).
// Exponential shortcut keeps the shape == 1 path exact and cheap.
double sample_gamma(RngStream& rng, double shape) {
  if (shape == 1.0) return rng.exponential();
  if (shape < 1.0) {
    const double u = rng.u01();
    return sample_gamma(rng, shape + 1.0) * std::pow(u, 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      const double u1 = rng.u01();
      const double u2 = rng.u01();
      x = std::sqrt(-2.0 * std::log(1.0 - u1)) * std::cos(6.283185307179586 * u2);
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = rng.u01();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

void check_row_normalized(std::span<const double> log_row, int node) {
  double sum = 0.0;
  for (double lp : log_row) sum += std::exp(lp);
  if (std::abs(sum - 1.0) > kNormTol) {
    throw Error("token policy row at node " + std::to_string(node) +
                " sums to " + std::to_string(sum) + ", expected 1");
  }
}

}  // namespace

TokenPolicy::TokenPolicy(SpacePtr space, std::string prompt_id, Rows log_rows)
    : space_(std::move(space)), prompt_id_(std::move(prompt_id)), log_rows_(std::move(log_rows)) {
  const int decision_nodes = space_->num_decision_nodes();
  if (static_cast<int>(log_rows_.size()) != decision_nodes) {
    throw Error("token policy row count does not match the decision-node count");
  }
  const std::size_t m = static_cast<std::size_t>(space_->vocab().size());
  for (int n = 0; n < decision_nodes; ++n) {
    if (!log_rows_[n]) continue;
    if (log_rows_[n]->size() != m) {
      throw Error("token policy row at node " + std::to_string(n) + " has wrong arity");
    }
    check_row_normalized(*log_rows_[n], n);
  }
}

TokenPolicy TokenPolicy::from_rows(SpacePtr space, std::string prompt_id, Rows probability_rows) {
  for (auto& row : probability_rows) {
    if (!row) continue;
    for (double& p : *row) {
      if (p < 0.0 || !std::isfinite(p)) throw Error("token probability outside [0, 1]");
      p = p == 0.0 ? kNegInf : std::log(p);
    }
  }
  return TokenPolicy(std::move(space), std::move(prompt_id), std::move(probability_rows));
}

TokenPolicy TokenPolicy::from_log_rows(SpacePtr space, std::string prompt_id, Rows log_rows) {
  return TokenPolicy(std::move(space), std::move(prompt_id), std::move(log_rows));
}

TokenPolicy TokenPolicy::uniform(SpacePtr space, std::string prompt_id) {
  const int m = space->vocab().size();
  Rows rows(space->num_decision_nodes(),
            std::vector<double>(m, -std::log(static_cast<double>(m))));
  return TokenPolicy(std::move(space), std::move(prompt_id), std::move(rows));
}

TokenPolicy TokenPolicy::dirichlet(SpacePtr space, std::string prompt_id, RngStream& rng,
                                   double concentration) {
  if (concentration <= 0.0) throw Error("Dirichlet concentration must be positive");
  const int m = space->vocab().size();
  const int decision_nodes = space->num_decision_nodes();
  Rows rows(decision_nodes);
  for (int n = 0; n < decision_nodes; ++n) {
    std::vector<double> g(m);
    double total = 0.0;
    for (int t = 0; t < m; ++t) {
      g[t] = std::max(sample_gamma(rng, concentration), 1e-300);
      total += g[t];
    }
    std::vector<double> row(m);
    for (int t = 0; t < m; ++t) row[t] = std::log(g[t]) - std::log(total);
    rows[n] = std::move(row);
  }
  return from_log_rows(std::move(space), std::move(prompt_id), std::move(rows));
}

bool TokenPolicy::defined_at(int node) const {
  if (node < 0 || node >= static_cast<int>(log_rows_.size())) return false;
  return log_rows_[node].has_value();
}

std::span<const double> TokenPolicy::log_row(int node) const {
  if (node < 0 || node >= static_cast<int>(log_rows_.size())) {
    throw Error("token policy query at a non-decision node");
  }
  if (!log_rows_[node]) {
    throw UnreachablePrefixError("token policy undefined at node " + std::to_string(node) +
                                 " (state " + space_->format_tokens(space_->prefix_of(node)) +
                                 " carries zero mass)");
  }
  return *log_rows_[node];
}

TokenId TokenPolicy::sample(int node, RngStream& rng) const {
  auto row = log_row(node);
  const double u = rng.u01();
  double acc = 0.0;
  TokenId last_positive = -1;
  for (TokenId t = 0; t < static_cast<TokenId>(row.size()); ++t) {
    const double p = std::exp(row[t]);
    if (p <= 0.0) continue;
    last_positive = t;
    acc += p;
    if (u < acc) return t;
  }
  if (last_positive < 0) throw Error("token policy row has no positive mass");
  return last_positive;
}

std::vector<TokenId> TokenPolicy::top_k(int node, int k) const {
  auto row = log_row(node);
  const int m = static_cast<int>(row.size());
  if (k < 1) throw Error("top_k: k must be at least 1");
  k = std::min(k, m);
  std::vector<TokenId> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](TokenId a, TokenId b) {
    if (row[a] != row[b]) return row[a] > row[b];
    return a < b;
  });
  order.resize(k);
  return order;
}

TrajectoryPolicy::TrajectoryPolicy(SpacePtr space, std::string prompt_id,
                                   std::vector<double> log_probs)
    : space_(std::move(space)), prompt_id_(std::move(prompt_id)), log_probs_(std::move(log_probs)) {
  if (static_cast<int>(log_probs_.size()) != space_->num_trajectories()) {
    throw Error("trajectory policy length does not match the enumeration");
  }
  double sum = 0.0;
  for (double lp : log_probs_) {
    if (std::isnan(lp) || lp > 1e-9) throw Error("trajectory log probability above 0");
    sum += std::exp(lp);
  }
  if (std::abs(sum - 1.0) > kNormTol) {
    throw Error("trajectory policy sums to " + std::to_string(sum) + ", expected 1");
  }

  // Prefix masses, deepest level first so children are ready before parents.
  log_prefix_mass_.assign(space_->num_nodes(), kNegInf);
  const int horizon = space_->horizon();
  const int m = space_->vocab().size();
  for (int d = horizon; d >= 0; --d) {
    for (int n = space_->depth_begin(d); n < space_->depth_end(d); ++n) {
      std::vector<double> parts;
      parts.reserve(m);
      parts.push_back(log_probs_[space_->trajectory_at(n)]);
      if (d < horizon) {
        for (TokenId t = 0; t < m; ++t) {
          if (t == space_->vocab().eos) continue;
          parts.push_back(log_prefix_mass_[space_->child(n, t)]);
        }
      }
      log_prefix_mass_[n] = log_sum_exp(parts);
    }
  }
}

TrajectoryPolicy TrajectoryPolicy::from_probs(SpacePtr space, std::string prompt_id,
                                              std::vector<double> probs) {
  for (double& p : probs) {
    if (p < 0.0 || !std::isfinite(p)) throw Error("trajectory probability outside [0, 1]");
    p = p == 0.0 ? kNegInf : std::log(p);
  }
  return TrajectoryPolicy(std::move(space), std::move(prompt_id), std::move(probs));
}

TrajectoryPolicy TrajectoryPolicy::from_log_probs(SpacePtr space, std::string prompt_id,
                                                  std::vector<double> log_probs) {
  return TrajectoryPolicy(std::move(space), std::move(prompt_id), std::move(log_probs));
}

std::pair<TrajectoryPolicy, double> TrajectoryPolicy::normalize_log_weights(
    SpacePtr space, std::string prompt_id, std::vector<double> log_weights) {
  const double log_z = log_sum_exp(log_weights);
  if (!std::isfinite(log_z)) throw Error("log weights have no finite normalizer");
  for (double& lw : log_weights) lw -= log_z;
  return {TrajectoryPolicy(std::move(space), std::move(prompt_id), std::move(log_weights)), log_z};
}

double TrajectoryPolicy::log_conditional(int traj, int node) const {
  const double mass = log_prefix_mass_[node];
  if (mass == kNegInf) {
    throw UnreachablePrefixError("conditional on a zero-mass prefix at node " +
                                 std::to_string(node));
  }
  const std::vector<TokenId> prefix = space_->prefix_of(node);
  const std::span<const TokenId> content = space_->trajectories()[traj].content();
  if (content.size() < prefix.size() ||
      !std::equal(prefix.begin(), prefix.end(), content.begin())) {
    throw Error("conditional of trajectory " + std::to_string(traj) +
                " on a prefix it does not extend");
  }
  return log_probs_[traj] - mass;
}

TokenId TrajectoryPolicy::sample_next(int node, RngStream& rng) const {
  const double mass = log_prefix_mass_[node];
  if (mass == kNegInf) {
    throw UnreachablePrefixError("sampling from a zero-mass prefix at node " +
                                 std::to_string(node));
  }
  const Vocabulary& vocab = space_->vocab();
  const int m = vocab.size();
  const int d = space_->depth(node);
  const double u = rng.u01();
  double acc = 0.0;
  TokenId last_positive = -1;
  for (TokenId t = 0; t < m; ++t) {
    double lp;
    if (t == vocab.eos) {
      lp = log_probs_[space_->trajectory_at(node)] - mass;
    } else if (d < space_->horizon()) {
      lp = log_prefix_mass_[space_->child(node, t)] - mass;
    } else {
      continue;
    }
    const double p = std::exp(lp);
    if (p <= 0.0) continue;
    last_positive = t;
    acc += p;
    if (u < acc) return t;
  }
  if (last_positive < 0) throw Error("conditional has no positive continuation");
  return last_positive;
}

double trajectory_log_prob(const TokenPolicy& policy, const Trajectory& traj) {
  const ResponseSpace& space = policy.space();
  double lp = 0.0;
  int node = space.root();
  for (TokenId t : traj.content()) {
    lp += policy.log_prob(node, t);
    node = space.child(node, t);
    if (node < 0) throw Error("trajectory does not fit the response space");
  }
  if (!traj.forced_eos) {
    lp += policy.log_prob(node, space.vocab().eos);
  } else if (space.depth(node) != space.horizon()) {
    throw Error("forced trajectory shorter than the horizon");
  }
  return lp;
}

TrajectoryPolicy to_trajectory_policy(const TokenPolicy& policy) {
  const ResponseSpace& space = policy.space();
  const int horizon = space.horizon();
  const int m = space.vocab().size();
  // Path log-probability per node; -inf propagates past undefined rows so a
  // policy only needs rows on its own support.
  std::vector<double> path(space.num_nodes(), kNegInf);
  path[0] = 0.0;
  for (int d = 0; d < horizon; ++d) {
    for (int n = space.depth_begin(d); n < space.depth_end(d); ++n) {
      if (path[n] == kNegInf) continue;
      auto row = policy.log_row(n);
      for (TokenId t = 0; t < m; ++t) {
        if (t == space.vocab().eos) continue;
        path[space.child(n, t)] = path[n] + row[t];
      }
    }
  }
  std::vector<double> log_probs(space.num_trajectories(), kNegInf);
  for (int traj = 0; traj < space.num_trajectories(); ++traj) {
    const int node = space.node_of_trajectory(traj);
    if (path[node] == kNegInf) continue;
    if (space.trajectories()[traj].forced_eos) {
      log_probs[traj] = path[node];
    } else {
      log_probs[traj] = path[node] + policy.log_prob(node, space.vocab().eos);
    }
  }
  return TrajectoryPolicy::from_log_probs(policy.space_ptr(), policy.prompt_id(),
                                          std::move(log_probs));
}

TokenPolicy induce_token_policy(const TrajectoryPolicy& rho) {
  const ResponseSpace& space = rho.space();
  const int horizon = space.horizon();
  const int m = space.vocab().size();
  TokenPolicy::Rows rows(space.num_decision_nodes());
  for (int d = 0; d < horizon; ++d) {
    for (int n = space.depth_begin(d); n < space.depth_end(d); ++n) {
      const double mass = rho.log_prefix_mass(n);
      if (mass == kNegInf) continue;
      std::vector<double> row(m, kNegInf);
      for (TokenId t = 0; t < m; ++t) {
        if (t == space.vocab().eos) {
          row[t] = rho.log_prob(space.trajectory_at(n)) - mass;
        } else {
          row[t] = rho.log_prefix_mass(space.child(n, t)) - mass;
        }
      }
      rows[n] = std::move(row);
    }
  }
  return TokenPolicy::from_log_rows(rho.space_ptr(), rho.prompt_id(), std::move(rows));
}

namespace {

int decision_node_of(const TokenPolicy& policy, const DecodeState& state) {
  const ResponseSpace& space = policy.space();
  if (state.prompt.id != policy.prompt_id()) {
    throw Error("state prompt '" + state.prompt.id + "' does not match policy prompt '" +
                policy.prompt_id() + "'");
  }
  if (state.step() >= space.horizon()) {
    throw Error("state at the horizon has no token distribution");
  }
  const int node = space.node_at(state.partial);
  if (node < 0) throw Error("state outside the response space");
  return node;
}

}  // namespace

TokenId sample_token(const TokenPolicy& policy, const DecodeState& state, RngStream& rng) {
  return policy.sample(decision_node_of(policy, state), rng);
}

std::vector<TokenId> top_k_tokens(const TokenPolicy& policy, const DecodeState& state, int k) {
  return policy.top_k(decision_node_of(policy, state), k);
}

double kl_trajectory(const TrajectoryPolicy& p, const TrajectoryPolicy& q) {
  if (p.space().num_trajectories() != q.space().num_trajectories()) {
    throw Error("KL over mismatched trajectory spaces");
  }
  double kl = 0.0;
  for (int i = 0; i < p.space().num_trajectories(); ++i) {
    const double lp = p.log_prob(i);
    if (lp == kNegInf) continue;
    const double lq = q.log_prob(i);
    if (lq == kNegInf) {
      throw AbsoluteContinuityError("KL undefined: mass on trajectory " + std::to_string(i) +
                                    " absent from the reference");
    }
    kl += std::exp(lp) * (lp - lq);
  }
  return kl;
}

double kl_token_row(std::span<const double> log_p, std::span<const double> log_q) {
  if (log_p.size() != log_q.size()) throw Error("KL over mismatched token rows");
  double kl = 0.0;
  for (std::size_t t = 0; t < log_p.size(); ++t) {
    if (log_p[t] == kNegInf) continue;
    if (log_q[t] == kNegInf) {
      throw AbsoluteContinuityError("token KL undefined: reference lacks token " +
                                    std::to_string(t));
    }
    kl += std::exp(log_p[t]) * (log_p[t] - log_q[t]);
  }
  return kl;
}

}  // namespace tqlab
