#include "tqlab/mdp.hpp"

#include <algorithm>
#include <set>
#include <sstream>

namespace tqlab {

Vocabulary::Vocabulary(std::vector<std::string> names, TokenId eos_index)
    : tokens(std::move(names)), eos(eos_index) {
  if (tokens.size() < 2) throw Error("vocabulary needs at least two tokens (one plus EOS)");
  if (eos < 0 || eos >= size()) throw Error("EOS index outside the vocabulary");
  std::set<std::string> seen(tokens.begin(), tokens.end());
  if (seen.size() != tokens.size()) throw Error("vocabulary token names must be unique");
}

Vocabulary Vocabulary::with_eos(std::vector<std::string> content_names) {
  content_names.push_back("EOS");
  TokenId eos_index = static_cast<TokenId>(content_names.size()) - 1;
  return Vocabulary(std::move(content_names), eos_index);
}

TokenId Vocabulary::index_of(std::string_view name) const {
  for (int i = 0; i < size(); ++i) {
    if (tokens[i] == name) return i;
  }
  return -1;
}

StepOutcome advance(const DecodeState& state, TokenId token, const Vocabulary& vocab,
                    int horizon) {
  if (!vocab.contains(token)) {
    throw Error("advance: token " + std::to_string(token) + " outside the vocabulary");
  }
  if (state.step() >= horizon) {
    throw Error("advance: state is already at the horizon; force_terminate instead");
  }
  if (token == vocab.eos) {
    Trajectory t;
    t.response = state.partial;
    t.response.push_back(vocab.eos);
    t.forced_eos = false;
    return t;
  }
  DecodeState next;
  next.prompt = state.prompt;
  next.partial = state.partial;
  next.partial.push_back(token);
  return next;
}

Trajectory force_terminate(const DecodeState& state, const Vocabulary& vocab, int horizon) {
  if (state.step() != horizon) {
    throw Error("force_terminate: state is not at the horizon");
  }
  Trajectory t;
  t.response = state.partial;
  t.response.push_back(vocab.eos);
  t.forced_eos = true;
  return t;
}

ResponseSpace::ResponseSpace(Vocabulary vocab, int horizon, std::size_t node_cap)
    : vocab_(std::move(vocab)), horizon_(horizon) {
  if (horizon_ < 0) throw Error("horizon must be nonnegative");
  const int m = vocab_.size();
  const int branching = m - 1;

  depth_begin_.assign(horizon_ + 2, 0);
  parent_.push_back(-1);
  token_.push_back(-1);
  depth_of_.push_back(0);
  depth_begin_[1] = 1;
  for (int d = 0; d < horizon_; ++d) {
    const int begin = depth_begin_[d];
    const int end = depth_begin_[d + 1];
    for (int n = begin; n < end; ++n) {
      for (TokenId t = 0; t < m; ++t) {
        if (t == vocab_.eos) continue;
        if (parent_.size() >= node_cap) {
          throw EnumerationCapError("response space exceeds the node cap (" +
                                    std::to_string(node_cap) + " nodes)");
        }
        parent_.push_back(n);
        token_.push_back(t);
        depth_of_.push_back(d + 1);
      }
    }
    depth_begin_[d + 2] = static_cast<int>(parent_.size());
  }

  first_child_.assign(parent_.size(), -1);
  for (int d = 0; d < horizon_; ++d) {
    const int begin = depth_begin_[d];
    const int end = depth_begin_[d + 1];
    for (int n = begin; n < end; ++n) {
      first_child_[n] = depth_begin_[d + 1] + (n - begin) * branching;
    }
  }

  traj_begin_.assign(horizon_ + 2, 0);
  for (int d = 0; d <= horizon_; ++d) {
    traj_begin_[d + 1] = traj_begin_[d] + (depth_begin_[d + 1] - depth_begin_[d]);
  }

  trajectories_.reserve(parent_.size());
  for (std::size_t n = 0; n < parent_.size(); ++n) {
    Trajectory t;
    t.response = prefix_of(static_cast<int>(n));
    t.response.push_back(vocab_.eos);
    t.forced_eos = (depth_of_[n] == horizon_);
    trajectories_.push_back(std::move(t));
  }
}

int ResponseSpace::child(int node, TokenId t) const {
  if (t == vocab_.eos || depth_of_[node] == horizon_) return -1;
  const int rank = t - (t > vocab_.eos ? 1 : 0);
  return first_child_[node] + rank;
}

int ResponseSpace::node_at(std::span<const TokenId> prefix) const {
  int n = root();
  for (TokenId t : prefix) {
    if (!vocab_.contains(t)) return -1;
    n = child(n, t);
    if (n < 0) return -1;
  }
  return n;
}

std::vector<TokenId> ResponseSpace::prefix_of(int node) const {
  std::vector<TokenId> out;
  for (int n = node; n != 0; n = parent_[n]) out.push_back(token_[n]);
  std::reverse(out.begin(), out.end());
  return out;
}

int ResponseSpace::trajectory_at(int node) const {
  const int d = depth_of_[node];
  return traj_begin_[d] + (node - depth_begin_[d]);
}

int ResponseSpace::node_of_trajectory(int traj) const {
  // traj_begin_ and depth_begin_ run in lockstep, so the inverse is direct.
  for (int d = 0; d <= horizon_; ++d) {
    if (traj < traj_begin_[d + 1]) return depth_begin_[d] + (traj - traj_begin_[d]);
  }
  throw Error("trajectory index out of range");
}

std::string ResponseSpace::format_tokens(std::span<const TokenId> toks) const {
  std::ostringstream os;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    if (i) os << ' ';
    os << vocab_.tokens[toks[i]];
  }
  return os.str();
}

std::string ResponseSpace::format_trajectory(const Trajectory& t) const {
  std::string s = format_tokens(std::span<const TokenId>(t.response));
  if (t.forced_eos) s += " (forced)";
  return s;
}

std::vector<Trajectory> enumerate_trajectories(const Vocabulary& vocab, int horizon,
                                               std::size_t node_cap) {
  return ResponseSpace(vocab, horizon, node_cap).trajectories();
}

}  // namespace tqlab
