// Token-level finite-horizon MDP over a small vocabulary. States are
// (prompt, partial response); transitions append one token; EOS terminates.
// A response that is still open after T generated tokens is closed by a
// forced EOS. The horizon keeps the whole trajectory space enumerable, and
// ResponseSpace materializes it once: the canonical prefix tree plus the
// canonical trajectory order (by content length, then lexicographic by token
// index) that every table in the library is aligned to.
#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "tqlab/common.hpp"

namespace tqlab {

struct Vocabulary {
  std::vector<std::string> tokens;
  TokenId eos = -1;

  Vocabulary() = default;
  // Validates: at least two tokens, unique names, eos index in range.
  Vocabulary(std::vector<std::string> names, TokenId eos_index);
  // Convenience: content token names plus a final "EOS".
  static Vocabulary with_eos(std::vector<std::string> content_names);

  int size() const { return static_cast<int>(tokens.size()); }
  bool contains(TokenId t) const { return t >= 0 && t < size(); }
  // -1 when the name is absent.
  TokenId index_of(std::string_view name) const;
};

struct Prompt {
  std::string id;
  std::vector<TokenId> tokens;
};

// response always ends in exactly one EOS; content() strips it.
struct Trajectory {
  std::vector<TokenId> response;
  bool forced_eos = false;

  std::span<const TokenId> content() const {
    return std::span<const TokenId>(response.data(), response.size() - 1);
  }
  int content_length() const { return static_cast<int>(response.size()) - 1; }
  bool operator==(const Trajectory&) const = default;
};

struct DecodeState {
  Prompt prompt;
  std::vector<TokenId> partial;

  int step() const { return static_cast<int>(partial.size()); }
};

using StepOutcome = std::variant<DecodeState, Trajectory>;

// Appends one chosen token. EOS completes the trajectory; a non-EOS token
// yields the successor state, which the caller must force_terminate once
// step() == horizon. Throws Error on an out-of-vocabulary token or when the
// state is already at the horizon.
StepOutcome advance(const DecodeState& state, TokenId token, const Vocabulary& vocab,
                    int horizon);

// Closes a state sitting exactly at the horizon with a forced EOS.
Trajectory force_terminate(const DecodeState& state, const Vocabulary& vocab, int horizon);

inline constexpr std::size_t kDefaultEnumCap = 1'000'000;

// Prefix tree over EOS-free partial responses, depth 0..horizon. Nodes are
// numbered breadth-first (depth by depth, lexicographic within a depth), so
// children of one node are contiguous. Every node owns exactly one
// trajectory: chosen EOS at depth < horizon, forced EOS at depth == horizon.
// Immutable after construction; safe for concurrent reads.
class ResponseSpace {
 public:
  ResponseSpace(Vocabulary vocab, int horizon, std::size_t node_cap = kDefaultEnumCap);

  const Vocabulary& vocab() const { return vocab_; }
  int horizon() const { return horizon_; }
  std::size_t num_nodes() const { return parent_.size(); }
  int num_decision_nodes() const { return depth_begin_[horizon_]; }
  const std::vector<Trajectory>& trajectories() const { return trajectories_; }
  int num_trajectories() const { return static_cast<int>(trajectories_.size()); }

  int root() const { return 0; }
  int depth(int node) const { return depth_of_[node]; }
  int parent(int node) const { return parent_[node]; }
  TokenId incoming_token(int node) const { return token_[node]; }
  // -1 for EOS or when node is at the horizon.
  int child(int node, TokenId t) const;
  // -1 when the prefix contains EOS or is longer than the horizon.
  int node_at(std::span<const TokenId> prefix) const;
  std::vector<TokenId> prefix_of(int node) const;
  // The trajectory that ends exactly at this node.
  int trajectory_at(int node) const;
  // The node where this trajectory's content ends.
  int node_of_trajectory(int traj) const;
  // Nodes of depth d form the contiguous index range [depth_begin, depth_end).
  int depth_begin(int d) const { return depth_begin_[d]; }
  int depth_end(int d) const { return depth_begin_[d + 1]; }

  std::string format_tokens(std::span<const TokenId> toks) const;
  std::string format_trajectory(const Trajectory& t) const;

 private:
  Vocabulary vocab_;
  int horizon_;
  std::vector<int> parent_;
  std::vector<TokenId> token_;
  std::vector<int> depth_of_;
  std::vector<int> first_child_;
  std::vector<int> depth_begin_;  // size horizon_ + 2
  std::vector<int> traj_begin_;   // trajectory index offset per depth
  std::vector<Trajectory> trajectories_;
};

// The full trajectory set in canonical order. Throws EnumerationCapError when
// the prefix tree would exceed node_cap nodes.
std::vector<Trajectory> enumerate_trajectories(const Vocabulary& vocab, int horizon,
                                               std::size_t node_cap = kDefaultEnumCap);

}  // namespace tqlab
