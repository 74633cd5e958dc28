#include "tqlab/reward.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace tqlab {
namespace {

constexpr double kBoundTol = 1e-12;

int resolve_trajectory(const ResponseSpace& space, std::span<const TokenId> content) {
  const int node = space.node_at(content);
  if (node < 0) {
    throw Error("response is not enumerable in this space");
  }
  return space.trajectory_at(node);
}

}  // namespace

TrajectoryReward TrajectoryReward::token_weights(SpacePtr space, std::vector<double> weights,
                                                 double scale, double offset, double r_max,
                                                 std::string id, ForcedRewardMode forced) {
  TrajectoryReward r;
  r.space_ = std::move(space);
  if (static_cast<int>(weights.size()) != r.space_->vocab().size()) {
    throw Error("reward weights arity does not match the vocabulary");
  }
  r.weights_ = std::move(weights);
  r.scale_ = scale;
  r.offset_ = offset;
  r.r_max_ = r_max;
  r.id_ = std::move(id);
  r.forced_ = forced;
  r.check_bounds({});
  return r;
}

TrajectoryReward TrajectoryReward::table(SpacePtr space,
                                         std::map<std::string, std::vector<double>> values_by_prompt,
                                         double r_max, std::string id, ForcedRewardMode forced) {
  TrajectoryReward r;
  r.space_ = std::move(space);
  for (const auto& [pid, vals] : values_by_prompt) {
    if (static_cast<int>(vals.size()) != r.space_->num_trajectories()) {
      throw Error("reward table for prompt '" + pid + "' does not match the enumeration");
    }
  }
  r.values_by_prompt_ = std::move(values_by_prompt);
  r.r_max_ = r_max;
  r.id_ = std::move(id);
  r.forced_ = forced;
  std::vector<std::string> ids;
  for (const auto& [pid, vals] : r.values_by_prompt_) ids.push_back(pid);
  r.check_bounds(ids);
  return r;
}

void TrajectoryReward::check_bounds(const std::vector<std::string>& prompt_ids) const {
  if (r_max_ <= 0.0 || !std::isfinite(r_max_)) throw Error("r_max must be positive and finite");
  auto check_one = [&](const std::string& pid) {
    for (int i = 0; i < space_->num_trajectories(); ++i) {
      const double v = raw_of_index(pid, i);
      if (!(v >= -kBoundTol && v <= r_max_ + kBoundTol)) {
        throw Error("reward '" + id_ + "' leaves [0, r_max] on response '" +
                    space_->format_trajectory(space_->trajectories()[i]) + "' (value " +
                    std::to_string(v) + ")");
      }
    }
  };
  if (weights_) {
    check_one("");
  } else {
    for (const auto& pid : prompt_ids) check_one(pid);
  }
}

double TrajectoryReward::raw_of_index(const std::string& prompt_id, int traj) const {
  if (weights_) {
    const Trajectory& t = space_->trajectories()[traj];
    double s = 0.0;
    for (TokenId tok : t.content()) s += (*weights_)[tok];
    return scale_ * s + offset_;
  }
  auto it = values_by_prompt_.find(prompt_id);
  if (it == values_by_prompt_.end()) {
    throw Error("reward '" + id_ + "' has no table for prompt '" + prompt_id + "'");
  }
  return it->second[traj];
}

double TrajectoryReward::of_index(const Prompt& prompt, int traj) const {
  if (forced_ == ForcedRewardMode::zero && space_->trajectories()[traj].forced_eos) {
    return 0.0;
  }
  return raw_of_index(prompt.id, traj);
}

double TrajectoryReward::of_response(const Prompt& prompt, std::span<const TokenId> content) const {
  return of_index(prompt, resolve_trajectory(*space_, content));
}

double token_reward(const TrajectoryReward& reward, const Prompt& prompt,
                    std::span<const TokenId> prefix, TokenId token) {
  const ResponseSpace& space = reward.space();
  if (!space.vocab().contains(token)) throw Error("token_reward: token outside the vocabulary");
  if (token != space.vocab().eos) return 0.0;
  // A prefix already at the horizon means this EOS is the forced one.
  return reward.of_response(prompt, prefix);
}

double trajectory_return(const TrajectoryReward& reward, const Prompt& prompt,
                         const Trajectory& traj) {
  return reward.of(prompt, traj);
}

void PreferenceDataset::validate(const ResponseSpace& space) const {
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& rec = records[i];
    if (rec.winner == rec.loser) {
      throw Error("preference record " + std::to_string(i) + " compares a response to itself");
    }
    resolve_trajectory(space, rec.winner);
    resolve_trajectory(space, rec.loser);
  }
}

TabularRewardParams TabularRewardParams::zeros(const ResponseSpace& space,
                                               const std::vector<std::string>& prompt_ids) {
  TabularRewardParams p;
  for (const auto& pid : prompt_ids) {
    p.values[pid] = std::vector<double>(space.num_trajectories(), 0.0);
  }
  return p;
}

double bt_preference_prob(const TrajectoryReward& reward, const Prompt& prompt,
                          std::span<const TokenId> first, std::span<const TokenId> second) {
  const double d = reward.of_response(prompt, first) - reward.of_response(prompt, second);
  return sigmoid(d);
}

BtObjective bt_nll_objective(const ResponseSpace& space, const TabularRewardParams& params,
                             const PreferenceDataset& dataset) {
  if (dataset.records.empty()) throw Error("preference dataset is empty");
  BtObjective out;
  for (const auto& [pid, vals] : params.values) {
    out.gradient.values[pid] = std::vector<double>(vals.size(), 0.0);
  }
  const double inv_n = 1.0 / static_cast<double>(dataset.records.size());
  for (const auto& rec : dataset.records) {
    const int w = resolve_trajectory(space, rec.winner);
    const int l = resolve_trajectory(space, rec.loser);
    const double delta = params.at(rec.prompt_id, w) - params.at(rec.prompt_id, l);
    out.loss += log1p_exp(-delta) * inv_n;
    const double g = (sigmoid(delta) - 1.0) * inv_n;  // d loss / d delta
    out.gradient.values.at(rec.prompt_id)[w] += g;
    out.gradient.values.at(rec.prompt_id)[l] -= g;
  }
  return out;
}

double bt_nll_loss(const ResponseSpace& space, const TabularRewardParams& params,
                   const PreferenceDataset& dataset) {
  return bt_nll_objective(space, params, dataset).loss;
}

BtFitResult fit_reward_bt(SpacePtr space, const std::vector<std::string>& prompt_ids,
                          const PreferenceDataset& dataset, int steps, double learning_rate,
                          double r_max, std::uint64_t seed) {
  if (steps < 0) throw Error("fit_reward_bt: steps must be nonnegative");
  if (learning_rate <= 0.0) throw Error("fit_reward_bt: learning rate must be positive");
  dataset.validate(*space);
  for (const auto& rec : dataset.records) {
    if (std::find(prompt_ids.begin(), prompt_ids.end(), rec.prompt_id) == prompt_ids.end()) {
      throw Error("preference record references unknown prompt '" + rec.prompt_id + "'");
    }
  }

  BtFitResult result;
  result.raw = TabularRewardParams::zeros(*space, prompt_ids);
  for (int s = 0; s < steps; ++s) {
    BtObjective obj = bt_nll_objective(*space, result.raw, dataset);
    for (auto& [pid, vals] : result.raw.values) {
      const auto& grad = obj.gradient.values.at(pid);
      for (std::size_t i = 0; i < vals.size(); ++i) {
        vals[i] -= learning_rate * grad[i];
        if (!std::isfinite(vals[i])) throw Error("fit_reward_bt diverged");
      }
    }
  }
  result.final_loss = bt_nll_loss(*space, result.raw, dataset);

  // Canonicalize into [0, r_max]; the transform is part of the provenance.
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto& [pid, vals] : result.raw.values) {
    for (double v : vals) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  std::map<std::string, std::vector<double>> rescaled;
  double scale = 1.0;
  double offset = 0.5 * r_max - lo;  // constant table maps to the midpoint
  if (hi > lo) {
    scale = r_max / (hi - lo);
    offset = -lo * scale;
  }
  for (const auto& [pid, vals] : result.raw.values) {
    std::vector<double> out(vals.size());
    for (std::size_t i = 0; i < vals.size(); ++i) {
      out[i] = hi > lo ? (vals[i] - lo) * scale : 0.5 * r_max;
    }
    rescaled[pid] = std::move(out);
  }
  result.reward = TrajectoryReward::table(space, std::move(rescaled), r_max, "bt_fit");
  result.rescale_scale = scale;
  result.rescale_offset = offset;
  std::ostringstream meta;
  meta << "steps=" << steps << " lr=" << learning_rate << " seed=" << seed
       << " final_loss=" << result.final_loss;
  result.reward.set_metadata("fit", meta.str());
  std::ostringstream tr;
  tr << "scale=" << scale << " offset=" << offset;
  result.reward.set_metadata("rescale", tr.str());
  return result;
}

TrajectoryReward rescale_reward(const TrajectoryReward& reward, const std::vector<Prompt>& prompts,
                                double lo, double hi) {
  if (!(hi > lo)) throw Error("rescale_reward: need hi > lo");
  const ResponseSpace& space = reward.space();
  double mn = std::numeric_limits<double>::infinity();
  double mx = -mn;
  for (const auto& prompt : prompts) {
    for (int i = 0; i < space.num_trajectories(); ++i) {
      const double v = reward.of_index(prompt, i);
      mn = std::min(mn, v);
      mx = std::max(mx, v);
    }
  }
  std::map<std::string, std::vector<double>> values;
  for (const auto& prompt : prompts) {
    std::vector<double> vals(space.num_trajectories());
    for (int i = 0; i < space.num_trajectories(); ++i) {
      const double v = reward.of_index(prompt, i);
      if (mx == mn) {
        vals[i] = 0.5 * (lo + hi);
      } else if (mn == lo && mx == hi) {
        vals[i] = v;  // already spanning [lo, hi]: keep values bit-identical
      } else {
        vals[i] = lo + (v - mn) * (hi - lo) / (mx - mn);
      }
    }
    values[prompt.id] = std::move(vals);
  }
  TrajectoryReward out = TrajectoryReward::table(reward.space_ptr(), std::move(values),
                                                 std::max(hi, reward.r_max()),
                                                 reward.id() + "_rescaled");
  std::ostringstream tr;
  tr << "lo=" << lo << " hi=" << hi << " observed_min=" << mn << " observed_max=" << mx;
  out.set_metadata("rescale", tr.str());
  return out;
}

StarDatasetResult synthetic_star_dataset(SpacePtr space, const std::vector<Prompt>& prompts,
                                         int num_records, double r_max, std::uint64_t seed) {
  if (prompts.empty()) throw ConfigError("synthetic_star_dataset: need at least one prompt");
  if (!(r_max > 0.0)) throw ConfigError("synthetic_star_dataset: r_max must be positive");
  const int m = space->num_trajectories();
  if (m < 2) throw ConfigError("synthetic_star_dataset: need at least two trajectories");
  const int num_prompts = static_cast<int>(prompts.size());
  const StreamKey root(seed);

  PreferenceDataset ds;
  std::map<std::string, std::vector<double>> truth_values;
  const auto content_of = [&](int traj) {
    const auto c = space->trajectories()[static_cast<std::size_t>(traj)].content();
    return std::vector<TokenId>(c.begin(), c.end());
  };
  const std::vector<TokenId> hub = content_of(0);

  for (int j = 0; j < num_prompts; ++j) {
    const Prompt& prompt = prompts[static_cast<std::size_t>(j)];
    const int share = num_records / num_prompts + (j < num_records % num_prompts ? 1 : 0);
    const int pairs = m - 1;
    const int base = share / pairs;
    const int extra = share % pairs;
    RngStream rng = root.with("star").with(prompt.id).stream();

    std::vector<double> tv(static_cast<std::size_t>(m));
    tv[0] = r_max / 2.0;
    for (int i = 1; i < m; ++i) {
      const int n = base + (i - 1 < extra ? 1 : 0);
      // Win counts whose implied difference logit(k/n) fits inside
      // [-r_max/2, r_max/2], so both endpoints stay inside [0, r_max].
      int klo = std::max(1, static_cast<int>(std::ceil(sigmoid(-r_max / 2.0) * n)));
      while (klo < n && std::log(static_cast<double>(klo) / (n - klo)) < -r_max / 2.0) ++klo;
      int khi = std::min(n - 1, static_cast<int>(std::floor(sigmoid(r_max / 2.0) * n)));
      while (khi > 0 && std::log(static_cast<double>(khi) / (n - khi)) > r_max / 2.0) --khi;
      if (n < 1 || klo > khi)
        throw ConfigError(
            "synthetic_star_dataset: too few records per pair to place an exact win count");
      int k = klo + static_cast<int>(rng.u01() * static_cast<double>(khi - klo + 1));
      k = std::min(k, khi);
      const double diff = std::log(static_cast<double>(k) / (n - k));  // r0 - ri
      tv[static_cast<std::size_t>(i)] = tv[0] - diff;

      const std::vector<TokenId> leaf = content_of(i);
      for (int w = 0; w < k; ++w) ds.records.push_back({prompt.id, hub, leaf});
      for (int w = 0; w < n - k; ++w) ds.records.push_back({prompt.id, leaf, hub});
    }
    truth_values[prompt.id] = std::move(tv);
  }
  ds.validate(*space);
  TrajectoryReward truth =
      TrajectoryReward::table(space, std::move(truth_values), r_max, "star_truth");
  return {std::move(ds), std::move(truth)};
}

}  // namespace tqlab
