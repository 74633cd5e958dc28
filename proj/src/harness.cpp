#include "tqlab/harness.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>

#include "json.hpp"
#include "tqlab/toml.hpp"

namespace tqlab {

namespace {

using ordered_json = nlohmann::ordered_json;

// Shortest exact decimal for CSV cells; JSON uses the library's round-trip
// serializer. %.17g round-trips every double.
std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string at_line(int line) { return " (line " + std::to_string(line) + ")"; }

void require_name(const std::string& s, const std::string& field, int line) {
  auto ok_char = [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
  };
  if (s.empty() || s.size() > 64 || !std::all_of(s.begin(), s.end(), ok_char)) {
    throw ConfigError(field + " must be a nonempty name (letters, digits, '_', '-', '.', at most "
                      "64 characters)" + at_line(line));
  }
}

double positive_number(const toml::Value& v, const std::string& field) {
  const double x = v.as_number(field);
  if (!std::isfinite(x) || x <= 0.0) {
    throw ConfigError(field + " must be a positive finite number" + at_line(v.line()));
  }
  return x;
}

std::int64_t int_at_least(const toml::Value& v, const std::string& field, std::int64_t lo) {
  const std::int64_t x = v.as_int(field);
  if (x < lo) {
    throw ConfigError(field + " must be an integer >= " + std::to_string(lo) + at_line(v.line()));
  }
  return x;
}

std::vector<double> positive_number_list(const toml::Value& v, const std::string& field) {
  std::vector<double> out;
  for (const toml::Value& e : v.as_array(field)) out.push_back(positive_number(e, field));
  if (out.empty()) throw ConfigError(field + " must not be empty" + at_line(v.line()));
  return out;
}

DecoderKind decoder_kind_of(const std::string& s, int line) {
  for (DecoderKind k : {DecoderKind::sft, DecoderKind::best_of_n, DecoderKind::args,
                        DecoderKind::cd, DecoderKind::tq_direct, DecoderKind::tq_indirect}) {
    if (s == decoder_name(k)) return k;
  }
  throw ConfigError("decoding.decoders: unknown decoder \"" + s + "\"" + at_line(line));
}

RewardSpec parse_reward_spec(const toml::Value& v, const std::string& section) {
  const toml::Table& t = v.as_table(section);
  toml::check_keys(t,
                   {"kind", "id", "weights", "scale", "offset", "values", "records", "steps",
                    "learning_rate"},
                   section);
  RewardSpec spec;
  if (const toml::Value* kv = toml::find(t, "kind")) {
    const std::string& kind = kv->as_string(section + ".kind");
    if (kind == "token_weights") {
      spec.kind = RewardSpec::Kind::token_weights;
    } else if (kind == "table") {
      spec.kind = RewardSpec::Kind::table;
    } else if (kind == "bt_fit") {
      spec.kind = RewardSpec::Kind::bt_fit;
    } else {
      throw ConfigError(section + ".kind must be \"token_weights\", \"table\", or \"bt_fit\"" +
                        at_line(kv->line()));
    }
  }
  if (const toml::Value* idv = toml::find(t, "id")) {
    spec.id = idv->as_string(section + ".id");
    require_name(spec.id, section + ".id", idv->line());
  }
  const toml::Value* wv = toml::find(t, "weights");
  const toml::Value* valv = toml::find(t, "values");
  switch (spec.kind) {
    case RewardSpec::Kind::token_weights: {
      if (!wv) throw ConfigError(section + ": token_weights kind requires a weights list" +
                                 at_line(v.line()));
      for (const toml::Value& e : wv->as_array(section + ".weights")) {
        const double x = e.as_number(section + ".weights");
        if (!std::isfinite(x)) {
          throw ConfigError(section + ".weights entries must be finite" + at_line(e.line()));
        }
        spec.weights.push_back(x);
      }
      if (const toml::Value* sv = toml::find(t, "scale")) {
        spec.scale = sv->as_number(section + ".scale");
        if (!std::isfinite(spec.scale)) {
          throw ConfigError(section + ".scale must be finite" + at_line(sv->line()));
        }
      }
      if (const toml::Value* ov = toml::find(t, "offset")) {
        spec.offset = ov->as_number(section + ".offset");
        if (!std::isfinite(spec.offset)) {
          throw ConfigError(section + ".offset must be finite" + at_line(ov->line()));
        }
      }
      if (valv) throw ConfigError(section + ".values is only valid for the table kind" +
                                  at_line(valv->line()));
      break;
    }
    case RewardSpec::Kind::table: {
      if (!valv) throw ConfigError(section + ": table kind requires a values table" +
                                   at_line(v.line()));
      for (const auto& [pid, pv] : valv->as_table(section + ".values")) {
        std::vector<double> vals;
        for (const toml::Value& e : pv.as_array(section + ".values." + pid)) {
          const double x = e.as_number(section + ".values." + pid);
          if (!std::isfinite(x)) {
            throw ConfigError(section + ".values." + pid + " entries must be finite" +
                              at_line(e.line()));
          }
          vals.push_back(x);
        }
        spec.values[pid] = std::move(vals);
      }
      if (wv) throw ConfigError(section + ".weights is only valid for the token_weights kind" +
                                at_line(wv->line()));
      break;
    }
    case RewardSpec::Kind::bt_fit: {
      if (wv || valv) {
        throw ConfigError(section + ": bt_fit kind takes records/steps/learning_rate only" +
                          at_line(v.line()));
      }
      if (const toml::Value* rv = toml::find(t, "records")) {
        spec.bt_records = static_cast<int>(int_at_least(*rv, section + ".records", 1));
      }
      if (const toml::Value* sv = toml::find(t, "steps")) {
        spec.bt_steps = static_cast<int>(int_at_least(*sv, section + ".steps", 1));
      }
      if (const toml::Value* lv = toml::find(t, "learning_rate")) {
        spec.bt_learning_rate = positive_number(*lv, section + ".learning_rate");
      }
      break;
    }
  }
  // Reject fit knobs on non-fit kinds so typos cannot silently vanish.
  if (spec.kind != RewardSpec::Kind::bt_fit) {
    for (const char* key : {"records", "steps", "learning_rate"}) {
      if (const toml::Value* kv = toml::find(t, key)) {
        throw ConfigError(section + "." + key + " is only valid for the bt_fit kind" +
                          at_line(kv->line()));
      }
    }
  }
  return spec;
}

void parse_instance(const toml::Value& v, InstanceConfig& ic) {
  const toml::Table& t = v.as_table("instance");
  toml::check_keys(t,
                   {"id", "vocab", "horizon", "r_max", "forced_reward", "prompts", "sft",
                    "reward", "baseline_reward"},
                   "instance");
  if (const toml::Value* idv = toml::find(t, "id")) {
    ic.id = idv->as_string("instance.id");
    require_name(ic.id, "instance.id", idv->line());
  }
  const toml::Value* vocab_v = toml::find(t, "vocab");
  if (!vocab_v) throw ConfigError("instance.vocab is required" + at_line(v.line()));
  for (const toml::Value& e : vocab_v->as_array("instance.vocab")) {
    const std::string& name = e.as_string("instance.vocab");
    require_name(name, "instance.vocab entry", e.line());
    if (name == "EOS") {
      throw ConfigError("instance.vocab must not contain \"EOS\"; it is appended automatically" +
                        at_line(e.line()));
    }
    if (std::find(ic.vocab.begin(), ic.vocab.end(), name) != ic.vocab.end()) {
      throw ConfigError("instance.vocab repeats \"" + name + "\"" + at_line(e.line()));
    }
    ic.vocab.push_back(name);
  }
  if (ic.vocab.empty()) {
    throw ConfigError("instance.vocab must list at least one content token" +
                      at_line(vocab_v->line()));
  }
  if (const toml::Value* hv = toml::find(t, "horizon")) {
    ic.horizon = static_cast<int>(int_at_least(*hv, "instance.horizon", 1));
  }
  if (const toml::Value* rv = toml::find(t, "r_max")) {
    ic.r_max = positive_number(*rv, "instance.r_max");
  }
  if (const toml::Value* fv = toml::find(t, "forced_reward")) {
    const std::string& mode = fv->as_string("instance.forced_reward");
    if (mode == "full") {
      ic.forced = ForcedRewardMode::full;
    } else if (mode == "zero") {
      ic.forced = ForcedRewardMode::zero;
    } else {
      throw ConfigError("instance.forced_reward must be \"full\" or \"zero\"" +
                        at_line(fv->line()));
    }
  }

  if (const toml::Value* pv = toml::find(t, "prompts")) {
    for (const toml::Value& ev : pv->as_array("instance.prompts")) {
      const toml::Table& pt = ev.as_table("instance.prompts entry");
      toml::check_keys(pt, {"id", "tokens"}, "instance.prompts entry");
      Prompt p;
      const toml::Value* idv = toml::find(pt, "id");
      if (!idv) throw ConfigError("instance.prompts entry needs an id" + at_line(ev.line()));
      p.id = idv->as_string("instance.prompts.id");
      require_name(p.id, "instance.prompts.id", idv->line());
      for (const Prompt& seen : ic.prompts) {
        if (seen.id == p.id) {
          throw ConfigError("instance.prompts repeats id \"" + p.id + "\"" + at_line(idv->line()));
        }
      }
      if (const toml::Value* tv = toml::find(pt, "tokens")) {
        for (const toml::Value& tok : tv->as_array("instance.prompts.tokens")) {
          const std::string& name = tok.as_string("instance.prompts.tokens");
          auto it = std::find(ic.vocab.begin(), ic.vocab.end(), name);
          if (it == ic.vocab.end()) {
            throw ConfigError("instance.prompts.tokens: \"" + name +
                              "\" is not a content token of the vocabulary" + at_line(tok.line()));
          }
          p.tokens.push_back(static_cast<TokenId>(it - ic.vocab.begin()));
        }
      }
      ic.prompts.push_back(std::move(p));
    }
    if (ic.prompts.empty()) {
      throw ConfigError("instance.prompts must not be empty" + at_line(pv->line()));
    }
  } else {
    ic.prompts.push_back(Prompt{"p0", {}});
  }

  if (const toml::Value* sv = toml::find(t, "sft")) {
    const toml::Table& st = sv->as_table("instance.sft");
    toml::check_keys(st, {"kind", "concentration", "rows"}, "instance.sft");
    if (const toml::Value* kv = toml::find(st, "kind")) {
      const std::string& kind = kv->as_string("instance.sft.kind");
      if (kind == "uniform") {
        ic.sft.kind = SftSpec::Kind::uniform;
      } else if (kind == "dirichlet") {
        ic.sft.kind = SftSpec::Kind::dirichlet;
      } else if (kind == "table") {
        ic.sft.kind = SftSpec::Kind::table;
      } else {
        throw ConfigError("instance.sft.kind must be \"uniform\", \"dirichlet\", or \"table\"" +
                          at_line(kv->line()));
      }
    }
    if (const toml::Value* cv = toml::find(st, "concentration")) {
      if (ic.sft.kind != SftSpec::Kind::dirichlet) {
        throw ConfigError("instance.sft.concentration is only valid for the dirichlet kind" +
                          at_line(cv->line()));
      }
      ic.sft.concentration = positive_number(*cv, "instance.sft.concentration");
    }
    if (const toml::Value* rv = toml::find(st, "rows")) {
      if (ic.sft.kind != SftSpec::Kind::table) {
        throw ConfigError("instance.sft.rows is only valid for the table kind" +
                          at_line(rv->line()));
      }
      for (const auto& [pid, pv2] : rv->as_table("instance.sft.rows")) {
        std::vector<std::vector<double>> rows;
        for (const toml::Value& row_v : pv2.as_array("instance.sft.rows." + pid)) {
          std::vector<double> row;
          for (const toml::Value& cell : row_v.as_array("instance.sft.rows." + pid)) {
            row.push_back(cell.as_number("instance.sft.rows." + pid));
          }
          rows.push_back(std::move(row));
        }
        ic.sft.rows[pid] = std::move(rows);
      }
    } else if (ic.sft.kind == SftSpec::Kind::table) {
      throw ConfigError("instance.sft: table kind requires rows" + at_line(sv->line()));
    }
  }

  if (const toml::Value* rv = toml::find(t, "reward")) {
    ic.reward = parse_reward_spec(*rv, "instance.reward");
  } else {
    // Default reward: fraction of the horizon filled with content.
    ic.reward.kind = RewardSpec::Kind::token_weights;
    ic.reward.id = "length_fraction";
    ic.reward.weights.assign(ic.vocab.size() + 1, 1.0);
    ic.reward.weights.back() = 0.0;  // EOS
    ic.reward.scale = 1.0 / ic.horizon;
    ic.reward.offset = 0.0;
  }
  if (const toml::Value* bv = toml::find(t, "baseline_reward")) {
    ic.baseline = parse_reward_spec(*bv, "instance.baseline_reward");
  }

  // token_weights sizes are checkable now: one weight per token including EOS.
  auto check_weights = [&](const RewardSpec& spec, const std::string& section) {
    if (spec.kind == RewardSpec::Kind::token_weights &&
        spec.weights.size() != ic.vocab.size() + 1) {
      throw ConfigError(section + ".weights needs one entry per vocabulary token including EOS (" +
                        std::to_string(ic.vocab.size() + 1) + ")" + at_line(v.line()));
    }
  };
  check_weights(ic.reward, "instance.reward");
  if (ic.baseline) check_weights(*ic.baseline, "instance.baseline_reward");
  if (ic.forced == ForcedRewardMode::zero) {
    if (ic.reward.kind == RewardSpec::Kind::bt_fit ||
        (ic.baseline && ic.baseline->kind == RewardSpec::Kind::bt_fit)) {
      throw ConfigError("forced_reward = \"zero\" is not supported with bt_fit rewards" +
                        at_line(v.line()));
    }
  }
}

void parse_alignment(const toml::Value& v, ExperimentConfig& cfg) {
  const toml::Table& t = v.as_table("alignment");
  toml::check_keys(t, {"beta", "alpha", "k"}, "alignment");
  if (const toml::Value* bv = toml::find(t, "beta")) {
    cfg.betas = positive_number_list(*bv, "alignment.beta");
  }
  if (const toml::Value* av = toml::find(t, "alpha")) {
    cfg.alphas = positive_number_list(*av, "alignment.alpha");
  }
  if (const toml::Value* kv = toml::find(t, "k")) {
    cfg.ks.clear();
    for (const toml::Value& e : kv->as_array("alignment.k")) {
      cfg.ks.push_back(static_cast<int>(int_at_least(e, "alignment.k", 1)));
    }
    if (cfg.ks.empty()) throw ConfigError("alignment.k must not be empty" + at_line(kv->line()));
  }
}

void parse_decoding(const toml::Value& v, ExperimentConfig& cfg) {
  const toml::Table& t = v.as_table("decoding");
  toml::check_keys(t,
                   {"decoders", "mode", "n_rollouts", "greedy", "n_best", "args_weight",
                    "candidate_source", "anchor"},
                   "decoding");
  if (const toml::Value* dv = toml::find(t, "decoders")) {
    cfg.decoders.clear();
    for (const toml::Value& e : dv->as_array("decoding.decoders")) {
      DecoderKind kind = decoder_kind_of(e.as_string("decoding.decoders"), e.line());
      if (std::find(cfg.decoders.begin(), cfg.decoders.end(), kind) != cfg.decoders.end()) {
        throw ConfigError("decoding.decoders repeats \"" + std::string(decoder_name(kind)) +
                          "\"" + at_line(e.line()));
      }
      cfg.decoders.push_back(kind);
    }
    if (cfg.decoders.empty()) {
      throw ConfigError("decoding.decoders must not be empty" + at_line(dv->line()));
    }
  }
  if (const toml::Value* mv = toml::find(t, "mode")) {
    const std::string& mode = mv->as_string("decoding.mode");
    if (mode == "exact") {
      cfg.mode = ScoreMode::exact;
    } else if (mode == "mc") {
      cfg.mode = ScoreMode::monte_carlo;
    } else {
      throw ConfigError("decoding.mode must be \"exact\" or \"mc\"" + at_line(mv->line()));
    }
  }
  if (const toml::Value* nv = toml::find(t, "n_rollouts")) {
    cfg.n_rollouts = static_cast<int>(int_at_least(*nv, "decoding.n_rollouts", 1));
  }
  if (const toml::Value* gv = toml::find(t, "greedy")) {
    cfg.greedy = gv->as_bool("decoding.greedy");
  }
  if (const toml::Value* bv = toml::find(t, "n_best")) {
    cfg.n_best = static_cast<int>(int_at_least(*bv, "decoding.n_best", 0));
  }
  if (const toml::Value* wv = toml::find(t, "args_weight")) {
    cfg.args_weight = positive_number(*wv, "decoding.args_weight");
  }
  if (const toml::Value* cv = toml::find(t, "candidate_source")) {
    const std::string& src = cv->as_string("decoding.candidate_source");
    if (src == "baseline") {
      cfg.candidate_source = CandidateSource::baseline;
    } else if (src == "target") {
      cfg.candidate_source = CandidateSource::target;
    } else {
      throw ConfigError("decoding.candidate_source must be \"baseline\" or \"target\"" +
                        at_line(cv->line()));
    }
  }
  if (const toml::Value* av = toml::find(t, "anchor")) {
    const std::string& anchor = av->as_string("decoding.anchor");
    if (anchor == "target") {
      cfg.anchor = AnchorChoice::target;
    } else if (anchor == "baseline") {
      cfg.anchor = AnchorChoice::baseline;
    } else {
      throw ConfigError("decoding.anchor must be \"target\" or \"baseline\"" + at_line(av->line()));
    }
  }
}

void parse_run(const toml::Value& v, ExperimentConfig& cfg) {
  const toml::Table& t = v.as_table("run");
  toml::check_keys(t, {"seed", "out_dir"}, "run");
  if (const toml::Value* sv = toml::find(t, "seed")) {
    cfg.seed = static_cast<std::uint64_t>(int_at_least(*sv, "run.seed", 0));
  }
  if (const toml::Value* ov = toml::find(t, "out_dir")) {
    cfg.out_dir = ov->as_string("run.out_dir");
    if (cfg.out_dir.empty()) {
      throw ConfigError("run.out_dir must not be empty" + at_line(ov->line()));
    }
  }
}

TrajectoryReward build_reward(const RewardSpec& spec, const SpacePtr& space,
                              const std::vector<Prompt>& prompts, double r_max,
                              ForcedRewardMode forced, std::uint64_t seed,
                              const std::string& section) {
  // Factory rejections stem from configured values: reclassify for the
  // caller so they exit as config errors, with the section named.
  const auto reclassify = [&](const Error& e) -> ConfigError {
    return ConfigError(section + ": " + e.what());
  };
  switch (spec.kind) {
    case RewardSpec::Kind::token_weights:
      try {
        return TrajectoryReward::token_weights(space, spec.weights, spec.scale, spec.offset, r_max,
                                               spec.id, forced);
      } catch (const ConfigError&) {
        throw;
      } catch (const Error& e) {
        throw reclassify(e);
      }
    case RewardSpec::Kind::table: {
      for (const Prompt& p : prompts) {
        auto it = spec.values.find(p.id);
        if (it == spec.values.end()) {
          throw ConfigError(section + ".values is missing prompt \"" + p.id + "\"");
        }
        if (static_cast<int>(it->second.size()) != space->num_trajectories()) {
          throw ConfigError(section + ".values." + p.id + " has " +
                            std::to_string(it->second.size()) + " entries; the space enumerates " +
                            std::to_string(space->num_trajectories()) + " trajectories");
        }
      }
      for (const auto& [pid, vals] : spec.values) {
        bool known = false;
        for (const Prompt& p : prompts) known = known || p.id == pid;
        if (!known) {
          throw ConfigError(section + ".values names unknown prompt \"" + pid + "\"");
        }
      }
      try {
        return TrajectoryReward::table(space, spec.values, r_max, spec.id, forced);
      } catch (const ConfigError&) {
        throw;
      } catch (const Error& e) {
        throw reclassify(e);
      }
    }
    case RewardSpec::Kind::bt_fit: {
      std::vector<std::string> prompt_ids;
      for (const Prompt& p : prompts) prompt_ids.push_back(p.id);
      const std::uint64_t fit_seed = StreamKey(seed).with(section).value();
      StarDatasetResult star =
          synthetic_star_dataset(space, prompts, spec.bt_records, r_max, fit_seed);
      BtFitResult fit = fit_reward_bt(space, prompt_ids, star.dataset, spec.bt_steps,
                                      spec.bt_learning_rate, r_max, fit_seed);
      TrajectoryReward reward = fit.reward;
      reward.set_metadata("config_id", spec.id);
      reward.set_metadata("bt_final_loss", fmt(fit.final_loss));
      reward.set_metadata("bt_records", std::to_string(spec.bt_records));
      reward.set_metadata("bt_steps", std::to_string(spec.bt_steps));
      reward.set_metadata("bt_learning_rate", fmt(spec.bt_learning_rate));
      return reward;
    }
  }
  throw Error(section + ": unknown reward kind");
}

TokenPolicy build_sft(const SftSpec& spec, const SpacePtr& space, const Prompt& prompt,
                      std::uint64_t seed) {
  switch (spec.kind) {
    case SftSpec::Kind::uniform:
      return TokenPolicy::uniform(space, prompt.id);
    case SftSpec::Kind::dirichlet: {
      RngStream rng = StreamKey(seed).with("sft").with(prompt.id).stream();
      return TokenPolicy::dirichlet(space, prompt.id, rng, spec.concentration);
    }
    case SftSpec::Kind::table: {
      auto it = spec.rows.find(prompt.id);
      if (it == spec.rows.end()) {
        throw ConfigError("instance.sft.rows is missing prompt \"" + prompt.id + "\"");
      }
      if (static_cast<int>(it->second.size()) != space->num_decision_nodes()) {
        throw ConfigError("instance.sft.rows." + prompt.id + " has " +
                          std::to_string(it->second.size()) + " rows; the space has " +
                          std::to_string(space->num_decision_nodes()) + " decision nodes");
      }
      TokenPolicy::Rows rows;
      for (const std::vector<double>& row : it->second) {
        if (static_cast<int>(row.size()) != space->vocab().size()) {
          throw ConfigError("instance.sft.rows." + prompt.id +
                            " rows need one probability per vocabulary token including EOS (" +
                            std::to_string(space->vocab().size()) + ")");
        }
        rows.emplace_back(row);
      }
      return TokenPolicy::from_rows(space, prompt.id, std::move(rows));
    }
  }
  throw Error("instance.sft: unknown kind");
}

// One report row: a (prompt, beta, alpha, k, decoder) cell of the grid.
struct Row {
  std::string prompt_id;
  DecoderKind kind = DecoderKind::sft;
  double alpha = 1.0;
  double beta = 0.5;
  int k = 0;
  int k_effective = 0;
  std::string trajectory;
  bool forced_eos = false;
  double reward = 0.0;
  double diversity_v = 0.0;
  double coherence_v = 0.0;
  double e_bl_reward = 0.0;  // expected target reward under the target-aligned tilt
  std::optional<double> expected_reward;
  std::optional<double> kl_alg_sft;
  bool kl_alg_sft_infinite = false;
  std::optional<double> sub_gap_v;
  std::optional<double> normalized;
  std::optional<BoundReport> bound;
};

Row compute_row(const DecodingSetup& setup, const ExperimentConfig& cfg, DecoderKind kind,
                double alpha, int k) {
  DecoderConfig dc;
  dc.alpha = alpha;
  dc.k = k;
  dc.n_rollouts = cfg.n_rollouts;
  dc.mode = cfg.mode;
  dc.candidate_source = cfg.candidate_source;
  dc.anchor = cfg.anchor;
  dc.greedy = cfg.greedy;
  dc.seed = cfg.seed;
  dc.n_best = cfg.n_best;
  dc.args_weight = cfg.args_weight;

  DecoderInputs inputs = kind == DecoderKind::tq_direct     ? setup.direct_inputs()
                         : kind == DecoderKind::tq_indirect ? setup.indirect_inputs()
                                                            : setup.plain_inputs();
  Decoder dec(kind, &inputs, dc);
  DecodeResult res = dec.decode();

  Row row;
  row.prompt_id = setup.prompt.id;
  row.kind = kind;
  row.alpha = alpha;
  row.beta = setup.beta;
  row.k = k;
  row.k_effective = dec.config().k;
  row.trajectory = setup.space->format_trajectory(res.trajectory);
  row.forced_eos = res.trajectory.forced_eos;
  row.reward = setup.target.of(setup.prompt, res.trajectory);
  row.diversity_v = diversity(res.trajectory.content());
  row.coherence_v = default_coherence(setup.space->vocab().size())(setup.prompt.tokens,
                                                                   res.trajectory.content());
  row.e_bl_reward = v_of(setup.rho_bl_target.policy, setup.target, setup.prompt);

  if (cfg.mode == ScoreMode::exact && dec.has_step_semantics()) {
    TrajectoryPolicy rho_alg = induced_rho_alg(dec);
    row.expected_reward = v_of(rho_alg, setup.target, setup.prompt);
    row.sub_gap_v = sub_gap(*setup.space, setup.target, setup.prompt, rho_alg);
    try {
      row.kl_alg_sft = kl_trajectory(rho_alg, setup.rho_sft);
    } catch (const AbsoluteContinuityError&) {
      row.kl_alg_sft_infinite = true;
    }
    const bool full_candidates = dec.config().k == setup.space->vocab().size();
    if (full_candidates && kind == DecoderKind::tq_direct) {
      row.bound = bound_check(dec);
    } else if (full_candidates && kind == DecoderKind::tq_indirect) {
      row.bound = indirect_bound_info(dec);
    }
  }
  return row;
}

// Setups are heavyweight (two tilts plus a transfer per prompt and beta);
// decoders keep pointers into them, so they are cached behind stable
// addresses for the whole run.
class SetupCache {
 public:
  explicit SetupCache(const Instance& instance) : instance_(instance) {}

  const DecodingSetup& at(const std::string& prompt_id, double beta) {
    const std::string key = prompt_id + '\x1f' + fmt(beta);
    auto it = cache_.find(key);
    if (it == cache_.end()) {
      it = cache_.emplace(key, std::make_unique<DecodingSetup>(make_setup(instance_, prompt_id,
                                                                          beta)))
               .first;
    }
    return *it->second;
  }

 private:
  const Instance& instance_;
  std::map<std::string, std::unique_ptr<DecodingSetup>> cache_;
};

std::vector<Row> compute_grid(const ExperimentConfig& cfg, const Instance& instance,
                              const std::vector<double>& betas, const std::vector<double>& alphas,
                              const std::vector<int>& ks) {
  SetupCache setups(instance);
  std::vector<Row> rows;
  for (const PromptCase& pc : instance.cases) {
    for (double beta : betas) {
      const DecodingSetup& setup = setups.at(pc.prompt.id, beta);
      for (double alpha : alphas) {
        for (int k : ks) {
          for (DecoderKind kind : cfg.decoders) {
            try {
              rows.push_back(compute_row(setup, cfg, kind, alpha, k));
            } catch (const Error& e) {
              throw Error("prompt=" + pc.prompt.id + " decoder=" + decoder_name(kind) +
                          " beta=" + fmt(beta) + " alpha=" + fmt(alpha) +
                          " k=" + std::to_string(k) + ": " + e.what());
            }
          }
        }
      }
    }
  }
  // Normalized reward needs the sft and tq_direct cells of the same combo.
  std::map<std::string, std::pair<std::optional<double>, std::optional<double>>> window;
  auto combo_key = [](const Row& r) {
    return r.prompt_id + '\x1f' + fmt(r.beta) + '\x1f' + fmt(r.alpha) + '\x1f' +
           std::to_string(r.k);
  };
  for (const Row& r : rows) {
    if (r.kind == DecoderKind::sft) window[combo_key(r)].first = r.reward;
    if (r.kind == DecoderKind::tq_direct) window[combo_key(r)].second = r.reward;
  }
  for (Row& r : rows) {
    const auto& [sft_r, tq_r] = window[combo_key(r)];
    if (sft_r && tq_r) r.normalized = normalized_reward(r.reward, *sft_r, *tq_r);
  }
  return rows;
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << content;
  if (!out) throw Error("failed writing " + path.string());
}

void json_set_optional(ordered_json& j, const char* key, const std::optional<double>& v) {
  if (v) {
    j[key] = *v;
  } else {
    j[key] = nullptr;
  }
}

ordered_json bound_json(const BoundReport& b) {
  ordered_json j;
  j["prompt"] = b.prompt_id;
  j["alpha"] = b.alpha;
  j["beta"] = b.beta;
  j["v_star"] = b.v_star;
  j["v_alg"] = b.v_alg;
  j["sub_gap"] = b.sub_gap;
  j["kl_star_sft"] = b.kl_star_infinite ? ordered_json(nullptr) : ordered_json(b.kl_star_sft);
  j["kl_star_infinite"] = b.kl_star_infinite;
  j["h_alpha"] = b.h_alpha;
  j["bound_gap"] = b.kl_star_infinite ? ordered_json(nullptr) : ordered_json(b.bound_gap);
  j["slack_gap"] = b.kl_star_infinite ? ordered_json(nullptr) : ordered_json(b.slack_gap);
  j["gap_bound_holds"] = b.gap_bound_holds;
  j["sub_gap_point"] = b.sub_gap_point;
  j["kl_point_sft"] = b.kl_point_infinite ? ordered_json(nullptr) : ordered_json(b.kl_point_sft);
  j["kl_point_infinite"] = b.kl_point_infinite;
  j["bound_gap_point"] =
      b.kl_point_infinite ? ordered_json(nullptr) : ordered_json(b.bound_gap_point);
  j["gap_bound_point_holds"] = b.gap_bound_point_holds;
  j["kl_alg_sft"] = b.kl_alg_sft;
  j["bound_kl"] = b.bound_kl;
  j["slack_kl"] = b.slack_kl;
  j["kl_bound_holds"] = b.kl_bound_holds;
  j["informational"] = b.informational;
  return j;
}

bool bound_failed(const BoundReport& b) {
  return !b.informational &&
         !(b.gap_bound_holds && b.gap_bound_point_holds && b.kl_bound_holds);
}

std::string rows_jsonl(const ExperimentConfig& cfg, const Instance& instance,
                       const std::vector<Row>& rows, const std::string& fingerprint) {
  std::string out;
  for (const Row& r : rows) {
    ordered_json j;
    j["schema_version"] = kSchemaVersion;
    j["instance"] = instance.id;
    j["fingerprint"] = fingerprint;
    j["seed"] = cfg.seed;
    j["mode"] = cfg.mode == ScoreMode::exact ? "exact" : "mc";
    j["greedy"] = cfg.greedy;
    j["prompt"] = r.prompt_id;
    j["decoder"] = decoder_name(r.kind);
    j["alpha"] = r.alpha;
    j["beta"] = r.beta;
    j["k"] = r.k;
    j["k_effective"] = r.k_effective;
    j["trajectory"] = r.trajectory;
    j["forced_eos"] = r.forced_eos;
    j["reward"] = r.reward;
    json_set_optional(j, "expected_reward", r.expected_reward);
    json_set_optional(j, "kl_alg_sft", r.kl_alg_sft);
    j["kl_alg_sft_infinite"] = r.kl_alg_sft_infinite;
    json_set_optional(j, "sub_gap", r.sub_gap_v);
    json_set_optional(j, "normalized_reward", r.normalized);
    j["diversity"] = r.diversity_v;
    j["coherence_proxy"] = r.coherence_v;
    j["e_bl_reward"] = r.e_bl_reward;
    j["bound"] = r.bound ? bound_json(*r.bound) : ordered_json(nullptr);
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::string opt_cell(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

std::string summary_csv(const Instance& instance, const ExperimentConfig& cfg,
                        const std::vector<Row>& rows) {
  std::string out =
      "instance,prompt,decoder,alpha,beta,k,mode,trajectory,forced_eos,reward,expected_reward,"
      "normalized_reward,diversity,coherence_proxy,kl_alg_sft,sub_gap,slack_gap,slack_kl,bound\n";
  const char* mode = cfg.mode == ScoreMode::exact ? "exact" : "mc";
  for (const Row& r : rows) {
    out += instance.id;
    out += ',' + r.prompt_id;
    out += ',';
    out += decoder_name(r.kind);
    out += ',' + fmt(r.alpha) + ',' + fmt(r.beta) + ',' + std::to_string(r.k) + ',' + mode;
    out += ',' + r.trajectory;
    out += ',' + std::string(r.forced_eos ? "1" : "0");
    out += ',' + fmt(r.reward);
    out += ',' + opt_cell(r.expected_reward);
    out += ',' + opt_cell(r.normalized);
    out += ',' + fmt(r.diversity_v);
    out += ',' + fmt(r.coherence_v);
    out += ',' + (r.kl_alg_sft_infinite ? "inf" : opt_cell(r.kl_alg_sft));
    out += ',' + opt_cell(r.sub_gap_v);
    if (r.bound) {
      out += ',' + (r.bound->kl_star_infinite ? "inf" : fmt(r.bound->slack_gap));
      out += ',' + fmt(r.bound->slack_kl);
      out += ',';
      out += r.bound->informational ? "info" : (bound_failed(*r.bound) ? "FAIL" : "ok");
    } else {
      out += ",,,";
    }
    out += '\n';
  }
  return out;
}

std::string tradeoff_csv(const std::vector<Row>& rows) {
  std::string out = "prompt,decoder,alpha,beta,k,kl_alg_sft,expected_reward\n";
  for (const Row& r : rows) {
    if (!r.expected_reward || !r.kl_alg_sft) continue;
    out += r.prompt_id;
    out += ',';
    out += decoder_name(r.kind);
    out += ',' + fmt(r.alpha) + ',' + fmt(r.beta) + ',' + std::to_string(r.k);
    out += ',' + fmt(*r.kl_alg_sft) + ',' + fmt(*r.expected_reward) + '\n';
  }
  return out;
}

std::string report_json(const ExperimentConfig& cfg, const Instance& instance,
                        const std::vector<Row>& rows, const std::string& fingerprint,
                        int bound_failures) {
  ordered_json j;
  j["schema_version"] = kSchemaVersion;
  j["instance"] = instance.id;
  j["fingerprint"] = fingerprint;
  j["seed"] = cfg.seed;
  j["mode"] = cfg.mode == ScoreMode::exact ? "exact" : "mc";
  j["greedy"] = cfg.greedy;
  j["betas"] = cfg.betas;
  j["alphas"] = cfg.alphas;
  j["ks"] = cfg.ks;
  std::vector<std::string> names;
  for (DecoderKind k : cfg.decoders) names.emplace_back(decoder_name(k));
  j["decoders"] = names;
  j["rows"] = static_cast<int>(rows.size());
  j["bound_failures"] = bound_failures;
  std::map<std::string, std::pair<double, int>> mean_reward;
  std::map<std::string, std::pair<double, int>> mean_expected;
  for (const Row& r : rows) {
    auto& mr = mean_reward[decoder_name(r.kind)];
    mr.first += r.reward;
    mr.second += 1;
    if (r.expected_reward) {
      auto& me = mean_expected[decoder_name(r.kind)];
      me.first += *r.expected_reward;
      me.second += 1;
    }
  }
  ordered_json jr, je;
  for (const auto& [name, acc] : mean_reward) jr[name] = acc.first / acc.second;
  for (const auto& [name, acc] : mean_expected) je[name] = acc.first / acc.second;
  j["mean_reward"] = jr;
  j["mean_expected_reward"] = je;
  return j.dump(2) + "\n";
}

int count_bound_failures(const std::vector<Row>& rows) {
  int n = 0;
  for (const Row& r : rows) {
    if (r.bound && bound_failed(*r.bound)) ++n;
  }
  return n;
}

}  // namespace

ExperimentConfig parse_config(std::string_view text, const std::string& origin) {
  toml::Value root_v = toml::parse_string(text, origin);
  const toml::Table& root = root_v.as_table("config");
  toml::check_keys(root, {"instance", "alignment", "decoding", "run"}, "config");
  ExperimentConfig cfg;
  const toml::Value* inst_v = toml::find(root, "instance");
  if (!inst_v) throw ConfigError(origin + ": missing required [instance] section");
  parse_instance(*inst_v, cfg.instance);
  if (const toml::Value* v = toml::find(root, "alignment")) parse_alignment(*v, cfg);
  if (const toml::Value* v = toml::find(root, "decoding")) parse_decoding(*v, cfg);
  if (const toml::Value* v = toml::find(root, "run")) parse_run(*v, cfg);
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

std::size_t enum_cap_from_env() {
  const char* v = std::getenv("TQLAB_ENUM_CAP");
  if (!v || !*v) return kDefaultEnumCap;
  char* end = nullptr;
  const unsigned long long x = std::strtoull(v, &end, 10);
  if (end == v || *end != '\0' || x == 0) {
    throw ConfigError("TQLAB_ENUM_CAP must be a positive integer, got \"" + std::string(v) + "\"");
  }
  return static_cast<std::size_t>(x);
}

Instance build_instance(const ExperimentConfig& config) {
  const InstanceConfig& ic = config.instance;
  SpacePtr space = std::make_shared<const ResponseSpace>(Vocabulary::with_eos(ic.vocab),
                                                         ic.horizon, enum_cap_from_env());
  Instance inst;
  inst.id = ic.id;
  inst.space = space;
  inst.r_max = ic.r_max;
  inst.target =
      build_reward(ic.reward, space, ic.prompts, ic.r_max, ic.forced, config.seed, "reward");
  if (ic.baseline) {
    inst.baseline = build_reward(*ic.baseline, space, ic.prompts, ic.r_max, ic.forced, config.seed,
                                 "baseline_reward");
    inst.has_distinct_baseline = true;
  } else {
    inst.baseline = inst.target;
    inst.has_distinct_baseline = false;
  }
  for (const Prompt& p : ic.prompts) {
    TokenPolicy pi = build_sft(ic.sft, space, p, config.seed);
    TrajectoryPolicy rho = to_trajectory_policy(pi);
    inst.cases.push_back(PromptCase{p, std::move(pi), std::move(rho)});
  }
  return inst;
}

std::string config_fingerprint(const ExperimentConfig& config) {
  std::ostringstream ss;
  const char sep = '\x1f';
  ss << "schema" << sep << kSchemaVersion << sep;
  const InstanceConfig& ic = config.instance;
  ss << ic.id << sep;
  for (const std::string& t : ic.vocab) ss << t << sep;
  ss << ic.horizon << sep << fmt(ic.r_max) << sep
     << (ic.forced == ForcedRewardMode::full ? "full" : "zero") << sep;
  for (const Prompt& p : ic.prompts) {
    ss << p.id << sep;
    for (TokenId t : p.tokens) ss << t << sep;
  }
  ss << static_cast<int>(ic.sft.kind) << sep << fmt(ic.sft.concentration) << sep;
  for (const auto& [pid, rows] : ic.sft.rows) {
    ss << pid << sep;
    for (const auto& row : rows)
      for (double x : row) ss << fmt(x) << sep;
  }
  auto reward_part = [&](const RewardSpec& r) {
    ss << static_cast<int>(r.kind) << sep << r.id << sep;
    for (double w : r.weights) ss << fmt(w) << sep;
    ss << fmt(r.scale) << sep << fmt(r.offset) << sep;
    for (const auto& [pid, vals] : r.values) {
      ss << pid << sep;
      for (double x : vals) ss << fmt(x) << sep;
    }
    ss << r.bt_records << sep << r.bt_steps << sep << fmt(r.bt_learning_rate) << sep;
  };
  reward_part(ic.reward);
  ss << (ic.baseline ? "baseline" : "shared") << sep;
  if (ic.baseline) reward_part(*ic.baseline);
  for (double b : config.betas) ss << fmt(b) << sep;
  ss << '|' << sep;
  for (double a : config.alphas) ss << fmt(a) << sep;
  ss << '|' << sep;
  for (int k : config.ks) ss << k << sep;
  ss << '|' << sep;
  for (DecoderKind k : config.decoders) ss << decoder_name(k) << sep;
  ss << (config.mode == ScoreMode::exact ? "exact" : "mc") << sep << config.n_rollouts << sep
     << config.greedy << sep << config.n_best << sep << fmt(config.args_weight) << sep
     << static_cast<int>(config.candidate_source) << sep << static_cast<int>(config.anchor) << sep
     << config.seed;
  const std::string blob = ss.str();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : blob) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

RunOutcome run_experiment(const ExperimentConfig& config) {
  Instance instance = build_instance(config);
  const std::string fingerprint = config_fingerprint(config);
  std::vector<Row> rows = compute_grid(config, instance, config.betas, config.alphas, config.ks);
  const int bound_failures = count_bound_failures(rows);

  const std::filesystem::path out_dir(config.out_dir);
  std::filesystem::create_directories(out_dir);
  write_file(out_dir / "rows.jsonl", rows_jsonl(config, instance, rows, fingerprint));
  write_file(out_dir / "summary.csv", summary_csv(instance, config, rows));
  write_file(out_dir / "tradeoff.csv", tradeoff_csv(rows));
  write_file(out_dir / "report.json",
             report_json(config, instance, rows, fingerprint, bound_failures));

  RunOutcome outcome;
  outcome.rows = static_cast<int>(rows.size());
  outcome.bound_failures = bound_failures;
  outcome.out_dir = out_dir.string();
  return outcome;
}

RunOutcome run_sweep(const ExperimentConfig& config, const std::string& axis) {
  if (axis != "alpha" && axis != "beta" && axis != "k") {
    throw ConfigError("sweep axis must be \"alpha\", \"beta\", or \"k\", got \"" + axis + "\"");
  }
  Instance instance = build_instance(config);
  const std::string fingerprint = config_fingerprint(config);
  std::vector<double> betas{config.betas.front()};
  std::vector<double> alphas{config.alphas.front()};
  std::vector<int> ks{config.ks.front()};
  if (axis == "beta") betas = config.betas;
  if (axis == "alpha") alphas = config.alphas;
  if (axis == "k") ks = config.ks;
  std::vector<Row> rows = compute_grid(config, instance, betas, alphas, ks);

  std::string out = "axis,value,prompt,decoder,alpha,beta,k,k_effective,reward,expected_reward,"
                    "diversity,kl_alg_sft,e_bl_reward\n";
  for (const Row& r : rows) {
    const std::string value =
        axis == "beta" ? fmt(r.beta) : axis == "alpha" ? fmt(r.alpha) : std::to_string(r.k);
    out += axis + ',' + value + ',' + r.prompt_id + ',';
    out += decoder_name(r.kind);
    out += ',' + fmt(r.alpha) + ',' + fmt(r.beta) + ',' + std::to_string(r.k) + ',' +
           std::to_string(r.k_effective);
    out += ',' + fmt(r.reward);
    out += ',' + opt_cell(r.expected_reward);
    out += ',' + fmt(r.diversity_v);
    out += ',' + (r.kl_alg_sft_infinite ? "inf" : opt_cell(r.kl_alg_sft));
    out += ',' + fmt(r.e_bl_reward) + '\n';
  }
  const std::filesystem::path out_dir(config.out_dir);
  std::filesystem::create_directories(out_dir);
  write_file(out_dir / ("sweep_" + axis + ".csv"), out);

  RunOutcome outcome;
  outcome.rows = static_cast<int>(rows.size());
  outcome.bound_failures = count_bound_failures(rows);
  outcome.out_dir = out_dir.string();
  return outcome;
}

VerifyOutcome run_verify(const ExperimentConfig& config, int n_instances, std::ostream& log) {
  if (n_instances < 1) throw ConfigError("verify needs at least one instance");
  const double betas[] = {0.1, 0.5, 1.0};
  const double alphas[] = {0.5, 1.0, 2.0};

  VerifyOutcome out;
  std::string csv =
      "instance,seed,content_tokens,horizon,beta,alpha,sub_gap,slack_gap,slack_gap_point,"
      "slack_kl,gap_ok,kl_ok,transfer_norm_rel_err,transfer_pointwise_err,transfer_ok,"
      "objective_slack,objective_ok\n";

  for (int i = 0; i < n_instances; ++i) {
    RandomInstanceSpec spec;
    spec.content_tokens = 1 + (i % 5);
    spec.horizon = 1 + ((i / 5) % 5);
    spec.num_prompts = 1;
    spec.distinct_baseline = true;
    const std::uint64_t inst_seed = StreamKey(config.seed).with("verify").with(
        static_cast<std::uint64_t>(i)).value();
    const double beta = betas[i % 3];
    const double alpha = alphas[(i / 3) % 3];

    Instance instance = random_instance(spec, inst_seed);
    DecodingSetup setup = make_setup(instance, "p0", beta);
    DecoderInputs inputs = setup.direct_inputs();
    DecoderConfig dc;
    dc.alpha = alpha;
    dc.k = setup.space->vocab().size();
    dc.seed = config.seed;
    Decoder dec(DecoderKind::tq_direct, &inputs, dc);
    BoundReport rep = bound_check(dec);

    // Bound checks: a tiny negative slack is floating-point noise, anything
    // beyond the tolerance is a violation.
    const double tol = 1e-8;
    const bool gap_ok = (rep.kl_star_infinite || rep.slack_gap >= -tol) &&
                        (rep.kl_point_infinite || rep.bound_gap_point - rep.sub_gap_point >= -tol);
    const bool kl_ok = rep.slack_kl >= -tol;
    if (!rep.kl_star_infinite) out.worst_slack_gap = std::min(out.worst_slack_gap, rep.slack_gap);
    out.worst_slack_kl = std::min(out.worst_slack_kl, rep.slack_kl);

    // Transfer identities: the unnormalized transferred mass must equal
    // Z_target / Z_baseline, and the transferred policy must match the
    // directly aligned one pointwise.
    const double log_ratio =
        setup.rho_bl_target.log_partition - setup.rho_bl_baseline.log_partition;
    double norm_err = 0.0;
    if (setup.rho_r.log_transfer_normalizer) {
      norm_err = std::abs(std::expm1(*setup.rho_r.log_transfer_normalizer - log_ratio));
    }
    double pointwise_err = 0.0;
    for (int tr = 0; tr < setup.space->num_trajectories(); ++tr) {
      pointwise_err = std::max(
          pointwise_err, std::abs(setup.rho_r.policy.prob(tr) - setup.rho_bl_target.policy.prob(tr)));
    }
    const bool transfer_ok = norm_err <= 1e-10 && pointwise_err <= 1e-10;
    out.worst_transfer_normalizer_rel_err =
        std::max(out.worst_transfer_normalizer_rel_err, norm_err);
    out.worst_transfer_pointwise_err = std::max(out.worst_transfer_pointwise_err, pointwise_err);

    // Step-objective optimality: the decoded distribution must beat seeded
    // competitor distributions on the same candidate set. A corrupted score
    // or a mis-solved step shows up as a negative slack here.
    double objective_slack = std::numeric_limits<double>::infinity();
    const TokenPolicy& anchor = dec.anchor_policy();
    for (int node = 0; node < setup.space->num_decision_nodes(); ++node) {
      StepDistribution sd;
      try {
        sd = dec.step(node);
      } catch (const UnreachablePrefixError&) {
        continue;
      }
      std::vector<double> own_p(sd.log_probs.size());
      for (std::size_t c = 0; c < own_p.size(); ++c) own_p[c] = std::exp(sd.log_probs[c]);
      const double own = step_objective(sd, own_p, anchor, alpha);
      RngStream rng = StreamKey(config.seed)
                          .with("verify-objective")
                          .with(static_cast<std::uint64_t>(i))
                          .with(static_cast<std::uint64_t>(node))
                          .stream();
      double best_rival = -std::numeric_limits<double>::infinity();
      for (int rival = 0; rival < 16; ++rival) {
        std::vector<double> p(sd.candidates.size());
        double total = 0.0;
        for (double& x : p) {
          x = rng.exponential();
          total += x;
        }
        for (double& x : p) x /= total;
        try {
          best_rival = std::max(best_rival, step_objective(sd, p, anchor, alpha));
        } catch (const AbsoluteContinuityError&) {
          continue;  // rival puts mass where the anchor has none
        }
      }
      if (std::isfinite(best_rival)) {
        objective_slack = std::min(objective_slack, own - best_rival);
      }
    }
    const bool objective_ok = objective_slack >= -1e-9;
    if (std::isfinite(objective_slack)) {
      out.worst_objective_slack = std::min(out.worst_objective_slack, objective_slack);
    }

    out.instances += 1;
    out.checks += 4;  // gap bound, kl bound, transfer, objective
    const bool all_ok = gap_ok && kl_ok && transfer_ok && objective_ok;
    if (!gap_ok) out.violations += 1;
    if (!kl_ok) out.violations += 1;
    if (!transfer_ok) out.violations += 1;
    if (!objective_ok) out.violations += 1;

    csv += std::to_string(i) + ',' + std::to_string(inst_seed) + ',' +
           std::to_string(spec.content_tokens) + ',' + std::to_string(spec.horizon) + ',' +
           fmt(beta) + ',' + fmt(alpha) + ',' + fmt(rep.sub_gap) + ',' +
           (rep.kl_star_infinite ? "inf" : fmt(rep.slack_gap)) + ',' +
           (rep.kl_point_infinite ? "inf" : fmt(rep.bound_gap_point - rep.sub_gap_point)) + ',' +
           fmt(rep.slack_kl) + ',' + (gap_ok ? "1" : "0") + ',' + (kl_ok ? "1" : "0") + ',' +
           fmt(norm_err) + ',' + fmt(pointwise_err) + ',' + (transfer_ok ? "1" : "0") + ',' +
           (std::isfinite(objective_slack) ? fmt(objective_slack) : "inf") + ',' +
           (objective_ok ? "1" : "0") + '\n';

    char grid[64];
    std::snprintf(grid, sizeof grid, "beta=%g alpha=%g", beta, alpha);
    log << "verify[" << i << "]: |V|=" << spec.content_tokens + 1 << " T=" << spec.horizon << ' '
        << grid << (all_ok ? " ok" : " VIOLATION") << "\n";
  }

  const std::filesystem::path out_dir(config.out_dir);
  std::filesystem::create_directories(out_dir);
  write_file(out_dir / "verify.csv", csv);

  log << "verify: " << out.instances << " instances, " << out.checks << " checks, "
      << out.violations << " violations\n";
  log << "verify: worst slack_gap=" << fmt(out.worst_slack_gap)
      << " worst slack_kl=" << fmt(out.worst_slack_kl)
      << " worst transfer_norm_rel_err=" << fmt(out.worst_transfer_normalizer_rel_err)
      << " worst transfer_pointwise_err=" << fmt(out.worst_transfer_pointwise_err)
      << " worst objective_slack=" << fmt(out.worst_objective_slack) << "\n";
  return out;
}

void run_oracle(const ExperimentConfig& config, const std::string& what, std::ostream& out) {
  Instance instance = build_instance(config);
  const ResponseSpace& space = *instance.space;
  if (what == "qstar" || what == "qpi") {
    out << "prompt,node,prefix,token,value\n";
    for (const PromptCase& pc : instance.cases) {
      ScoreTable table = what == "qstar"
                             ? build_q_star_table(space, instance.target, pc.prompt)
                             : build_q_pi_table(pc.pi_sft, instance.target, pc.prompt);
      for (int node = 0; node < space.num_decision_nodes(); ++node) {
        for (TokenId t = 0; t < space.vocab().size(); ++t) {
          out << pc.prompt.id << ',' << node << ',' << space.format_tokens(space.prefix_of(node))
              << ',' << space.vocab().tokens[t] << ',' << fmt(table.at(node, t)) << '\n';
        }
      }
    }
  } else if (what == "rho") {
    const double beta = config.betas.front();
    out << "prompt,beta,trajectory,prob_sft,prob_bl,log_z\n";
    for (const PromptCase& pc : instance.cases) {
      AlignedPolicy aligned = rlhf_optimal_policy(pc.rho_sft, instance.target, pc.prompt, beta);
      for (int tr = 0; tr < space.num_trajectories(); ++tr) {
        out << pc.prompt.id << ',' << fmt(beta) << ','
            << space.format_trajectory(space.trajectories()[tr]) << ','
            << fmt(pc.rho_sft.prob(tr)) << ',' << fmt(aligned.policy.prob(tr)) << ','
            << fmt(aligned.log_partition) << '\n';
      }
    }
  } else if (what == "partition") {
    out << "prompt,beta,log_z,z\n";
    for (const PromptCase& pc : instance.cases) {
      for (double beta : config.betas) {
        AlignedPolicy aligned = rlhf_optimal_policy(pc.rho_sft, instance.target, pc.prompt, beta);
        out << pc.prompt.id << ',' << fmt(beta) << ',' << fmt(aligned.log_partition) << ','
            << fmt(std::exp(aligned.log_partition)) << '\n';
      }
    }
  } else {
    throw ConfigError("oracle table must be \"qstar\", \"qpi\", \"rho\", or \"partition\", got \"" +
                      what + "\"");
  }
}

}  // namespace tqlab
