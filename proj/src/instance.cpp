#include "tqlab/instance.hpp"

#include <sstream>

namespace tqlab {

const PromptCase& Instance::case_of(const std::string& prompt_id) const {
  for (const PromptCase& pc : cases)
    if (pc.prompt.id == prompt_id) return pc;
  throw Error("instance " + id + ": unknown prompt " + prompt_id);
}

Instance make_i0() {
  auto space = std::make_shared<const ResponseSpace>(Vocabulary::with_eos({"A", "B"}), 3);
  Prompt prompt{"p0", {}};
  TokenPolicy pi_sft = TokenPolicy::uniform(space, prompt.id);
  TrajectoryPolicy rho_sft = to_trajectory_policy(pi_sft);
  // Reward: fraction of A tokens in the content, relative to the horizon.
  TrajectoryReward reward = TrajectoryReward::token_weights(space, {1.0, 0.0, 0.0}, 1.0 / 3.0,
                                                            0.0, 1.0, "a_fraction");
  Instance inst{"i0",
                space,
                {},
                reward,
                reward,
                /*has_distinct_baseline=*/false,
                /*r_max=*/1.0};
  inst.cases.push_back(PromptCase{std::move(prompt), std::move(pi_sft), std::move(rho_sft)});
  return inst;
}

namespace {

std::string content_token_name(int i) {
  if (i < 26) return std::string(1, static_cast<char>('A' + i));
  std::ostringstream name;
  name << "T" << i;
  return name.str();
}

}  // namespace

Instance random_instance(const RandomInstanceSpec& spec, std::uint64_t seed) {
  if (spec.content_tokens < 1) throw ConfigError("random_instance: need at least 1 content token");
  if (spec.horizon < 1) throw ConfigError("random_instance: need a positive horizon");
  if (spec.num_prompts < 1) throw ConfigError("random_instance: need at least 1 prompt");
  if (!(spec.r_max > 0.0)) throw ConfigError("random_instance: r_max must be positive");

  std::vector<std::string> names(static_cast<std::size_t>(spec.content_tokens));
  for (int i = 0; i < spec.content_tokens; ++i)
    names[static_cast<std::size_t>(i)] = content_token_name(i);
  auto space = std::make_shared<const ResponseSpace>(Vocabulary::with_eos(std::move(names)),
                                                     spec.horizon);
  const StreamKey root(seed);

  std::ostringstream id;
  id << "rand-" << seed;
  Instance inst{id.str(),
                space,
                {},
                TrajectoryReward(),
                TrajectoryReward(),
                /*has_distinct_baseline=*/spec.distinct_baseline,
                /*r_max=*/spec.r_max};

  std::map<std::string, std::vector<double>> target_values;
  std::map<std::string, std::vector<double>> baseline_values;
  for (int j = 0; j < spec.num_prompts; ++j) {
    std::ostringstream pid;
    pid << "p" << j;
    // Prompt content: 1..3 random content tokens, for the coherence proxy.
    RngStream prompt_rng = root.with("prompt").with(static_cast<std::uint64_t>(j)).stream();
    const int prompt_len = 1 + static_cast<int>(prompt_rng.u01() * 3.0);
    Prompt prompt{pid.str(), {}};
    for (int t = 0; t < prompt_len; ++t)
      prompt.tokens.push_back(
          static_cast<TokenId>(prompt_rng.u01() * static_cast<double>(spec.content_tokens)));

    RngStream sft_rng = root.with("sft").with(static_cast<std::uint64_t>(j)).stream();
    TokenPolicy pi_sft =
        TokenPolicy::dirichlet(space, prompt.id, sft_rng, spec.dirichlet_concentration);
    TrajectoryPolicy rho_sft = to_trajectory_policy(pi_sft);

    RngStream target_rng = root.with("target").with(static_cast<std::uint64_t>(j)).stream();
    std::vector<double> tv(static_cast<std::size_t>(space->num_trajectories()));
    for (double& v : tv) v = target_rng.u01() * spec.r_max;
    target_values[prompt.id] = std::move(tv);
    if (spec.distinct_baseline) {
      RngStream base_rng = root.with("baseline").with(static_cast<std::uint64_t>(j)).stream();
      std::vector<double> bv(static_cast<std::size_t>(space->num_trajectories()));
      for (double& v : bv) v = base_rng.u01() * spec.r_max;
      baseline_values[prompt.id] = std::move(bv);
    }

    inst.cases.push_back(PromptCase{std::move(prompt), std::move(pi_sft), std::move(rho_sft)});
  }

  inst.target = TrajectoryReward::table(space, std::move(target_values), spec.r_max,
                                        inst.id + "-target", spec.forced);
  inst.baseline = spec.distinct_baseline
                      ? TrajectoryReward::table(space, std::move(baseline_values), spec.r_max,
                                                inst.id + "-baseline", spec.forced)
                      : inst.target;
  return inst;
}

DecoderInputs DecodingSetup::direct_inputs() const {
  DecoderInputs in;
  in.space = space;
  in.prompt = prompt;
  in.pi_sft = &pi_sft;
  in.rho_sft = &rho_sft;
  in.target = &target;
  in.baseline = &target;  // direct transfer aligns to the target itself
  in.rho_bl = &rho_bl_target;
  in.pi_bl = &pi_dpo_target;
  in.beta = beta;
  return in;
}

DecoderInputs DecodingSetup::indirect_inputs() const {
  DecoderInputs in;
  in.space = space;
  in.prompt = prompt;
  in.pi_sft = &pi_sft;
  in.rho_sft = &rho_sft;
  in.target = &target;
  in.baseline = &baseline;
  in.rho_bl = &rho_bl_baseline;
  in.rho_r = &rho_r;
  in.pi_bl = &pi_dpo_baseline;
  in.pi_r = &pi_r;
  in.beta = beta;
  return in;
}

DecoderInputs DecodingSetup::plain_inputs() const {
  DecoderInputs in;
  in.space = space;
  in.prompt = prompt;
  in.pi_sft = &pi_sft;
  in.rho_sft = &rho_sft;
  in.target = &target;
  in.baseline = &target;
  in.beta = beta;
  return in;
}

DecodingSetup make_setup(const Instance& instance, const std::string& prompt_id, double beta) {
  if (!(beta > 0.0) || !std::isfinite(beta))
    throw ConfigError("make_setup: beta must be positive and finite");
  const PromptCase& pc = instance.case_of(prompt_id);
  AlignedPolicy bl_target = rlhf_optimal_policy(pc.rho_sft, instance.target, pc.prompt, beta);
  AlignedPolicy bl_baseline = rlhf_optimal_policy(pc.rho_sft, instance.baseline, pc.prompt, beta);
  AlignedPolicy transferred =
      transfer_policy(bl_baseline, instance.target, instance.baseline, pc.prompt, beta);
  TokenPolicy pi_dpo_target = induce_token_policy(bl_target.policy);
  TokenPolicy pi_dpo_baseline = induce_token_policy(bl_baseline.policy);
  TokenPolicy pi_r = induce_token_policy(transferred.policy);
  return DecodingSetup{instance.space,
                       pc.prompt,
                       beta,
                       pc.pi_sft,
                       pc.rho_sft,
                       instance.target,
                       instance.baseline,
                       std::move(bl_target),
                       std::move(bl_baseline),
                       std::move(transferred),
                       std::move(pi_dpo_target),
                       std::move(pi_dpo_baseline),
                       std::move(pi_r)};
}

}  // namespace tqlab
