// Problem instances: a response space, prompts with their reference
// policies, and the target/baseline reward pair. Includes the canonical toy
// fixture i0, a seeded random-instance generator, and the per-prompt setup
// that owns every object a decoder binds to.
#pragma once

#include "tqlab/decode.hpp"

namespace tqlab {

struct PromptCase {
  Prompt prompt;
  TokenPolicy pi_sft;
  TrajectoryPolicy rho_sft;
};

struct Instance {
  std::string id;
  SpacePtr space;
  std::vector<PromptCase> cases;
  TrajectoryReward target;
  TrajectoryReward baseline;  // equals target unless a distinct one was given
  bool has_distinct_baseline = false;
  double r_max = 1.0;

  const PromptCase& case_of(const std::string& prompt_id) const;
};

// The canonical fixture: vocabulary {A, B, EOS}, horizon 3, one empty
// prompt, uniform reference policy, reward = count of A divided by 3.
Instance make_i0();

struct RandomInstanceSpec {
  int content_tokens = 2;  // vocabulary size minus EOS
  int horizon = 3;
  int num_prompts = 1;
  double r_max = 1.0;
  double dirichlet_concentration = 1.0;
  // Draw an independent baseline reward; otherwise baseline == target.
  bool distinct_baseline = true;
  ForcedRewardMode forced = ForcedRewardMode::full;
};

// Deterministic in (spec, seed): Dirichlet reference rows, independent
// uniform per-trajectory rewards in [0, r_max].
Instance random_instance(const RandomInstanceSpec& spec, std::uint64_t seed);

// Everything one (prompt, beta) decoding task binds to, owned in one place.
// DecoderInputs point into this object: keep it alive, unmoved, while any
// decoder built from it runs.
struct DecodingSetup {
  SpacePtr space;
  Prompt prompt;
  double beta = 0.0;
  TokenPolicy pi_sft;
  TrajectoryPolicy rho_sft;
  TrajectoryReward target;
  TrajectoryReward baseline;
  AlignedPolicy rho_bl_target;    // reference tilted by the target reward
  AlignedPolicy rho_bl_baseline;  // reference tilted by the baseline reward
  AlignedPolicy rho_r;            // baseline-aligned, transferred to the target
  TokenPolicy pi_dpo_target;      // conditionals of rho_bl_target
  TokenPolicy pi_dpo_baseline;    // conditionals of rho_bl_baseline
  TokenPolicy pi_r;               // conditionals of rho_r

  DecoderInputs direct_inputs() const;    // tq_direct: rho_bl is target-aligned
  DecoderInputs indirect_inputs() const;  // tq_indirect: baseline-aligned + transfer
  DecoderInputs plain_inputs() const;     // sft, best_of_n, args, cd
};

DecodingSetup make_setup(const Instance& instance, const std::string& prompt_id, double beta);

}  // namespace tqlab
