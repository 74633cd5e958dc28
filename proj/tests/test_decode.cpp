#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "tqlab/decode.hpp"
#include "tqlab/instance.hpp"
#include "tqlab/metrics.hpp"

using namespace tqlab;

namespace {

const double kSig = 0.7310585786300049;  // sigmoid(1)

DecoderConfig exact_config(double alpha, int k) {
  DecoderConfig c;
  c.alpha = alpha;
  c.k = k;
  return c;
}

}  // namespace

TEST_CASE("decode_step reweights the base by the exponentiated scores") {
  SpacePtr sp = std::make_shared<const ResponseSpace>(Vocabulary::with_eos({"A"}), 1);
  TokenPolicy::Rows rows(1, std::vector<double>{0.5, 0.5});
  TokenPolicy base = TokenPolicy::from_rows(sp, "p0", rows);
  StepDistribution sd = decode_step(base, 0, {0, 1}, {1.0, 0.0}, 1.0);
  CHECK(sd.prob_of(0) == doctest::Approx(kSig).epsilon(1e-15));
  CHECK(sd.prob_of(1) == doctest::Approx(1.0 - kSig).epsilon(1e-12));
  CHECK(sd.node == 0);
  // log normalizer = log(0.5 e + 0.5).
  CHECK(sd.log_normalizer ==
        doctest::Approx(std::log(0.5 * std::exp(1.0) + 0.5)).epsilon(1e-12));
  CHECK(sd.argmax() == 0);
}

TEST_CASE("decode_step validates its inputs") {
  SpacePtr sp = std::make_shared<const ResponseSpace>(Vocabulary::with_eos({"A", "B"}), 2);
  TokenPolicy::Rows rows(sp->num_decision_nodes(), std::vector<double>{0.5, 0.5, 0.0});
  TokenPolicy base = TokenPolicy::from_rows(sp, "p0", rows);

  CHECK_THROWS_AS(decode_step(base, 0, {0, 1}, {0.0, 0.0}, 0.0), ConfigError);
  CHECK_THROWS_AS(decode_step(base, 0, {0, 1}, {0.0, 0.0}, -1.0), ConfigError);
  CHECK_THROWS_AS(decode_step(base, 0, {}, {}, 1.0), Error);
  CHECK_THROWS_AS(decode_step(base, 0, {0, 0}, {0.0, 0.0}, 1.0), Error);
  CHECK_THROWS_AS(decode_step(base, 0, {0, 9}, {0.0, 0.0}, 1.0), Error);
  CHECK_THROWS_AS(decode_step(base, 0, {0}, {0.0, 0.0}, 1.0), Error);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(decode_step(base, 0, {0, 1}, {nan, 0.0}, 1.0), Error);
  // EOS has zero base mass here: its score is ignored, its probability zero.
  StepDistribution sd = decode_step(base, 0, {0, 2}, {0.0, nan}, 1.0);
  CHECK(sd.prob_of(2) == 0.0);
  CHECK(sd.prob_of(0) == doctest::Approx(1.0));
  // All candidates at zero base mass cannot form a distribution.
  CHECK_THROWS_AS(decode_step(base, 0, {2}, {0.0}, 1.0), Error);
}

TEST_CASE("decode_step limits: large alpha keeps the base, small alpha the argmax") {
  SpacePtr sp = std::make_shared<const ResponseSpace>(Vocabulary::with_eos({"A", "B"}), 2);
  TokenPolicy::Rows rows(sp->num_decision_nodes(), std::vector<double>{0.6, 0.3, 0.1});
  TokenPolicy base = TokenPolicy::from_rows(sp, "p0", rows);
  std::vector<TokenId> cands{0, 1, 2};
  std::vector<double> scores{0.2, 0.9, 0.4};

  StepDistribution soft = decode_step(base, 0, cands, scores, 1e6);
  CHECK(std::abs(soft.prob_of(0) - 0.6) < 1e-5);
  CHECK(std::abs(soft.prob_of(1) - 0.3) < 1e-5);
  CHECK(std::abs(soft.prob_of(2) - 0.1) < 1e-5);

  StepDistribution hard = decode_step(base, 0, cands, scores, 1e-3);
  CHECK(hard.prob_of(1) > 1.0 - 1e-9);
  CHECK(hard.argmax() == 1);
}

TEST_CASE("argmax and sampling follow the stored candidate order") {
  SpacePtr sp = std::make_shared<const ResponseSpace>(Vocabulary::with_eos({"A", "B"}), 2);
  TokenPolicy::Rows rows(sp->num_decision_nodes(), std::vector<double>{0.4, 0.4, 0.2});
  TokenPolicy base = TokenPolicy::from_rows(sp, "p0", rows);
  StepDistribution sd = decode_step(base, 0, {1, 0, 2}, {0.0, 0.0, 0.0}, 1.0);
  CHECK(sd.argmax() == 0);  // tie at 0.4 breaks toward the lower token index

  RngStream r1 = StreamKey(9).with("s").stream();
  RngStream r2 = StreamKey(9).with("s").stream();
  for (int i = 0; i < 200; ++i) CHECK(sd.sample(r1) == sd.sample(r2));
}

TEST_CASE("exact direct transfer scores match the conditional oracle") {
  const Instance i0 = make_i0();
  DecodingSetup setup = make_setup(i0, "p0", 0.5);
  const ResponseSpace& sp = *i0.space;
  for (int node = 0; node < sp.num_decision_nodes(); ++node) {
    DecodeState state{setup.prompt, sp.prefix_of(node)};
    for (TokenId t = 0; t < sp.vocab().size(); ++t) {
      const double got = tq_star_direct(setup.rho_bl_target, setup.target, setup.prompt, state, t);
      const double brute = oracle::conditional_expected_reward(
          setup.rho_bl_target.policy, setup.target, setup.prompt, sp.prefix_of(node), t);
      CHECK(got == doctest::Approx(brute).epsilon(1e-11));
    }
  }
}

TEST_CASE("direct transfer scores equal q_pi of the aligned conditionals") {
  const Instance i0 = make_i0();
  DecodingSetup setup = make_setup(i0, "p0", 0.5);
  const ResponseSpace& sp = *i0.space;
  for (int node = 0; node < sp.num_decision_nodes(); ++node) {
    DecodeState state{setup.prompt, sp.prefix_of(node)};
    for (TokenId t = 0; t < sp.vocab().size(); ++t) {
      const double tq = tq_star_direct(setup.rho_bl_target, setup.target, setup.prompt, state, t);
      const double qpi =
          q_pi_exact(setup.pi_dpo_target, setup.target, setup.prompt, state, t);
      CHECK(tq == doctest::Approx(qpi).epsilon(1e-11));
    }
  }
}

TEST_CASE("committing EOS scores the immediate stop") {
  const Instance i0 = make_i0();
  DecodingSetup setup = make_setup(i0, "p0", 0.5);
  const TokenId EOS = i0.space->vocab().eos;
  DecodeState root{setup.prompt, {}};
  CHECK(tq_star_direct(setup.rho_bl_target, setup.target, setup.prompt, root, EOS) ==
        doctest::Approx(0.0));
  DecodeState a{setup.prompt, {0}};
  CHECK(tq_star_direct(setup.rho_bl_target, setup.target, setup.prompt, a, EOS) ==
        doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("indirect exact scores equal direct scores through the transfer") {
  const Instance i0 = make_i0();
  DecodingSetup setup = make_setup(i0, "p0", 0.5);
  const ResponseSpace& sp = *i0.space;
  for (int node = 0; node < sp.num_decision_nodes(); ++node) {
    DecodeState state{setup.prompt, sp.prefix_of(node)};
    for (TokenId t = 0; t < sp.vocab().size(); ++t) {
      const double direct =
          tq_star_direct(setup.rho_bl_target, setup.target, setup.prompt, state, t);
      const double indirect = tq_star_indirect(setup.rho_r, setup.target, setup.prompt, state, t);
      CHECK(indirect == doctest::Approx(direct).epsilon(1e-10));
    }
  }
}

TEST_CASE("monte carlo direct scores are deterministic and consistent") {
  const Instance i0 = make_i0();
  DecodingSetup setup = make_setup(i0, "p0", 0.5);
  DecodeState root{setup.prompt, {}};

  RngStream r1 = StreamKey(2).with("mc").stream();
  RngStream r2 = StreamKey(2).with("mc").stream();
  const McEstimate a =
      tq_star_direct_mc(setup.rho_bl_target, setup.target, setup.prompt, root, 0, 128, r1);
  const McEstimate b =
      tq_star_direct_mc(setup.rho_bl_target, setup.target, setup.prompt, root, 0, 128, r2);
  CHECK(a.mean == b.mean);

  RngStream r3 = StreamKey(3).with("mc").stream();
  const McEstimate big =
      tq_star_direct_mc(setup.rho_bl_target, setup.target, setup.prompt, root, 0, 16384, r3);
  const double exact = tq_star_direct(setup.rho_bl_target, setup.target, setup.prompt, root, 0);
  CHECK(std::abs(big.mean - exact) <= 4 * big.std_error + 1e-9);
}

TEST_CASE("degenerate importance weights reduce indirect mc to direct mc") {
  const Instance i0 = make_i0();
  DecodingSetup setup = make_setup(i0, "p0", 0.5);
  DecodeState root{setup.prompt, {}};
  RngStream r1 = StreamKey(4).with("mc").stream();
  RngStream r2 = StreamKey(4).with("mc").stream();
  const McEstimate direct =
      tq_star_direct_mc(setup.rho_bl_target, setup.target, setup.prompt, root, 0, 64, r1);
  const IsEstimate indirect = tq_star_indirect_mc(setup.rho_bl_target, setup.target, setup.target,
                                                  setup.prompt, root, 0, 64, 0.5, r2);
  CHECK(indirect.mean == doctest::Approx(direct.mean).epsilon(1e-12));
  double total = 0.0;
  for (double w : indirect.normalized_weights) {
    CHECK(w == doctest::Approx(1.0 / 64).epsilon(1e-12));
    total += w;
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("importance weighting corrects the sampling mismatch") {
  // Rollouts come from the baseline-aligned policy, but the weighted mean
  // must estimate the expectation under the transferred one.
  const Instance i0 = make_i0();
  TrajectoryReward baseline = TrajectoryReward::token_weights(i0.space, {0.0, 1.0, 0.0},
                                                              1.0 / 3.0, 0.0, 1.0, "b_fraction");
  const PromptCase& pc = i0.case_of("p0");
  const double beta = 0.5;
  AlignedPolicy rho_bl = rlhf_optimal_policy(pc.rho_sft, baseline, pc.prompt, beta);
  AlignedPolicy rho_r = transfer_policy(rho_bl, i0.target, baseline, pc.prompt, beta);
  DecodeState root{pc.prompt, {}};
  const double exact = tq_star_indirect(rho_r, i0.target, pc.prompt, root, 0);
  RngStream rng = StreamKey(6).with("mc").stream();
  const IsEstimate est = tq_star_indirect_mc(rho_bl, i0.target, baseline, pc.prompt, root, 0,
                                             32768, beta, rng);
  CHECK(std::abs(est.mean - exact) < 0.01);
}

TEST_CASE("the sft decoder picks the modal token at every step") {
  const Instance i0 = make_i0();
  SpacePtr sp = i0.space;
  TokenPolicy::Rows rows(sp->num_decision_nodes(), std::vector<double>{0.2, 0.5, 0.3});
  TokenPolicy pi = TokenPolicy::from_rows(sp, "p0", rows);
  TrajectoryPolicy rho = to_trajectory_policy(pi);
  DecoderInputs in;
  in.space = sp;
  in.prompt = Prompt{"p0", {}};
  in.pi_sft = &pi;
  in.rho_sft = &rho;
  in.target = &i0.target;

  Decoder dec(DecoderKind::sft, &in, exact_config(1.0, 1));
  DecodeResult res = dec.decode();
  // B is modal everywhere: B B B, forced.
  CHECK(res.trajectory.response == std::vector<TokenId>{1, 1, 1, sp->vocab().eos});
  CHECK(res.trajectory.forced_eos);
  // k never truncates the sft decoder's support.
  CHECK(res.steps[0].candidates.size() == 3);
}

TEST_CASE("sampled sft decoding is deterministic in the configured seed") {
  const Instance i0 = make_i0();
  DecodingSetup setup = make_setup(i0, "p0", 0.5);
  DecoderInputs in = setup.plain_inputs();
  DecoderConfig cfg = exact_config(1.0, 3);
  cfg.greedy = false;
  cfg.seed = 11;
  Decoder a(DecoderKind::sft, &in, cfg);
  Decoder b(DecoderKind::sft, &in, cfg);
  CHECK(a.decode().trajectory == b.decode().trajectory);
}

TEST_CASE("best-of-one reduces to plain sft sampling, bit for bit") {
  const Instance i0 = make_i0();
  DecodingSetup setup = make_setup(i0, "p0", 0.5);
  DecoderInputs in = setup.plain_inputs();

  DecoderConfig cfg = exact_config(1.0, 3);
  cfg.n_best = 1;
  cfg.seed = 21;
  Decoder bo(DecoderKind::best_of_n, &in, cfg);
  DecodeResult via_best = bo.decode();

  RngStream rng = StreamKey(21).with("p0").with("best_of_n").with("select").stream();
  DecodeResult via_sft = decode_sft(in, false, rng);
  CHECK(via_best.trajectory == via_sft.trajectory);
}

TEST_CASE("exhaustive best-of selects the reward argmax, earliest on ties") {
  const Instance i0 = make_i0();
  DecodingSetup setup = make_setup(i0, "p0", 0.5);
  DecoderInputs in = setup.plain_inputs();
  DecoderConfig cfg = exact_config(1.0, 3);
  cfg.n_best = 0;
  Decoder dec(DecoderKind::best_of_n, &in, cfg);
  DecodeResult res = dec.decode();
  CHECK(res.trajectory == i0.space->trajectories()[7]);  // AAA scores 1
  CHECK(!dec.has_step_semantics());
  CHECK(res.steps.empty());

  // Ties resolve to the first trajectory in canonical order.
  std::vector<double> flat(i0.space->num_trajectories(), 0.5);
  TrajectoryReward tie = TrajectoryReward::table(i0.space, {{"p0", flat}}, 1.0, "tie");
  Trajectory best = decode_best_of_exhaustive(*i0.space, tie, setup.prompt);
  CHECK(best == i0.space->trajectories()[0]);
}

TEST_CASE("more draws can only improve the selected reward") {
  const Instance i0 = make_i0();
  DecodingSetup setup = make_setup(i0, "p0", 0.5);
  DecoderInputs in = setup.plain_inputs();
  for (std::uint64_t seed : {0ULL, 1ULL, 2ULL}) {
    double prev = -1.0;
    for (int n : {1, 4, 16, 64}) {
      DecoderConfig cfg = exact_config(1.0, 3);
      cfg.n_best = n;
      cfg.seed = seed;
      Decoder dec(DecoderKind::best_of_n, &in, cfg);
      const double r = setup.target.of(setup.prompt, dec.decode().trajectory);
      // Not monotone per seed in general, but never below the single draw.
      if (n == 1) prev = r;
      CHECK(r >= prev - 1e-12);
    }
  }
}

TEST_CASE("the args scorer reads the partial-response reward") {
  const Instance i0 = make_i0();
  DecodingSetup setup = make_setup(i0, "p0", 0.5);
  DecoderInputs in = setup.plain_inputs();
  DecoderConfig cfg = exact_config(1.0, 3);
  cfg.args_weight = 2.0;
  Decoder dec(DecoderKind::args, &in, cfg);
  StepDistribution sd = dec.step(0);
  // Candidates in top-k order for the uniform base: token order 0, 1, 2.
  REQUIRE(sd.candidates == std::vector<TokenId>{0, 1, 2});
  CHECK(sd.scores[0] == doctest::Approx(2.0 / 3).epsilon(1e-12));  // w * r([A])
  CHECK(sd.scores[1] == doctest::Approx(0.0));                     // w * r([B])
  CHECK(sd.scores[2] == doctest::Approx(0.0));                     // w * r([])
}

TEST_CASE("the cd scorer is the exact q table of the reference policy") {
  const Instance i0 = make_i0();
  DecodingSetup setup = make_setup(i0, "p0", 0.5);
  DecoderInputs in = setup.plain_inputs();
  Decoder dec(DecoderKind::cd, &in, exact_config(1.0, 3));
  const ResponseSpace& sp = *i0.space;
  for (int node = 0; node < sp.num_decision_nodes(); ++node) {
    StepDistribution sd = dec.step(node);
    DecodeState state{setup.prompt, sp.prefix_of(node)};
    for (std::size_t c = 0; c < sd.candidates.size(); ++c) {
      const double q =
          q_pi_exact(setup.pi_sft, setup.target, setup.prompt, state, sd.candidates[c]);
      CHECK(sd.scores[c] == doctest::Approx(q).epsilon(1e-12));
    }
  }
}

TEST_CASE("every step decoder maximizes its own step objective") {
  const Instance i0 = make_i0();
  DecodingSetup setup = make_setup(i0, "p0", 0.5);
  RngStream rng = StreamKey(13).with("rivals").stream();
  for (DecoderKind kind : {DecoderKind::sft, DecoderKind::args, DecoderKind::cd,
                           DecoderKind::tq_direct, DecoderKind::tq_indirect}) {
    DecoderInputs in = kind == DecoderKind::tq_direct     ? setup.direct_inputs()
                       : kind == DecoderKind::tq_indirect ? setup.indirect_inputs()
                                                          : setup.plain_inputs();
    const double alpha = kind == DecoderKind::args ? 1.0 : 0.7;
    DecoderConfig cfg = exact_config(alpha, 3);
    Decoder dec(kind, &in, cfg);
    StepDistribution sd = dec.step(0);
    std::vector<double> own(sd.log_probs.size());
    for (std::size_t i = 0; i < own.size(); ++i) own[i] = std::exp(sd.log_probs[i]);
    const double effective_alpha = kind == DecoderKind::args ? 1.0 : alpha;
    const double best = step_objective(sd, own, dec.anchor_policy(), effective_alpha);
    for (int rival = 0; rival < 1000; ++rival) {
      std::vector<double> p(sd.candidates.size());
      double total = 0.0;
      for (double& x : p) {
        x = rng.exponential();
        total += x;
      }
      for (double& x : p) x /= total;
      CHECK(step_objective(sd, p, dec.anchor_policy(), effective_alpha) <= best + 1e-9);
    }
  }
}

TEST_CASE("a corrupted score shifts the step away from the optimum") {
  const Instance i0 = make_i0();
  DecodingSetup setup = make_setup(i0, "p0", 0.5);
  DecoderInputs in = setup.direct_inputs();
  Decoder dec(DecoderKind::tq_direct, &in, exact_config(1.0, 3));
  StepDistribution sd = dec.step(0);

  StepDistribution corrupted = sd;
  corrupted.scores[0] += 0.5;
  StepDistribution re = decode_step(dec.anchor_policy(), 0, corrupted.candidates,
                                    corrupted.scores, 1.0);
  std::vector<double> own(sd.log_probs.size()), bad(re.log_probs.size());
  for (std::size_t i = 0; i < own.size(); ++i) own[i] = std::exp(sd.log_probs[i]);
  for (std::size_t i = 0; i < bad.size(); ++i) bad[i] = std::exp(re.log_probs[i]);
  const double best = step_objective(sd, own, dec.anchor_policy(), 1.0);
  const double off = step_objective(sd, bad, dec.anchor_policy(), 1.0);
  CHECK(off < best - 1e-6);
}

TEST_CASE("greedy tq decoding approaches the exhaustive optimum as beta shrinks") {
  const Instance i0 = make_i0();
  DecodingSetup setup = make_setup(i0, "p0", 1e-3);
  DecoderInputs in = setup.direct_inputs();
  Decoder dec(DecoderKind::tq_direct, &in, exact_config(1.0, 3));
  DecodeResult res = dec.decode();
  CHECK(res.trajectory == i0.space->trajectories()[7]);  // AAA

  // And the scores themselves collapse onto q_star.
  const ResponseSpace& sp = *i0.space;
  for (int node = 0; node < sp.num_decision_nodes(); ++node) {
    DecodeState state{setup.prompt, sp.prefix_of(node)};
    for (TokenId t = 0; t < sp.vocab().size(); ++t) {
      const double tq =
          tq_star_direct(setup.rho_bl_target, setup.target, setup.prompt, state, t);
      const double qs = q_star_exact(sp, setup.target, setup.prompt, state, t);
      CHECK(std::abs(tq - qs) <= 1e-3);
    }
  }
}

TEST_CASE("indirect decoding with a shared reward matches direct decoding") {
  const Instance i0 = make_i0();
  DecodingSetup setup = make_setup(i0, "p0", 0.5);
  DecoderInputs direct_in = setup.direct_inputs();
  DecoderInputs indirect_in = setup.indirect_inputs();
  Decoder direct(DecoderKind::tq_direct, &direct_in, exact_config(1.0, 3));
  Decoder indirect(DecoderKind::tq_indirect, &indirect_in, exact_config(1.0, 3));
  CHECK(direct.decode().trajectory == indirect.decode().trajectory);
}

TEST_CASE("candidate source and anchor choices bind to the configured policies") {
  RandomInstanceSpec spec;
  spec.content_tokens = 3;
  spec.horizon = 2;
  spec.distinct_baseline = true;
  Instance inst = random_instance(spec, 77);
  DecodingSetup setup = make_setup(inst, "p0", 0.5);
  DecoderInputs in = setup.indirect_inputs();

  DecoderConfig from_baseline = exact_config(1.0, 2);
  from_baseline.candidate_source = CandidateSource::baseline;
  Decoder a(DecoderKind::tq_indirect, &in, from_baseline);
  CHECK(a.candidate_policy().log_row(0).data() == setup.pi_dpo_baseline.log_row(0).data());
  CHECK(a.step(0).candidates == setup.pi_dpo_baseline.top_k(0, 2));

  DecoderConfig from_target = exact_config(1.0, 2);
  from_target.candidate_source = CandidateSource::target;
  Decoder b(DecoderKind::tq_indirect, &in, from_target);
  CHECK(b.candidate_policy().log_row(0).data() == setup.pi_r.log_row(0).data());
  CHECK(b.step(0).candidates == setup.pi_r.top_k(0, 2));

  DecoderConfig anchored = exact_config(1.0, 2);
  anchored.anchor = AnchorChoice::baseline;
  Decoder c(DecoderKind::tq_indirect, &in, anchored);
  CHECK(c.anchor_policy().log_row(0).data() == setup.pi_dpo_baseline.log_row(0).data());
  CHECK(b.anchor_policy().log_row(0).data() == setup.pi_r.log_row(0).data());
}

TEST_CASE("k caps to the vocabulary and truncates candidate sets") {
  const Instance i0 = make_i0();
  DecodingSetup setup = make_setup(i0, "p0", 0.5);
  DecoderInputs in = setup.direct_inputs();
  DecoderConfig cfg = exact_config(1.0, 99);
  Decoder dec(DecoderKind::tq_direct, &in, cfg);
  CHECK(dec.config().k == 3);

  DecoderConfig narrow = exact_config(1.0, 1);
  Decoder one(DecoderKind::tq_direct, &in, narrow);
  CHECK(one.step(0).candidates.size() == 1);
}

TEST_CASE("materialized policies reproduce the step distributions") {
  const Instance i0 = make_i0();
  DecodingSetup setup = make_setup(i0, "p0", 0.5);
  DecoderInputs in = setup.direct_inputs();
  Decoder dec(DecoderKind::tq_direct, &in, exact_config(1.0, 3));
  TokenPolicy pi = dec.materialize_policy();
  for (int node = 0; node < i0.space->num_decision_nodes(); ++node) {
    StepDistribution sd = dec.step(node);
    for (TokenId t = 0; t < i0.space->vocab().size(); ++t) {
      CHECK(pi.log_prob(node, t) == doctest::Approx(sd.log_prob_of(t)).epsilon(1e-12));
    }
  }
}

TEST_CASE("materialization refuses monte carlo scores and best-of-n") {
  const Instance i0 = make_i0();
  DecodingSetup setup = make_setup(i0, "p0", 0.5);
  DecoderInputs in = setup.direct_inputs();
  DecoderConfig mc = exact_config(1.0, 3);
  mc.mode = ScoreMode::monte_carlo;
  mc.n_rollouts = 8;
  Decoder dec(DecoderKind::tq_direct, &in, mc);
  CHECK_THROWS_AS(dec.materialize_policy(), Error);

  DecoderInputs plain = setup.plain_inputs();
  Decoder bo(DecoderKind::best_of_n, &plain, exact_config(1.0, 3));
  CHECK_THROWS_AS(bo.materialize_policy(), Error);
  CHECK_THROWS_AS(bo.step(0), Error);
}

TEST_CASE("monte carlo decoding is reproducible and seed sensitive") {
  const Instance i0 = make_i0();
  DecodingSetup setup = make_setup(i0, "p0", 0.5);
  DecoderInputs in = setup.direct_inputs();
  DecoderConfig mc = exact_config(1.0, 3);
  mc.mode = ScoreMode::monte_carlo;
  mc.n_rollouts = 16;
  mc.seed = 5;
  Decoder a(DecoderKind::tq_direct, &in, mc);
  Decoder b(DecoderKind::tq_direct, &in, mc);
  CHECK(a.decode().trajectory == b.decode().trajectory);
  StepDistribution s1 = a.step(0);
  StepDistribution s2 = b.step(0);
  CHECK(s1.scores == s2.scores);

  DecoderConfig other = mc;
  other.seed = 6;
  Decoder c(DecoderKind::tq_direct, &in, other);
  CHECK(c.step(0).scores != s1.scores);
}

TEST_CASE("decoders validate their required inputs") {
  const Instance i0 = make_i0();
  DecodingSetup setup = make_setup(i0, "p0", 0.5);
  DecoderInputs in = setup.plain_inputs();
  DecoderInputs missing = in;
  missing.pi_sft = nullptr;
  CHECK_THROWS_AS(Decoder(DecoderKind::sft, &missing, exact_config(1.0, 3)), Error);
  DecoderInputs no_reward = in;
  no_reward.target = nullptr;
  CHECK_THROWS_AS(Decoder(DecoderKind::cd, &no_reward, exact_config(1.0, 3)), Error);
  DecoderInputs no_rho = setup.direct_inputs();
  no_rho.rho_bl = nullptr;
  CHECK_THROWS_AS(Decoder(DecoderKind::tq_direct, &no_rho, exact_config(1.0, 3)), Error);
  DecoderInputs no_transfer = setup.indirect_inputs();
  no_transfer.rho_r = nullptr;
  CHECK_THROWS_AS(Decoder(DecoderKind::tq_indirect, &no_transfer, exact_config(1.0, 3)), Error);
}

TEST_CASE("unreachable nodes surface as UnreachablePrefixError") {
  const Instance i0 = make_i0();
  SpacePtr sp = i0.space;
  // Reference that never emits B: the B subtree has no candidates.
  TokenPolicy::Rows rows(sp->num_decision_nodes(), std::vector<double>{0.7, 0.0, 0.3});
  TokenPolicy pi = TokenPolicy::from_rows(sp, "p0", rows);
  TrajectoryPolicy rho = to_trajectory_policy(pi);
  AlignedPolicy rho_bl = rlhf_optimal_policy(rho, i0.target, Prompt{"p0", {}}, 0.5);
  TokenPolicy pi_bl = induce_token_policy(rho_bl.policy);
  DecoderInputs in;
  in.space = sp;
  in.prompt = Prompt{"p0", {}};
  in.pi_sft = &pi;
  in.rho_sft = &rho;
  in.target = &i0.target;
  in.baseline = &i0.target;
  in.rho_bl = &rho_bl;
  in.pi_bl = &pi_bl;
  in.beta = 0.5;
  Decoder dec(DecoderKind::tq_direct, &in, exact_config(1.0, 3));
  const int b_node = sp->node_at(std::vector<TokenId>{1});
  CHECK_THROWS_AS(dec.step(b_node), UnreachablePrefixError);
  // Decoding never visits the unreachable subtree.
  CHECK_NOTHROW(dec.decode());
}
