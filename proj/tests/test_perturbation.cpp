#include <gtest/gtest.h>

#include "oracles.hpp"
#include "resil/io.hpp"
#include "resil/perturbation.hpp"

using namespace resil;

namespace {

GridEnvironment toy_taxi() { return GridEnvironment(load_grid_spec(RESIL_CONFIG_DIR "/taxi_toy.env")); }

PerturbationFamily only(double PerturbationFamily::*weight) {
  PerturbationFamily f;
  f.w_reward = f.w_transition = f.w_wall = f.w_relocate = f.w_start = 0.0;
  f.*weight = 1.0;
  return f;
}

}  // namespace

TEST(Apply, RewardEditTouchesOneEntry) {
  const TabularMarkovGame g = fixture::chain(5, 0.9, 5.0);
  const TabularMarkovGame h = apply(g, AtomicPerturbation::reward_edit(StateId{3}, 1, 0, -10.0));
  EXPECT_EQ(h.reward(StateId{3}, 1, 0), -10.0);
  EXPECT_EQ(g.reward(StateId{3}, 1, 0), 0.0);
  TabularMarkovGame back = h;
  back.set_reward(StateId{3}, 1, 0, 0.0);
  EXPECT_EQ(back.content_hash(), g.content_hash());
}

TEST(Apply, InitialStateEditOnlyMovesStart) {
  const TabularMarkovGame g = fixture::chain(5, 0.9);
  const TabularMarkovGame h = apply(g, AtomicPerturbation::initial_state(StateId{2}));
  EXPECT_EQ(h.initial_state(), StateId{2});
  TabularMarkovGame back = h;
  back.set_initial_state(StateId{0});
  EXPECT_EQ(canonical(game_to_json(back)), canonical(game_to_json(g)));
}

TEST(Apply, TransitionEditReplacesRow) {
  const TabularMarkovGame g = fixture::chain(4, 0.9);
  const TabularMarkovGame h = apply(g, AtomicPerturbation::transition(StateId{1}, 0, {{0, 0.25}, {3, 0.75}}));
  ASSERT_EQ(h.row(StateId{1}, 0).size(), 2u);
  EXPECT_EQ(h.row(StateId{1}, 0)[1], (Successor{3, 0.75}));
  EXPECT_EQ(g.row(StateId{1}, 0).size(), 1u);
}

TEST(Apply, RejectsBadTargetsAndPayloads) {
  const TabularMarkovGame g = fixture::chain(4, 0.9);
  EXPECT_THROW(apply(g, AtomicPerturbation::reward_edit(StateId{9}, 0, 0, 1.0)), ModelError);
  EXPECT_THROW(apply(g, AtomicPerturbation::reward_edit(StateId{1}, 5, 0, 1.0)), ModelError);
  EXPECT_THROW(apply(g, AtomicPerturbation::reward_edit(StateId{1}, 0, 3, 1.0)), ModelError);
  EXPECT_THROW(apply(g, AtomicPerturbation::transition(StateId{1}, 0, {{0, 0.5}})), ModelError);
  EXPECT_THROW(apply(g, AtomicPerturbation::transition(StateId{1}, 0, {{7, 1.0}})), ModelError);
  EXPECT_THROW(apply(g, AtomicPerturbation::initial_state(StateId{4})), ModelError);
}

TEST(Apply, WallBundleBlocksEdgeBothWays) {
  GridWorldSpec spec;
  spec.kind = GridKind::Taxi;
  spec.width = spec.height = 5;
  spec.agent_starts = {{0, 0}};
  spec.passengers = {{{0, 4}, {4, 0}, 0.0}};
  const GridEnvironment env(spec);
  const auto bundle = wall_add_bundle(spec, WallEdge::between({2, 2}, {2, 3}));
  const TabularMarkovGame walled = apply(env.game, std::span<const AtomicPerturbation>(bundle));
  std::size_t transitions = 0;
  for (const auto& p : bundle) {
    transitions += p.kind == PerturbationKind::TransitionEdit;
    EXPECT_NE(p.kind, PerturbationKind::InitialStateEdit);
  }
  // Two non-terminal passenger statuses (waiting, riding) on each side of the edge.
  EXPECT_EQ(transitions, 4u);
  for (int status = 0; status < 2; ++status) {
    const StateId above = env.codec.encode({{spec.cell_index({2, 2})}, {status}});
    const StateId below = env.codec.encode({{spec.cell_index({2, 3})}, {status}});
    EXPECT_EQ(walled.row(above, taxi_action::kSouth)[0].state, above.value);
    EXPECT_EQ(walled.reward(above, taxi_action::kSouth, 0), spec.illegal_move_penalty);
    EXPECT_EQ(walled.row(below, taxi_action::kNorth)[0].state, below.value);
    EXPECT_EQ(walled.reward(below, taxi_action::kNorth, 0), spec.illegal_move_penalty);
  }
}

TEST(Sampler, NothingFitsGivesEmptyTrace) {
  const GridEnvironment env = toy_taxi();
  PerturbationFamily f;
  f.w_start = 0.0;
  f.max_retries = 10;
  const auto r = sample_perturbed(env, 1e-9, f, MetricOptions{}, 4);
  EXPECT_TRUE(r.trace.steps.empty());
  EXPECT_TRUE(r.trace.shortfall);
  EXPECT_EQ(r.trace.magnitude, 0.0);
  EXPECT_EQ(canonical(game_to_json(r.game)), canonical(game_to_json(env.game)));
}

TEST(Sampler, BoundHoldsAndMagnitudeRecomputes) {
  const GridEnvironment env = toy_taxi();
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto r = sample_perturbed(env, 20.0, PerturbationFamily{}, MetricOptions{}, seed);
    EXPECT_LE(r.trace.magnitude, 20.0);
    EXPECT_NEAR(mdp_distance(env.game, r.game, MetricOptions{}), r.trace.magnitude, 1e-6);
    EXPECT_TRUE(r.game.homogeneous_with(env.game));
    EXPECT_EQ(r.game.labels(), env.game.labels());
    EXPECT_NO_THROW(r.game.validate());
    double prev = 0.0;
    for (const TraceStep& s : r.trace.steps) {
      EXPECT_GE(s.magnitude, prev);
      prev = s.magnitude;
    }
  }
}

TEST(Sampler, SameSeedSameTrace) {
  const GridEnvironment env = toy_taxi();
  const auto a = sample_perturbed(env, 10.0, PerturbationFamily{}, MetricOptions{}, 99);
  const auto b = sample_perturbed(env, 10.0, PerturbationFamily{}, MetricOptions{}, 99);
  EXPECT_EQ(canonical(trace_to_json(a.trace)), canonical(trace_to_json(b.trace)));
  const auto c = sample_perturbed(env, 10.0, PerturbationFamily{}, MetricOptions{}, 100);
  EXPECT_NE(canonical(trace_to_json(a.trace)), canonical(trace_to_json(c.trace)));
}

TEST(Sampler, ReplayIsBitIdentical) {
  const GridEnvironment env = toy_taxi();
  for (std::uint64_t seed = 10; seed < 14; ++seed) {
    const auto r = sample_perturbed(env, 15.0, PerturbationFamily{}, MetricOptions{}, seed);
    const PerturbationTrace back = trace_from_json(Json::parse(canonical(trace_to_json(r.trace))));
    EXPECT_EQ(canonical(game_to_json(replay(env.game, back))), canonical(game_to_json(r.game)));
  }
  const auto r = sample_perturbed(env, 15.0, PerturbationFamily{}, MetricOptions{}, 1);
  EXPECT_THROW(replay(fixture::chain(3, 0.9), r.trace), ModelError);
}

TEST(Sampler, RelocationIsNegativeThenPositiveRewardPair) {
  const GridEnvironment env = toy_taxi();
  PerturbationFamily f = only(&PerturbationFamily::w_relocate);
  f.max_steps = 5;
  const auto r = sample_perturbed(env, 1e9, f, MetricOptions{}, 3);
  ASSERT_FALSE(r.trace.steps.empty());
  for (const TraceStep& s : r.trace.steps) {
    ASSERT_EQ(s.edits.size(), 2u);
    EXPECT_EQ(s.edits[0].kind, PerturbationKind::RewardEdit);
    EXPECT_EQ(s.edits[1].kind, PerturbationKind::RewardEdit);
    EXPECT_LT(s.edits[0].reward, 0.0);
    EXPECT_GT(s.edits[1].reward, 0.0);
  }
}

TEST(Sampler, StartRelocationIsFree) {
  const GridEnvironment env = toy_taxi();
  PerturbationFamily f = only(&PerturbationFamily::w_start);
  f.max_steps = 3;
  const auto r = sample_perturbed(env, 1.0, f, MetricOptions{}, 8);
  ASSERT_EQ(r.trace.steps.size(), 3u);
  EXPECT_EQ(r.trace.magnitude, 0.0);
  EXPECT_TRUE(r.trace.shortfall);
  EXPECT_EQ(mdp_distance(env.game, r.game, MetricOptions{}), 0.0);
}

TEST(Sampler, WallGeneratorUsesBundles) {
  const GridEnvironment env = toy_taxi();
  PerturbationFamily f = only(&PerturbationFamily::w_wall);
  f.max_steps = 2;
  const auto r = sample_perturbed(env, 1e9, f, MetricOptions{}, 5);
  ASSERT_EQ(r.trace.steps.size(), 2u);
  for (const TraceStep& s : r.trace.steps) EXPECT_GT(s.edits.size(), 1u);
  EXPECT_NEAR(mdp_distance(env.game, r.game, MetricOptions{}), r.trace.magnitude, 1e-6);
}

TEST(Sampler, GenericGameUsesRewardAndTransitionEdits) {
  const TabularMarkovGame g = fixture::chain(6, 0.9);
  const auto r = sample_perturbed(g, 3.0, PerturbationFamily{}, MetricOptions{}, 21);
  EXPECT_LE(r.trace.magnitude, 3.0);
  for (const TraceStep& s : r.trace.steps) EXPECT_TRUE(s.generator == "reward" || s.generator == "transition");
  EXPECT_THROW(sample_perturbed(g, 0.0, PerturbationFamily{}, MetricOptions{}, 1), ModelError);
}

TEST(Sampler, BoundSoundnessOnToyTaxi) {
  const GridEnvironment env = toy_taxi();
  for (double K : {2.0, 6.0, 12.0})
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto r = sample_perturbed(env, K, PerturbationFamily{}, MetricOptions{}, 1000 + seed);
      EXPECT_LE(mdp_distance(env.game, r.game, MetricOptions{}), K + 1e-6);
    }
}

TEST(GameJson, RoundTripIsCanonical) {
  const GridEnvironment env = toy_taxi();
  const std::string text = canonical(game_to_json(env.game));
  const TabularMarkovGame back = game_from_json(Json::parse(text));
  EXPECT_EQ(canonical(game_to_json(back)), text);
  EXPECT_EQ(back.content_hash(), env.game.content_hash());
  EXPECT_THROW(game_from_json(Json::parse(R"({"format":"other"})")), ConfigError);
}
