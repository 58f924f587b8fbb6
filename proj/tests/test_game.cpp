#include <gtest/gtest.h>

#include "oracles.hpp"
#include "resil/game.hpp"
#include "resil/observation.hpp"

using namespace resil;

namespace {

TabularMarkovGame coin_game() {
  TabularMarkovGame g({2, 1}, {"a", "b", "c"}, 0.9);
  const Successor det{1, 1.0};
  const Successor split[] = {{1, 0.5}, {2, 0.5}};
  const Successor stay_b{1, 1.0};
  const Successor stay_c{2, 1.0};
  g.set_row(StateId{0}, 0, {&det, 1});
  g.set_row(StateId{0}, 1, split);
  for (JointIndex j = 0; j < 2; ++j) {
    g.set_row(StateId{1}, j, {&stay_b, 1});
    g.set_row(StateId{2}, j, {&stay_c, 1});
  }
  const double r[] = {1.0, -1.0};
  g.set_rewards(StateId{0}, 1, r);
  g.set_terminal(StateId{2}, true);
  for (std::uint32_t s = 0; s < 3; ++s)
    for (int i = 0; i < 2; ++i) g.set_observation(StateId{s}, i, s);
  return g;
}

}  // namespace

TEST(Game, JointIndexRoundTrip) {
  TabularMarkovGame g({3, 2, 4}, {"s"}, 1.0);
  EXPECT_EQ(g.num_joint_actions(), 24u);
  for (JointIndex j = 0; j < 24; ++j) EXPECT_EQ(g.joint_index(g.joint_action(j)), j);
  const JointAction a{2, 0, 3};
  EXPECT_EQ(g.joint_index(a), 2u * 8 + 0 * 4 + 3);
  const JointAction bad{3, 0, 0};
  EXPECT_THROW(g.joint_index(bad), ModelError);
}

TEST(Game, ValidateNamesViolations) {
  TabularMarkovGame g = coin_game();
  EXPECT_NO_THROW(g.validate());
  const Successor half{1, 0.5};
  g.set_row(StateId{1}, 0, {&half, 1});
  EXPECT_THROW(g.validate(), ModelError);

  TabularMarkovGame bad_gamma({1}, {"s"}, 1.5);
  const Successor self{0, 1.0};
  bad_gamma.set_row(StateId{0}, 0, {&self, 1});
  bad_gamma.set_observation(StateId{0}, 0, 0);
  EXPECT_THROW(bad_gamma.validate(), ModelError);

  TabularMarkovGame no_obs({1}, {"s"}, 0.5);
  no_obs.set_row(StateId{0}, 0, {&self, 1});
  EXPECT_THROW(no_obs.validate(), ModelError);
}

TEST(Game, DeterministicRowIgnoresSeed) {
  const TabularMarkovGame g = coin_game();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    EXPECT_EQ(step(g, StateId{0}, JointAction{0, 0}, rng).next, StateId{1});
  }
}

TEST(Game, UniformRowFrequencies) {
  const TabularMarkovGame g = coin_game();
  Rng rng(1234);
  int hits = 0;
  for (int t = 0; t < 10000; ++t) hits += step(g, StateId{0}, JointAction{1, 0}, rng).next == StateId{1};
  EXPECT_NEAR(hits / 10000.0, 0.5, 0.02);
}

TEST(Game, StepIsPureInSeed) {
  const TabularMarkovGame g = coin_game();
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng a(seed), b(seed);
    const StepResult x = step(g, StateId{0}, JointIndex{1}, a);
    const StepResult y = step(g, StateId{0}, JointIndex{1}, b);
    EXPECT_EQ(x.next, y.next);
    EXPECT_EQ(x.rewards, y.rewards);
    EXPECT_EQ(x.done, y.done);
  }
}

TEST(Game, TerminalSuccessorSetsDone) {
  const TabularMarkovGame g = coin_game();
  Rng rng(0);
  bool saw_terminal = false;
  for (int t = 0; t < 100; ++t) {
    const StepResult r = step(g, StateId{0}, JointIndex{1}, rng);
    EXPECT_EQ(r.done, r.next == StateId{2});
    saw_terminal |= r.done;
    EXPECT_EQ(r.rewards, (std::vector<double>{1.0, -1.0}));
  }
  EXPECT_TRUE(saw_terminal);
}

TEST(Game, MissingRowIsModelError) {
  TabularMarkovGame g({1}, {"a", "b"}, 0.9);
  Rng rng(0);
  EXPECT_THROW(step(g, StateId{0}, JointIndex{0}, rng), ModelError);
}

TEST(Game, CopiesAreIndependentAndHashed) {
  const TabularMarkovGame g = coin_game();
  TabularMarkovGame h = g;
  EXPECT_EQ(g.content_hash(), h.content_hash());
  h.set_reward(StateId{0}, 0, 0, 7.0);
  EXPECT_NE(g.content_hash(), h.content_hash());
  EXPECT_EQ(g.reward(StateId{0}, 0, 0), 0.0);
  h.compact();
  EXPECT_EQ(h.reward(StateId{0}, 0, 0), 7.0);
  EXPECT_EQ(h.row(StateId{0}, 1).size(), 2u);
}

TEST(Game, ReachableStates) {
  const TabularMarkovGame g = coin_game();
  EXPECT_EQ(reachable_states(g, StateId{0}).size(), 3u);
  EXPECT_EQ(reachable_states(g, StateId{1}).size(), 1u);
}

TEST(Observation, EmptyMessagesGiveIdenticalKeys) {
  const TabularMarkovGame g = coin_game();
  EXPECT_EQ(observe(g, StateId{1}, 0, {}), observe(g, StateId{1}, 0, {}));
}

TEST(Observation, MessageComponentIsInjective) {
  const TabularMarkovGame g = coin_game();
  EXPECT_NE(observe(g, StateId{1}, 0, {{0}}), observe(g, StateId{1}, 0, {{1}}));
  EXPECT_NE(observe(g, StateId{1}, 0, {}), observe(g, StateId{1}, 0, {{0}}));
  std::set<std::uint64_t> codes;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) codes.insert(encode_message({{a, b}}, 3));
  EXPECT_EQ(codes.size(), 9u);
  EXPECT_EQ(decode_message(encode_message({{2, 1}}, 3), 2, 3), (MessageVector{{2, 1}}));
  EXPECT_THROW(encode_message({{3}}, 3), ModelError);
}
