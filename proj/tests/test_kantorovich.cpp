#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "resil/kantorovich.hpp"

using resil::TransportProblem;

TEST(Kantorovich, IdenticalDistributionsCostNothing) {
  TransportProblem prob{{0.3, 0.7}, {0.3, 0.7}, {0, 1, 1, 0}};
  EXPECT_DOUBLE_EQ(resil::kantorovich(prob), 0.0);
}

TEST(Kantorovich, FullMassMove) {
  TransportProblem prob{{1, 0}, {0, 1}, {0, 1, 1, 0}};
  EXPECT_DOUBLE_EQ(resil::kantorovich(prob), 1.0);
}

TEST(Kantorovich, PartialMassMove) {
  TransportProblem prob{{0.5, 0.5}, {0.8, 0.2}, {0, 1, 1, 0}};
  EXPECT_NEAR(resil::kantorovich(prob), 0.3, 1e-12);
}

TEST(Kantorovich, RejectsUnbalancedMarginals) {
  TransportProblem prob{{0.5, 0.6}, {1.0}, {0, 0}};
  EXPECT_THROW(resil::kantorovich(prob), std::invalid_argument);
}

TEST(Kantorovich, RejectsNegativeCost) {
  TransportProblem prob{{1.0}, {1.0}, {-1.0}};
  EXPECT_THROW(resil::kantorovich(prob), std::invalid_argument);
}

TEST(Kantorovich, DegenerateTiesTerminate) {
  // Equal marginals on a uniform grid produce a degenerate north-west basis.
  TransportProblem prob{{0.25, 0.25, 0.25, 0.25}, {0.25, 0.25, 0.25, 0.25}, std::vector<double>(16, 1.0)};
  for (std::size_t i = 0; i < 4; ++i) prob.cost[i * 4 + (3 - i)] = 0.0;
  EXPECT_NEAR(resil::kantorovich(prob), 0.0, 1e-12);
}

TEST(Kantorovich, MatchesVertexEnumeration) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  resil::TransportSolver solver;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = 1 + rng() % 4, n = 1 + rng() % 4;
    auto simplex = [&](std::size_t k) {
      std::vector<double> v(k);
      double total = 0.0;
      for (double& x : v) total += (x = u(rng) < 0.15 ? 0.0 : u(rng));
      if (total == 0.0) v[0] = total = 1.0;
      for (double& x : v) x /= total;
      return v;
    };
    const auto p = simplex(m), q = simplex(n);
    std::vector<double> cost(m * n);
    for (double& c : cost) c = u(rng) < 0.2 ? 0.0 : std::round(u(rng) * 40.0) / 8.0;
    const double expected = oracle::transport_vertices(p, q, cost);
    EXPECT_NEAR(solver.solve(p, q, cost), expected, 1e-9) << "trial " << trial;
  }
}

TEST(Kantorovich, SymmetricUnderTransposition) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  resil::TransportSolver solver;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> p(3), q(4), cost(12), cost_t(12);
    double sp = 0, sq = 0;
    for (double& x : p) sp += (x = u(rng));
    for (double& x : q) sq += (x = u(rng));
    for (double& x : p) x /= sp;
    for (double& x : q) x /= sq;
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 4; ++j) cost_t[j * 3 + i] = cost[i * 4 + j] = u(rng);
    EXPECT_NEAR(solver.solve(p, q, cost), solver.solve(q, p, cost_t), 1e-12);
  }
}
