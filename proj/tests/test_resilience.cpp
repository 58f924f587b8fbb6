#include <gtest/gtest.h>

#include <numeric>

#include "resil/random.hpp"
#include "resil/resilience.hpp"

using namespace resil;

TEST(GroupUtility, WindowExamples) {
  const std::vector<double> flat{10, 10, 10};
  EXPECT_EQ(group_utility(flat, 3), 10.0);
  const std::vector<double> two{0, 10};
  EXPECT_EQ(group_utility(two, 1), 10.0);
  std::vector<double> ramp(100);
  std::iota(ramp.begin(), ramp.end(), 1.0);
  EXPECT_DOUBLE_EQ(group_utility(ramp, 10), 95.5);
  EXPECT_DOUBLE_EQ(group_utility(UtilityWindow{ramp, 100, Phase::Post}), 50.5);
}

TEST(GroupUtility, RejectsShortOrEmptyWindows) {
  const std::vector<double> two{1, 2};
  EXPECT_THROW(group_utility(two, 3), ModelError);
  EXPECT_THROW(group_utility(two, 0), ModelError);
}

TEST(CkInExpectation, Arithmetic) {
  const std::vector<double> s{40, 60};
  const auto e = ck_in_expectation(100, s, 5);
  EXPECT_DOUBLE_EQ(e.c_k_mean, 0.5);
  EXPECT_DOUBLE_EQ(e.c_k_min, 0.4);
  EXPECT_NEAR(e.c_k_std, std::sqrt(0.02), 1e-15);
  EXPECT_EQ(e.samples, 2u);
  EXPECT_EQ(e.K, 5.0);
  EXPECT_FALSE(e.undefined_normalization);
}

TEST(CkInExpectation, UnperturbedEquivalent) {
  const std::vector<double> s(7, 3.3);
  const auto e = ck_in_expectation(3.3, s);
  EXPECT_EQ(e.c_k_mean, 1.0);
  EXPECT_EQ(e.c_k_min, 1.0);
  EXPECT_EQ(e.c_k_std, 0.0);
}

TEST(CkInExpectation, ReportFormatFixture) {
  const std::vector<double> s{0.21 * 3.56};
  EXPECT_NEAR(ck_in_expectation(3.56, s).c_k_mean, 0.21, 1e-12);
}

TEST(CkInExpectation, FlagsNonPositiveOrigin) {
  const std::vector<double> s{1, 2};
  EXPECT_TRUE(ck_in_expectation(-4, s).undefined_normalization);
  const auto z = ck_in_expectation(0, s);
  EXPECT_TRUE(z.undefined_normalization);
  EXPECT_TRUE(std::isnan(z.c_k_mean));
  EXPECT_THROW(ck_in_expectation(1, std::vector<double>{}), ModelError);
}

TEST(CkInExpectation, OrderingAndCertificate) {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const double u0 = uniform_real(rng, 0.1, 50);
    std::vector<double> s(1 + uniform_index(rng, 12));
    for (double& x : s) x = uniform_real(rng, -20, 80);
    const auto e = ck_in_expectation(u0, s);
    EXPECT_LE(e.c_k_min, e.c_k_mean);
    EXPECT_LE(e.c_k_mean, e.c_k_max);
    EXPECT_GE(e.c_k_std, 0.0);
    for (double u : s) EXPECT_GE(u, e.c_k_min * u0 - 1e-9);
  }
}

TEST(CkInExpectation, ScaleInvariant) {
  Rng rng(23);
  for (int trial = 0; trial < 100; ++trial) {
    const double u0 = uniform_real(rng, 1, 10);
    const double k = uniform_real(rng, 0.01, 1000);
    std::vector<double> s(5), scaled(5);
    for (std::size_t i = 0; i < s.size(); ++i) {
      s[i] = uniform_real(rng, 0, 20);
      scaled[i] = s[i] * k;
    }
    const auto a = ck_in_expectation(u0, s);
    const auto b = ck_in_expectation(u0 * k, scaled);
    EXPECT_NEAR(a.c_k_mean, b.c_k_mean, 1e-12 * std::max(1.0, std::abs(a.c_k_mean)));
    EXPECT_NEAR(a.c_k_std, b.c_k_std, 1e-10);
    EXPECT_NEAR(a.c_k_min, b.c_k_min, 1e-12);
  }
}

TEST(Chebyshev, Examples) {
  EXPECT_EQ(chebyshev_samples(4, 0.5, 0.9), 160u);
  EXPECT_EQ(chebyshev_samples(0, 0.5, 0.9), 1u);
  EXPECT_EQ(chebyshev_samples(1, 1, 0.5), 2u);
  EXPECT_EQ(chebyshev_samples(1, 1, 0.3), 2u);  // 1.43 -> 2
}

TEST(Chebyshev, RejectsOutOfRange) {
  EXPECT_THROW(chebyshev_samples(-1, 1, 0.5), ModelError);
  EXPECT_THROW(chebyshev_samples(1, 0, 0.5), ModelError);
  EXPECT_THROW(chebyshev_samples(1, 1, 1.0), ModelError);
  EXPECT_THROW(chebyshev_samples(1, 1, 0.0), ModelError);
}

TEST(Chebyshev, MonteCarloMeanLandsInsideBound) {
  // u' ~ U(20, 80) against u_origin = 100: C_K ~ U(0.2, 0.8), mean 0.5,
  // variance 0.36 / 12 = 0.03 per sample.
  const double var = 0.36 / 12.0, eps = 0.02, conf = 0.9;
  const std::uint64_t n = chebyshev_samples(var, eps, conf);
  EXPECT_EQ(n, 750u);
  Rng rng(99);
  int inside = 0;
  const int repeats = 200;
  for (int r = 0; r < repeats; ++r) {
    std::vector<double> s(n);
    for (double& x : s) x = uniform_real(rng, 20, 80);
    inside += std::abs(ck_in_expectation(100, s).c_k_mean - 0.5) <= eps;
  }
  EXPECT_GE(inside, static_cast<int>(conf * repeats));
}

TEST(SampleStats, SingleValue) {
  const std::vector<double> one{3};
  const auto s = sample_stats(one);
  EXPECT_EQ(s.mean, 3.0);
  EXPECT_EQ(s.std, 0.0);
}
