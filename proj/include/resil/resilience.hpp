#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "resil/error.hpp"

namespace resil {

enum class Phase { Pre, Post };

inline std::string to_string(Phase p) { return p == Phase::Pre ? "pre" : "post"; }

struct UtilityWindow {
  std::vector<double> episode_returns;
  std::size_t window = 1;
  Phase phase = Phase::Pre;
};

/// Mean of the last `window` episode returns.
inline double group_utility(std::span<const double> returns, std::size_t window) {
  if (window == 0) throw ModelError("utility window must be >= 1");
  if (returns.size() < window)
    throw ModelError("utility window of " + std::to_string(window) + " episodes needs at least that many returns, got " +
                     std::to_string(returns.size()));
  double sum = 0.0;
  for (std::size_t i = returns.size() - window; i < returns.size(); ++i) sum += returns[i];
  return sum / static_cast<double>(window);
}

inline double group_utility(const UtilityWindow& w) { return group_utility(w.episode_returns, w.window); }

struct SampleStats {
  double mean = 0.0;
  double std = 0.0;
  double min = 0.0;
  double max = 0.0;
  std::size_t n = 0;
};

/// Mean, sample standard deviation (n - 1), min and max. std is 0 for n = 1.
inline SampleStats sample_stats(std::span<const double> xs) {
  SampleStats s;
  s.n = xs.size();
  if (xs.empty()) return s;
  s.min = *std::min_element(xs.begin(), xs.end());
  s.max = *std::max_element(xs.begin(), xs.end());
  double sum = 0.0;
  for (double x : xs) sum += x;
  s.mean = sum / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  // Rounding can push a constant sample's mean a hair outside [min, max].
  s.mean = std::clamp(s.mean, s.min, s.max);
  return s;
}

struct ResilienceEstimate {
  double K = 0.0;
  double c_k_mean = 0.0;
  double c_k_std = 0.0;
  double c_k_min = 0.0;
  double c_k_max = 0.0;
  std::size_t samples = 0;
  double u_origin = 0.0;
  /// Set when u_origin <= 0: the ratios are not a meaningful normalization.
  bool undefined_normalization = false;
};

/**
 * @brief Ratios u_i / u_origin summarized as mean, sample std, min and max.
 * The min is the worst case over the sampled games. A non-positive origin
 * flags the estimate; the ratios are still reported when u_origin != 0.
 */
inline ResilienceEstimate ck_in_expectation(double u_origin, std::span<const double> samples, double K = 0.0) {
  if (samples.empty()) throw ModelError("resilience estimate needs at least one perturbed sample");
  ResilienceEstimate e;
  e.K = K;
  e.samples = samples.size();
  e.u_origin = u_origin;
  e.undefined_normalization = !(u_origin > 0.0);
  if (u_origin == 0.0 || !std::isfinite(u_origin)) {
    e.c_k_mean = e.c_k_std = e.c_k_min = e.c_k_max = std::nan("");
    return e;
  }
  std::vector<double> ratios;
  ratios.reserve(samples.size());
  for (double u : samples) ratios.push_back(u / u_origin);
  const SampleStats s = sample_stats(ratios);
  e.c_k_mean = s.mean;
  e.c_k_std = s.std;
  e.c_k_min = s.min;
  e.c_k_max = s.max;
  return e;
}

/// Samples needed so the sample mean lies within epsilon of the expectation
/// with probability at least confidence_delta: ceil(var / (eps^2 (1 - delta))),
/// never less than 1.
inline std::uint64_t chebyshev_samples(double variance, double epsilon, double confidence_delta) {
  if (!(variance >= 0.0) || !std::isfinite(variance)) throw ModelError("variance must be finite and >= 0");
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw ModelError("epsilon must be finite and > 0");
  if (!(confidence_delta > 0.0 && confidence_delta < 1.0)) throw ModelError("confidence_delta must lie in (0, 1)");
  const double raw = variance / (epsilon * epsilon * (1.0 - confidence_delta));
  // Strip representation noise such as 4 / (0.25 * 0.1) = 160.00000000000003.
  const double nearest = std::round(raw);
  const double n = std::abs(raw - nearest) <= 1e-9 * std::max(1.0, nearest) ? nearest : std::ceil(raw);
  return std::max<std::uint64_t>(1, static_cast<std::uint64_t>(n));
}

}  // namespace resil
