#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "resil/error.hpp"
#include "resil/game.hpp"
#include "resil/kantorovich.hpp"

namespace resil {

struct MetricOptions {
  double c = 0.5;
  double tol = 1e-6;
  int max_iter = 200;
  /// Sum only over states reachable from the initial state(s) instead of all states.
  bool reachable_only = false;
};

/// Pairwise state distances d(s, s') between a game (rows) and a homogeneous
/// variant (columns).
struct DistanceMatrix {
  std::size_t num_states = 0;
  std::vector<double> values;
  double c = 0.0;
  int iterations = 0;
  double residual = 0.0;

  double at(std::size_t s, std::size_t s_other) const { return values[s * num_states + s_other]; }
};

/// Per-run diagnostics of the fixed-point iteration.
struct FixedPointTrace {
  int iterations = 0;
  double residual = 0.0;
  /// Sup-norm change after each iteration.
  std::vector<double> residuals;
  /// Smallest pointwise change d_{n+1} - d_n seen over all iterations.
  double min_increment = 0.0;
  /// Number of state pairs the iteration ran over.
  std::size_t pairs = 0;
};

struct MdpDistance {
  double value = 0.0;
  /// True when the iteration stopped early because an iterate already
  /// exceeded `abort_above`; `value` is then a lower bound on the distance.
  bool aborted = false;
  FixedPointTrace trace;
};

/**
 * @brief Fixed-point bisimulation distance between two homogeneous games.
 *
 * Iterates F(d)(x, y) = max_a { |r_x^a - r'_y^a|_1 + c * W_d(P_x^a, P'_y^a) }
 * from d_0 = 0, where W_d is the Kantorovich distance with ground cost d and
 * |.|_1 sums reward differences over agents. Iterates are pointwise
 * non-decreasing and contract at rate c.
 *
 * Only pairs reachable from the diagonal are materialised. A state whose
 * whole future (every state reachable from it in either game) has identical
 * rows in both games has d(s, s) = 0 at every iterate, so such diagonal pairs
 * are treated as constant zero and not expanded.
 *
 * The engine owns scratch buffers; reuse one instance for repeated calls.
 */
class BisimulationEngine {
 public:
  /// Caches the transition structure of `m` for repeated distance calls with
  /// `m` as the first argument. `m` must outlive the engine and stay unmodified.
  void prepare(const TabularMarkovGame& m) {
    preds_ = predecessors(m);
    prepared_ = &m;
  }

  MdpDistance mdp_distance(const TabularMarkovGame& m, const TabularMarkovGame& other,
                           const MetricOptions& opt,
                           double abort_above = std::numeric_limits<double>::infinity()) {
    check_inputs(m, other, opt);
    const std::size_t n = m.num_states();
    std::vector<std::uint8_t> counted(n, 1);
    if (opt.reachable_only) {
      std::fill(counted.begin(), counted.end(), 0);
      for (StateId s : reachable_states(m, m.initial_state())) counted[s.value] = 1;
      for (StateId s : reachable_states(other, other.initial_state())) counted[s.value] = 1;
    }

    MdpDistance out;
    mark_tainted(m, other);

    // The first iterate needs no pairs beyond the diagonal: use it to reject
    // hopeless candidates cheaply.
    if (std::isfinite(abort_above)) {
      double first = 0.0;
      for (std::uint32_t s = 0; s < n; ++s)
        if (counted[s] && tainted_[s]) first += max_reward_gap(m, other, s, s);
      if (first > abort_above) {
        out.value = first;
        out.aborted = true;
        out.trace.iterations = 1;
        return out;
      }
    }

    auto seed = [&](std::uint32_t s) { return counted[s] && tainted_[s]; };
    auto over = [&](const std::vector<double>& d) {
      double total = 0.0;
      for (std::size_t k = 0; k < diag_.size(); ++k) total += d[diag_[k]];
      return total > abort_above;
    };
    // With a finite bound, first try closures cut off at a small depth. Pairs
    // beyond the cut count as distance 0, which can only lower every iterate,
    // so a cut-off estimate above the bound is a sound rejection.
    if (std::isfinite(abort_above)) {
      for (std::size_t depth = 2; depth <= 32; depth *= 2) {
        if (!build_closure(m, other, opt.c, seed, depth)) break;
        const FixedPointTrace t = iterate(m, other, opt, over);
        double total = 0.0;
        for (std::uint32_t p : diag_) total += values_[p];
        if (aborted_ || total > abort_above) {
          out.value = total;
          out.aborted = true;
          out.trace = t;
          return out;
        }
      }
    }
    build_closure(m, other, opt.c, seed, std::numeric_limits<std::size_t>::max());
    out.trace = iterate(m, other, opt, over);
    for (std::uint32_t p : diag_) out.value += values_[p];
    out.aborted = aborted_;
    return out;
  }

  DistanceMatrix state_distance_matrix(const TabularMarkovGame& m, const TabularMarkovGame& other,
                                       const MetricOptions& opt, FixedPointTrace* trace = nullptr) {
    check_inputs(m, other, opt);
    const std::size_t n = m.num_states();
    mark_tainted(m, other);
    build_full(n);
    const FixedPointTrace t = iterate(m, other, opt, [](const std::vector<double>&) { return false; });
    DistanceMatrix dm;
    dm.num_states = n;
    dm.values.assign(n * n, 0.0);
    for (std::size_t k = 0; k < pair_x_.size(); ++k)
      dm.values[static_cast<std::size_t>(pair_x_[k]) * n + pair_y_[k]] = values_[k];
    dm.c = opt.c;
    dm.iterations = t.iterations;
    dm.residual = t.residual;
    if (trace) *trace = t;
    return dm;
  }

 private:
  static void check_inputs(const TabularMarkovGame& m, const TabularMarkovGame& other,
                           const MetricOptions& opt) {
    if (!m.homogeneous_with(other))
      throw ModelError("distance requires homogeneous games (same states and action sets)");
    if (!(opt.c >= 0.0 && opt.c < 1.0)) throw ModelError("coupling coefficient c must lie in [0, 1)");
    if (!(opt.tol > 0.0)) throw ModelError("tolerance must be positive");
    if (opt.max_iter < 1) throw ModelError("max_iter must be positive");
  }

  static double reward_gap(const TabularMarkovGame& m, const TabularMarkovGame& other, std::uint32_t x,
                           std::uint32_t y, JointIndex j) {
    const auto r = m.rewards(StateId{x}, j);
    const auto r2 = other.rewards(StateId{y}, j);
    double gap = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) gap += std::abs(r[i] - r2[i]);
    return gap;
  }

  static double max_reward_gap(const TabularMarkovGame& m, const TabularMarkovGame& other, std::uint32_t x,
                               std::uint32_t y) {
    double best = 0.0;
    for (JointIndex j = 0; j < m.num_joint_actions(); ++j) best = std::max(best, reward_gap(m, other, x, y, j));
    return best;
  }

  static bool same_row(const TabularMarkovGame& m, const TabularMarkovGame& other, std::uint32_t s, JointIndex j) {
    const auto a = m.row(StateId{s}, j);
    const auto b = other.row(StateId{s}, j);
    if (a.size() != b.size() || !std::equal(a.begin(), a.end(), b.begin())) return false;
    const auto ra = m.rewards(StateId{s}, j);
    const auto rb = other.rewards(StateId{s}, j);
    return std::equal(ra.begin(), ra.end(), rb.begin());
  }

  // Reverse adjacency (CSR) of one game's transition graph.
  struct Predecessors {
    std::vector<std::uint32_t> offsets;
    std::vector<std::uint32_t> preds;
  };

  static Predecessors predecessors(const TabularMarkovGame& m) {
    const std::size_t n = m.num_states();
    const JointIndex nj = m.num_joint_actions();
    Predecessors out;
    out.offsets.assign(n + 1, 0);
    for (std::uint32_t s = 0; s < n; ++s)
      for (JointIndex j = 0; j < nj; ++j)
        for (const Successor& e : m.row(StateId{s}, j))
          if (e.prob > 0.0) ++out.offsets[e.state + 1];
    for (std::size_t i = 1; i <= n; ++i) out.offsets[i] += out.offsets[i - 1];
    out.preds.resize(out.offsets[n]);
    std::vector<std::uint32_t> fill(out.offsets.begin(), out.offsets.end() - 1);
    for (std::uint32_t s = 0; s < n; ++s)
      for (JointIndex j = 0; j < nj; ++j)
        for (const Successor& e : m.row(StateId{s}, j))
          if (e.prob > 0.0) out.preds[fill[e.state]++] = s;
    return out;
  }

  // tainted_[s] = some state reachable from s (in either game) has a row that
  // differs. Rows outside the differing set are shared by both games, so every
  // path up to the first differing row exists in `m`; reverse reachability in
  // `m` alone is enough.
  void mark_tainted(const TabularMarkovGame& m, const TabularMarkovGame& other) {
    const std::size_t n = m.num_states();
    const JointIndex nj = m.num_joint_actions();
    tainted_.assign(n, 0);
    std::vector<std::uint32_t> frontier;
    for (std::uint32_t s = 0; s < n; ++s)
      for (JointIndex j = 0; j < nj; ++j)
        if (!same_row(m, other, s, j)) {
          tainted_[s] = 1;
          frontier.push_back(s);
          break;
        }
    if (frontier.empty()) return;
    Predecessors scratch;
    if (prepared_ != &m) scratch = predecessors(m);
    const Predecessors& g = prepared_ == &m ? preds_ : scratch;
    while (!frontier.empty()) {
      const std::uint32_t s = frontier.back();
      frontier.pop_back();
      for (std::uint32_t k = g.offsets[s]; k < g.offsets[s + 1]; ++k)
        if (!tainted_[g.preds[k]]) {
          tainted_[g.preds[k]] = 1;
          frontier.push_back(g.preds[k]);
        }
    }
  }

  // Returns the dense pair index to all-absent, touching only used slots.
  void reset_index(std::size_t n) {
    if (index_.size() != n * n) {
      index_.assign(n * n, kAbsent);
    } else {
      for (std::size_t slot : touched_) index_[slot] = kAbsent;
    }
    touched_.clear();
    n_ = n;
  }

  void mark_zero(std::uint32_t s) {
    const std::size_t slot = static_cast<std::size_t>(s) * n_ + s;
    index_[slot] = kZero;
    touched_.push_back(slot);
  }

  static constexpr std::int32_t kZero = -1;
  static constexpr std::int32_t kAbsent = -2;

  std::int32_t add_pair(std::uint32_t x, std::uint32_t y) {
    const std::size_t pos = static_cast<std::size_t>(x) * n_ + y;
    std::int32_t& slot = index_[pos];
    if (slot == kAbsent) {
      touched_.push_back(pos);
      slot = static_cast<std::int32_t>(pair_x_.size());
      pair_x_.push_back(x);
      pair_y_.push_back(y);
    }
    return slot;
  }

  // Collects the pairs reachable from the seeded diagonal, breadth first, up to
  // `max_depth` expansions. Returns true when the cut left pairs unexpanded.
  template <class Seed>
  bool build_closure(const TabularMarkovGame& m, const TabularMarkovGame& other, double c, Seed&& seed,
                     std::size_t max_depth) {
    reset_index(m.num_states());
    for (std::uint32_t s = 0; s < n_; ++s)
      if (!tainted_[s]) mark_zero(s);
    pair_x_.clear();
    pair_y_.clear();
    diag_.clear();
    for (std::uint32_t s = 0; s < n_; ++s)
      if (seed(s)) diag_.push_back(static_cast<std::uint32_t>(add_pair(s, s)));
    if (c == 0.0) return false;
    std::size_t layer_end = pair_x_.size();
    std::size_t depth = 0;
    for (std::size_t k = 0; k < pair_x_.size(); ++k) {
      if (k == layer_end) {
        layer_end = pair_x_.size();
        if (++depth >= max_depth) return true;
      }
      const std::uint32_t x = pair_x_[k];
      const std::uint32_t y = pair_y_[k];
      for (JointIndex j = 0; j < m.num_joint_actions(); ++j)
        for (const Successor& u : m.row(StateId{x}, j)) {
          if (u.prob <= 0.0) continue;
          for (const Successor& v : other.row(StateId{y}, j))
            if (v.prob > 0.0) add_pair(u.state, v.state);
        }
    }
    return false;
  }

  void build_full(std::size_t n) {
    reset_index(n);
    pair_x_.clear();
    pair_y_.clear();
    diag_.clear();
    for (std::uint32_t x = 0; x < n; ++x)
      for (std::uint32_t y = 0; y < n; ++y) add_pair(x, y);
    for (std::uint32_t s = 0; s < n; ++s) {
      if (!tainted_[s]) mark_zero(s);
      diag_.push_back(static_cast<std::uint32_t>(s * n + s));
    }
  }

  double ground(const std::vector<double>& d, std::uint32_t u, std::uint32_t v) const {
    const std::int32_t idx = index_[static_cast<std::size_t>(u) * n_ + v];
    return idx >= 0 ? d[static_cast<std::size_t>(idx)] : 0.0;
  }

  template <class Abort>
  FixedPointTrace iterate(const TabularMarkovGame& m, const TabularMarkovGame& other, const MetricOptions& opt,
                          Abort&& abort) {
    const std::size_t np = pair_x_.size();
    values_.assign(np, 0.0);
    next_.assign(np, 0.0);
    aborted_ = false;
    FixedPointTrace trace;
    trace.pairs = np;
    trace.min_increment = std::numeric_limits<double>::infinity();
    if (np == 0) {
      trace.min_increment = 0.0;
      return trace;
    }
    const JointIndex nj = m.num_joint_actions();
    for (int it = 1; it <= opt.max_iter; ++it) {
      double residual = 0.0;
      for (std::size_t k = 0; k < np; ++k) {
        const std::uint32_t x = pair_x_[k];
        const std::uint32_t y = pair_y_[k];
        double best = 0.0;
        for (JointIndex j = 0; j < nj; ++j) {
          double term = reward_gap(m, other, x, y, j);
          if (opt.c > 0.0)
            term += opt.c * transport(m.row(StateId{x}, j), other.row(StateId{y}, j), (best - term) / opt.c);
          best = std::max(best, term);
        }
        next_[k] = best;
        const double delta = best - values_[k];
        residual = std::max(residual, std::abs(delta));
        trace.min_increment = std::min(trace.min_increment, delta);
      }
      values_.swap(next_);
      trace.iterations = it;
      trace.residual = residual;
      trace.residuals.push_back(residual);
      if (residual < opt.tol) return trace;
      if (abort(values_)) {
        aborted_ = true;
        return trace;
      }
    }
    throw ConvergenceError("bisimulation iteration exceeded max_iter (residual " +
                               std::to_string(trace.residual) + ")",
                           trace.residual, trace.iterations);
  }

  // Kantorovich term under the current iterate. When no cost exceeds
  // `irrelevant_below` the exact value cannot matter to the caller's max, and
  // the largest cost is returned instead of solving.
  double transport(std::span<const Successor> a, std::span<const Successor> b, double irrelevant_below) {
    if (a.size() == 1 && b.size() == 1) return ground(values_, a[0].state, b[0].state);
    p_.clear();
    q_.clear();
    cost_.clear();
    for (const Successor& u : a) p_.push_back(u.prob);
    for (const Successor& v : b) q_.push_back(v.prob);
    double top = 0.0;
    for (const Successor& u : a)
      for (const Successor& v : b) {
        cost_.push_back(ground(values_, u.state, v.state));
        top = std::max(top, cost_.back());
      }
    if (top == 0.0 || top <= irrelevant_below) return top;
    return solver_.solve(p_, q_, cost_);
  }

  std::size_t n_ = 0;
  std::vector<std::uint8_t> tainted_;
  std::vector<std::int32_t> index_;
  std::vector<std::size_t> touched_;
  const TabularMarkovGame* prepared_ = nullptr;
  Predecessors preds_;
  std::vector<std::uint32_t> pair_x_, pair_y_, diag_;
  std::vector<double> values_, next_;
  std::vector<double> p_, q_, cost_;
  TransportSolver solver_;
  bool aborted_ = false;
};

inline DistanceMatrix state_distance_matrix(const TabularMarkovGame& m, const TabularMarkovGame& other,
                                            const MetricOptions& opt = {}) {
  BisimulationEngine engine;
  return engine.state_distance_matrix(m, other, opt);
}

/// delta(M, M') = sum over states of d(s, s) under the identity matching.
inline double mdp_distance(const TabularMarkovGame& m, const TabularMarkovGame& other,
                           const MetricOptions& opt = {}) {
  BisimulationEngine engine;
  return engine.mdp_distance(m, other, opt).value;
}

}  // namespace resil
