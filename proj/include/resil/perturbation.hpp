#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "resil/bisimulation.hpp"
#include "resil/error.hpp"
#include "resil/game.hpp"
#include "resil/gridworld.hpp"
#include "resil/random.hpp"

namespace resil {

enum class PerturbationKind { TransitionEdit, RewardEdit, InitialStateEdit };

inline const char* to_string(PerturbationKind k) {
  switch (k) {
    case PerturbationKind::TransitionEdit: return "transition";
    case PerturbationKind::RewardEdit: return "reward";
    case PerturbationKind::InitialStateEdit: return "initial-state";
  }
  return "?";
}

/// A single-element edit: one transition row, one agent's reward at one
/// (state, joint action), or the initial state.
struct AtomicPerturbation {
  PerturbationKind kind = PerturbationKind::RewardEdit;
  StateId state{};
  JointIndex joint = 0;
  int agent = 0;
  std::vector<Successor> row;
  double reward = 0.0;
  StateId initial{};

  static AtomicPerturbation transition(StateId s, JointIndex j, std::vector<Successor> row) {
    AtomicPerturbation p;
    p.kind = PerturbationKind::TransitionEdit;
    p.state = s;
    p.joint = j;
    p.row = std::move(row);
    return p;
  }

  static AtomicPerturbation reward_edit(StateId s, JointIndex j, int agent, double value) {
    AtomicPerturbation p;
    p.kind = PerturbationKind::RewardEdit;
    p.state = s;
    p.joint = j;
    p.agent = agent;
    p.reward = value;
    return p;
  }

  static AtomicPerturbation initial_state(StateId s) {
    AtomicPerturbation p;
    p.kind = PerturbationKind::InitialStateEdit;
    p.initial = s;
    return p;
  }

  friend bool operator==(const AtomicPerturbation&, const AtomicPerturbation&) = default;
};

/// Applies one edit in place. Throws ModelError when the target is out of range
/// or a transition payload is not a distribution.
inline void apply_in_place(TabularMarkovGame& game, const AtomicPerturbation& p) {
  switch (p.kind) {
    case PerturbationKind::TransitionEdit: {
      double total = 0.0;
      for (const Successor& s : p.row) {
        if (s.state >= game.num_states()) throw ModelError("transition edit targets a missing state");
        if (!(s.prob >= 0.0 && s.prob <= 1.0)) throw ModelError("transition edit probability outside [0, 1]");
        total += s.prob;
      }
      if (std::abs(total - 1.0) > 1e-9) throw ModelError("transition edit payload must sum to 1");
      game.set_row(p.state, p.joint, p.row);
      break;
    }
    case PerturbationKind::RewardEdit:
      if (p.agent < 0 || p.agent >= game.num_agents()) throw ModelError("reward edit targets a missing agent");
      if (!std::isfinite(p.reward)) throw ModelError("reward edit value must be finite");
      game.set_reward(p.state, p.joint, p.agent, p.reward);
      break;
    case PerturbationKind::InitialStateEdit:
      game.set_initial_state(p.initial);
      break;
  }
}

/// Returns a copy of `game` with the edit applied; `game` is untouched.
inline TabularMarkovGame apply(const TabularMarkovGame& game, const AtomicPerturbation& p) {
  TabularMarkovGame out = game;
  apply_in_place(out, p);
  return out;
}

/// Applies a bundle of edits as one step.
inline TabularMarkovGame apply(const TabularMarkovGame& game, std::span<const AtomicPerturbation> edits) {
  TabularMarkovGame out = game;
  for (const AtomicPerturbation& p : edits) apply_in_place(out, p);
  return out;
}

/// Edits that carry every row (and reward) changed between two builds of the
/// same state space onto `current`. Rewards already equal in `current` are
/// skipped.
inline std::vector<AtomicPerturbation> rebuild_edits(const TabularMarkovGame& before,
                                                     const TabularMarkovGame& after,
                                                     const TabularMarkovGame& current) {
  if (!before.homogeneous_with(after) || !before.homogeneous_with(current))
    throw ModelError("rebuilt game changed the state or action space");
  std::vector<AtomicPerturbation> edits;
  for (std::uint32_t s = 0; s < after.num_states(); ++s)
    for (JointIndex j = 0; j < after.num_joint_actions(); ++j) {
      const StateId sid{s};
      const auto was = before.row(sid, j);
      const auto now = after.row(sid, j);
      if (!std::equal(was.begin(), was.end(), now.begin(), now.end()))
        edits.push_back(AtomicPerturbation::transition(sid, j, {now.begin(), now.end()}));
      for (int i = 0; i < after.num_agents(); ++i)
        if (before.reward(sid, j, i) != after.reward(sid, j, i) &&
            current.reward(sid, j, i) != after.reward(sid, j, i))
          edits.push_back(AtomicPerturbation::reward_edit(sid, j, i, after.reward(sid, j, i)));
    }
  return edits;
}

/// Bundle that blocks `edge` in a gridworld: every move across it becomes a
/// self-loop with the illegal-move penalty, in both directions.
inline std::vector<AtomicPerturbation> wall_add_bundle(const GridWorldSpec& spec, WallEdge edge) {
  GridWorldSpec walled = spec;
  walled.walls.insert(edge);
  const TabularMarkovGame before = build_game(spec);
  return rebuild_edits(before, build_game(walled), before);
}

/// One accepted sampler step: a generator's bundle and the distance after it.
struct TraceStep {
  std::string generator;
  std::vector<AtomicPerturbation> edits;
  double magnitude = 0.0;
};

struct PerturbationTrace {
  std::uint64_t origin_hash = 0;
  std::vector<TraceStep> steps;
  double magnitude = 0.0;
  double bound = 0.0;
  std::uint64_t seed = 0;
  bool shortfall = false;
  std::size_t candidates = 0;

  std::size_t atomic_count() const {
    std::size_t n = 0;
    for (const TraceStep& s : steps) n += s.edits.size();
    return n;
  }
};

/// Folds the trace's edits over `origin`. The origin must match the hash
/// recorded when the trace was sampled.
inline TabularMarkovGame replay(const TabularMarkovGame& origin, const PerturbationTrace& trace) {
  if (origin.content_hash() != trace.origin_hash)
    throw ModelError("trace was recorded against a different origin game");
  TabularMarkovGame out = origin;
  for (const TraceStep& step : trace.steps)
    for (const AtomicPerturbation& p : step.edits) apply_in_place(out, p);
  out.compact();
  return out;
}

/**
 * @brief Sampling weights and limits for random perturbations.
 *
 * `reward`  - one agent's reward at a random (state, joint action) shifted by
 *             U(-reward_scale, reward_scale).
 * `transition` - one random row redirected to the outcome of another joint
 *             action from the same state.
 * `wall`    - blocks a random open edge (grid only); a bundle of every row the
 *             wall changes, including the illegal-move penalty.
 * `relocate` - moves a passenger destination / resource: two reward edits,
 *             negative at the old site and positive at the new one (grid only).
 * `start`   - moves the agents' starting cells (initial-state edit, grid only).
 *
 * Zero weight disables a generator.
 */
struct PerturbationFamily {
  double w_reward = 1.0;
  double w_transition = 1.0;
  double w_wall = 1.0;
  double w_relocate = 1.0;
  double w_start = 1.0;
  double reward_scale = 1.0;
  int max_retries = 50;
  int max_steps = 32;
  /// Trace is flagged when it ends below this fraction of the bound.
  double shortfall_fraction = 0.5;
};

/**
 * @brief Draws perturbed variants M' of an origin game with delta(M, M') <= K.
 *
 * Random generator bundles are applied one at a time. After each candidate the
 * distance to the origin is recomputed exactly; the candidate is accepted only
 * if the distance stays within K and does not decrease. Sampling stops after
 * max_retries consecutive rejections or max_steps accepted steps.
 */
class PerturbationSampler {
 public:
  PerturbationSampler(const TabularMarkovGame& origin, PerturbationFamily family, MetricOptions metric)
      : origin_(origin), family_(family), metric_(metric) {
    engine_.prepare(origin_);
  }

  PerturbationSampler(const GridEnvironment& env, PerturbationFamily family, MetricOptions metric)
      : origin_(env.game), env_(&env), family_(family), metric_(metric) {
    engine_.prepare(origin_);
  }

  struct Result {
    TabularMarkovGame game;
    PerturbationTrace trace;
  };

  Result sample(double bound, std::uint64_t seed) {
    if (!(bound > 0.0)) throw ModelError("perturbation bound K must be positive");
    Rng rng(seed);
    PerturbationTrace trace;
    trace.origin_hash = origin_.content_hash();
    trace.bound = bound;
    trace.seed = seed;

    TabularMarkovGame current = origin_;
    std::optional<GridWorldSpec> working;
    std::optional<TabularMarkovGame> working_build;
    if (env_) {
      working = env_->spec;
      working_build = env_->game;
    }
    double magnitude = 0.0;
    int retries = 0;

    const std::vector<std::pair<double, int>> kinds = enabled_kinds();
    if (kinds.empty()) throw ModelError("perturbation family enables no generator");
    double total_w = 0.0;
    for (const auto& k : kinds) total_w += k.first;

    while (retries < family_.max_retries && static_cast<int>(trace.steps.size()) < family_.max_steps) {
      ++trace.candidates;
      double pick = uniform01(rng) * total_w;
      int kind = kinds.back().second;
      for (const auto& k : kinds) {
        if (pick < k.first) {
          kind = k.second;
          break;
        }
        pick -= k.first;
      }
      Candidate cand = generate(kind, current, working, working_build, rng);
      if (cand.edits.empty()) {
        ++retries;
        continue;
      }
      TabularMarkovGame next = resil::apply(current, std::span<const AtomicPerturbation>(cand.edits));
      double next_mag = magnitude;
      if (!cand.initial_only) {
        const MdpDistance d = engine_.mdp_distance(origin_, next, metric_, bound);
        if (d.aborted) {
          ++retries;
          continue;
        }
        next_mag = d.value;
      }
      if (next_mag > bound || next_mag < magnitude) {
        ++retries;
        continue;
      }
      retries = 0;
      magnitude = next_mag;
      current = std::move(next);
      if (cand.spec) {
        working = std::move(*cand.spec);
        working_build = std::move(*cand.build);
      }
      trace.steps.push_back(TraceStep{cand.generator, std::move(cand.edits), magnitude});
    }
    trace.magnitude = magnitude;
    trace.shortfall = trace.steps.empty() || magnitude < family_.shortfall_fraction * bound;
    current.compact();
    return {std::move(current), std::move(trace)};
  }

 private:
  enum Kind { kReward, kTransition, kWall, kRelocate, kStart };

  struct Candidate {
    std::string generator;
    std::vector<AtomicPerturbation> edits;
    bool initial_only = false;
    std::optional<GridWorldSpec> spec;
    std::optional<TabularMarkovGame> build;
  };

  std::vector<std::pair<double, int>> enabled_kinds() const {
    std::vector<std::pair<double, int>> out;
    auto add = [&](double w, int k) {
      if (w > 0.0) out.emplace_back(w, k);
    };
    add(family_.w_reward, kReward);
    add(family_.w_transition, kTransition);
    if (env_) {
      add(family_.w_wall, kWall);
      add(family_.w_relocate, kRelocate);
      add(family_.w_start, kStart);
    }
    return out;
  }

  Candidate generate(int kind, const TabularMarkovGame& current, const std::optional<GridWorldSpec>& working,
                     const std::optional<TabularMarkovGame>& working_build, Rng& rng) const {
    switch (kind) {
      case kReward: return reward_candidate(current, rng);
      case kTransition: return transition_candidate(current, rng);
      case kWall: return wall_candidate(current, *working, *working_build, rng);
      case kRelocate: return relocate_candidate(current, *working, rng);
      default: return start_candidate(*working, rng);
    }
  }

  StateId random_live_state(const TabularMarkovGame& g, Rng& rng) const {
    for (int tries = 0; tries < 64; ++tries) {
      const StateId s{static_cast<std::uint32_t>(uniform_index(rng, g.num_states()))};
      if (!g.is_terminal(s)) return s;
    }
    return StateId{static_cast<std::uint32_t>(uniform_index(rng, g.num_states()))};
  }

  Candidate reward_candidate(const TabularMarkovGame& g, Rng& rng) const {
    const StateId s = random_live_state(g, rng);
    const auto j = static_cast<JointIndex>(uniform_index(rng, g.num_joint_actions()));
    const int agent = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(g.num_agents())));
    const double shift = uniform_real(rng, -family_.reward_scale, family_.reward_scale);
    Candidate c;
    c.generator = "reward";
    c.edits.push_back(AtomicPerturbation::reward_edit(s, j, agent, g.reward(s, j, agent) + shift));
    return c;
  }

  Candidate transition_candidate(const TabularMarkovGame& g, Rng& rng) const {
    Candidate c;
    c.generator = "transition";
    const StateId s = random_live_state(g, rng);
    const auto j = static_cast<JointIndex>(uniform_index(rng, g.num_joint_actions()));
    const auto current = g.row(s, j);
    std::vector<Successor> row;
    if (g.num_joint_actions() > 1) {
      for (int tries = 0; tries < 16; ++tries) {
        const auto other = static_cast<JointIndex>(uniform_index(rng, g.num_joint_actions()));
        const auto cand = g.row(s, other);
        if (!std::equal(cand.begin(), cand.end(), current.begin(), current.end())) {
          row.assign(cand.begin(), cand.end());
          break;
        }
      }
    }
    if (row.empty()) {
      const auto target = static_cast<std::uint32_t>(uniform_index(rng, g.num_states()));
      row.push_back({target, 1.0});
      if (std::equal(row.begin(), row.end(), current.begin(), current.end())) return c;
    }
    c.edits.push_back(AtomicPerturbation::transition(s, j, std::move(row)));
    return c;
  }

  Candidate wall_candidate(const TabularMarkovGame& current, const GridWorldSpec& spec,
                           const TabularMarkovGame& build, Rng& rng) const {
    Candidate c;
    c.generator = "wall";
    std::vector<WallEdge> open;
    for (int y = 0; y < spec.height; ++y)
      for (int x = 0; x < spec.width; ++x) {
        const Cell a{x, y};
        for (Cell b : {Cell{x + 1, y}, Cell{x, y + 1}})
          if (spec.in_bounds(b) && !spec.blocked(a, b)) open.push_back(WallEdge::between(a, b));
      }
    if (open.empty()) return c;
    GridWorldSpec next = spec;
    next.walls.insert(open[uniform_index(rng, open.size())]);
    TabularMarkovGame rebuilt = build_game(next);
    c.edits = rebuild_edits(build, rebuilt, current);
    c.spec = std::move(next);
    c.build = std::move(rebuilt);
    return c;
  }

  Candidate relocate_candidate(const TabularMarkovGame& g, const GridWorldSpec& spec, Rng& rng) const {
    Candidate c;
    c.generator = "relocate";
    const GridCodec& codec = env_->codec;
    const int n = codec.num_agents();
    const int agent = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(n)));
    const auto item = static_cast<std::size_t>(uniform_index(rng, static_cast<std::uint64_t>(codec.num_items())));
    if (codec.num_items() == 0) return c;
    const Cell old_site =
        spec.kind == GridKind::Taxi ? spec.passengers[item].dropoff : spec.resources[item].cell;
    const int old_idx = spec.cell_index(old_site);
    int new_idx = old_idx;
    for (int tries = 0; tries < 64 && new_idx == old_idx; ++tries)
      new_idx = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(spec.num_cells())));
    if (new_idx == old_idx) return c;
    if (spec.kind == GridKind::Commons)
      for (const ResourceSpec& r : spec.resources)
        if (spec.cell_index(r.cell) == new_idx) return c;

    // Other agents on random distinct cells away from both sites.
    auto make_state = [&](int site) -> std::optional<GridState> {
      GridState st = codec.initial_grid_state();
      st.cells[static_cast<std::size_t>(agent)] = site;
      for (int i = 0; i < n; ++i) {
        if (i == agent) continue;
        int cell = -1;
        for (int tries = 0; tries < 256; ++tries) {
          const int cand = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(spec.num_cells())));
          bool taken = cand == site;
          for (int k = 0; k < i; ++k) taken |= k != agent && st.cells[static_cast<std::size_t>(k)] == cand;
          if (!taken) {
            cell = cand;
            break;
          }
        }
        if (cell < 0) return std::nullopt;
        st.cells[static_cast<std::size_t>(i)] = cell;
      }
      if (spec.kind == GridKind::Taxi) {
        std::fill(st.items.begin(), st.items.end(), 0);
        st.items[item] = agent + 1;
      } else {
        std::fill(st.items.begin(), st.items.end(), 0);
        st.items[item] = site == old_idx ? 1 : 0;
      }
      return st;
    };
    const auto from = make_state(old_idx);
    const auto to = make_state(new_idx);
    if (!from || !to) return c;
    const StateId s_from = codec.encode(*from);
    const StateId s_to = codec.encode(*to);

    JointAction a(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
      a[static_cast<std::size_t>(i)] =
          static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(g.action_count(i))));
    double positive = 0.0;
    double negative = 0.0;
    if (spec.kind == GridKind::Taxi) {
      a[static_cast<std::size_t>(agent)] = taxi_action::kDropoff;
      positive = spec.payment(item);
      negative = spec.illegal_move_penalty < 0.0 ? spec.illegal_move_penalty : -spec.payment(item);
    } else {
      a[static_cast<std::size_t>(agent)] = commons_action::kStay;
      positive = spec.step_penalty + spec.harvest_reward;
      negative = spec.step_penalty - spec.harvest_reward;
    }
    const JointIndex j = g.joint_index(a);
    c.edits.push_back(AtomicPerturbation::reward_edit(s_from, j, agent, negative));
    c.edits.push_back(AtomicPerturbation::reward_edit(s_to, j, agent, positive));
    return c;
  }

  Candidate start_candidate(const GridWorldSpec& spec, Rng& rng) const {
    Candidate c;
    c.generator = "start";
    const GridCodec& codec = env_->codec;
    GridState st = codec.initial_grid_state();
    std::vector<int> cells(static_cast<std::size_t>(spec.num_cells()));
    for (int i = 0; i < spec.num_cells(); ++i) cells[static_cast<std::size_t>(i)] = i;
    for (std::size_t i = 0; i < st.cells.size(); ++i) {
      const std::size_t k = i + uniform_index(rng, cells.size() - i);
      std::swap(cells[i], cells[k]);
      st.cells[i] = cells[i];
    }
    const StateId s = codec.encode(st);
    c.edits.push_back(AtomicPerturbation::initial_state(s));
    c.initial_only = true;
    return c;
  }

  const TabularMarkovGame& origin_;
  const GridEnvironment* env_ = nullptr;
  PerturbationFamily family_;
  MetricOptions metric_;
  BisimulationEngine engine_;
};

/// Convenience wrapper: one perturbed sample of a gridworld within bound K.
inline PerturbationSampler::Result sample_perturbed(const GridEnvironment& env, double bound,
                                                    const PerturbationFamily& family,
                                                    const MetricOptions& metric, std::uint64_t seed) {
  PerturbationSampler sampler(env, family, metric);
  return sampler.sample(bound, seed);
}

inline PerturbationSampler::Result sample_perturbed(const TabularMarkovGame& game, double bound,
                                                    const PerturbationFamily& family,
                                                    const MetricOptions& metric, std::uint64_t seed) {
  PerturbationSampler sampler(game, family, metric);
  return sampler.sample(bound, seed);
}

}  // namespace resil
