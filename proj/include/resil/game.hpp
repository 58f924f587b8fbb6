#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <cstring>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "resil/error.hpp"
#include "resil/random.hpp"

namespace resil {

/// Index of a state in the enumerated state space of a game.
struct StateId {
  std::uint32_t value = 0;

  constexpr StateId() = default;
  constexpr explicit StateId(std::uint32_t v) : value(v) {}
  constexpr auto operator<=>(const StateId&) const = default;
};

/// One action index per agent.
using JointAction = std::vector<int>;

/// Flat (mixed-radix, agent 0 most significant) index of a joint action.
using JointIndex = std::uint32_t;

struct Successor {
  std::uint32_t state;
  double prob;

  friend bool operator==(const Successor&, const Successor&) = default;
};

/**
 * @brief An n-agent Markov game over an enumerated state space.
 *
 * Transition rows are stored as slices into a shared successor pool; editing a
 * row appends a new slice, so copies of a game stay cheap and the original is
 * never touched by an edit applied to a copy.
 */
class TabularMarkovGame {
 public:
  static constexpr std::uint64_t kNoObservation = std::numeric_limits<std::uint64_t>::max();

  TabularMarkovGame() = default;

  TabularMarkovGame(std::vector<int> action_counts, std::vector<std::string> labels,
                    double gamma)
      : action_counts_(std::move(action_counts)), labels_(std::move(labels)), gamma_(gamma) {
    if (action_counts_.empty()) throw ModelError("game needs at least one agent");
    num_joint_ = 1;
    for (int c : action_counts_) {
      if (c < 1) throw ModelError("every agent needs at least one action");
      num_joint_ *= static_cast<std::uint32_t>(c);
    }
    const std::size_t rows = labels_.size() * num_joint_;
    rows_.assign(rows, RowRef{0, 0});
    rewards_.assign(rows * action_counts_.size(), 0.0);
    terminal_.assign(labels_.size(), 0);
    observations_.assign(labels_.size() * action_counts_.size(), kNoObservation);
  }

  std::size_t num_states() const { return labels_.size(); }
  int num_agents() const { return static_cast<int>(action_counts_.size()); }
  std::uint32_t num_joint_actions() const { return num_joint_; }
  int action_count(int agent) const { return action_counts_.at(agent); }
  const std::vector<int>& action_counts() const { return action_counts_; }
  double gamma() const { return gamma_; }
  StateId initial_state() const { return initial_; }
  const std::string& label(StateId s) const { return labels_.at(s.value); }
  const std::vector<std::string>& labels() const { return labels_; }
  bool is_terminal(StateId s) const { return terminal_.at(s.value) != 0; }
  std::uint64_t observation_cardinality() const { return obs_cardinality_; }

  JointIndex joint_index(std::span<const int> actions) const {
    if (actions.size() != action_counts_.size())
      throw ModelError("joint action has wrong number of agents");
    JointIndex idx = 0;
    for (std::size_t i = 0; i < actions.size(); ++i) {
      if (actions[i] < 0 || actions[i] >= action_counts_[i])
        throw ModelError("action index out of range for agent " + std::to_string(i));
      idx = idx * static_cast<JointIndex>(action_counts_[i]) + static_cast<JointIndex>(actions[i]);
    }
    return idx;
  }

  JointAction joint_action(JointIndex idx) const {
    JointAction a(action_counts_.size());
    for (std::size_t i = a.size(); i-- > 0;) {
      a[i] = static_cast<int>(idx % static_cast<JointIndex>(action_counts_[i]));
      idx /= static_cast<JointIndex>(action_counts_[i]);
    }
    return a;
  }

  bool has_row(StateId s, JointIndex j) const { return rows_.at(row_index(s, j)).count > 0; }

  std::span<const Successor> row(StateId s, JointIndex j) const {
    const RowRef& r = rows_.at(row_index(s, j));
    return {pool_.data() + r.offset, r.count};
  }

  double reward(StateId s, JointIndex j, int agent) const {
    return rewards_.at(row_index(s, j) * action_counts_.size() + static_cast<std::size_t>(agent));
  }

  std::span<const double> rewards(StateId s, JointIndex j) const {
    return {rewards_.data() + row_index(s, j) * action_counts_.size(), action_counts_.size()};
  }

  std::uint64_t observation(StateId s, int agent) const {
    return observations_.at(static_cast<std::size_t>(s.value) * action_counts_.size() +
                            static_cast<std::size_t>(agent));
  }

  // --- construction and editing -------------------------------------------

  void set_row(StateId s, JointIndex j, std::span<const Successor> row) {
    RowRef& r = rows_.at(row_index(s, j));
    r.offset = static_cast<std::uint32_t>(pool_.size());
    r.count = static_cast<std::uint32_t>(row.size());
    pool_.insert(pool_.end(), row.begin(), row.end());
  }

  void set_reward(StateId s, JointIndex j, int agent, double value) {
    rewards_.at(row_index(s, j) * action_counts_.size() + static_cast<std::size_t>(agent)) = value;
  }

  void set_rewards(StateId s, JointIndex j, std::span<const double> values) {
    if (values.size() != action_counts_.size()) throw ModelError("reward vector has wrong length");
    std::copy(values.begin(), values.end(),
              rewards_.begin() + static_cast<std::ptrdiff_t>(row_index(s, j) * action_counts_.size()));
  }

  void set_initial_state(StateId s) {
    if (s.value >= num_states()) throw ModelError("initial state out of range");
    initial_ = s;
  }

  void set_terminal(StateId s, bool terminal) { terminal_.at(s.value) = terminal ? 1 : 0; }

  void set_observation(StateId s, int agent, std::uint64_t code) {
    observations_.at(static_cast<std::size_t>(s.value) * action_counts_.size() +
                     static_cast<std::size_t>(agent)) = code;
  }

  void set_observation_cardinality(std::uint64_t n) { obs_cardinality_ = n; }

  /// Drops successor slices no longer referenced by any row.
  void compact() {
    std::vector<Successor> pool;
    pool.reserve(rows_.size());
    for (RowRef& r : rows_) {
      const auto first = pool_.begin() + r.offset;
      const auto offset = static_cast<std::uint32_t>(pool.size());
      pool.insert(pool.end(), first, first + r.count);
      r.offset = offset;
    }
    pool_ = std::move(pool);
  }

  /// Throws ModelError naming the first violated invariant.
  void validate() const {
    if (!(gamma_ > 0.0 && gamma_ <= 1.0)) throw ModelError("gamma must lie in (0, 1]");
    if (num_states() == 0) throw ModelError("game has no states");
    if (initial_.value >= num_states()) throw ModelError("initial state out of range");
    for (std::uint32_t s = 0; s < num_states(); ++s) {
      for (JointIndex j = 0; j < num_joint_; ++j) {
        const auto r = row(StateId{s}, j);
        if (r.empty())
          throw ModelError("missing transition row at state " + std::to_string(s) + ", joint action " +
                           std::to_string(j));
        double total = 0.0;
        for (const Successor& succ : r) {
          if (succ.state >= num_states()) throw ModelError("successor state out of range");
          if (!(succ.prob >= 0.0 && succ.prob <= 1.0))
            throw ModelError("transition probability outside [0, 1]");
          total += succ.prob;
        }
        if (std::abs(total - 1.0) > 1e-9)
          throw ModelError("transition row at state " + std::to_string(s) + " does not sum to 1");
        for (double v : rewards(StateId{s}, j))
          if (!std::isfinite(v)) throw ModelError("non-finite reward");
      }
      for (int i = 0; i < num_agents(); ++i)
        if (observation(StateId{s}, i) == kNoObservation)
          throw ModelError("observation undefined for state " + std::to_string(s));
    }
  }

  /// Same state space, same per-agent action sets.
  bool homogeneous_with(const TabularMarkovGame& other) const {
    return num_states() == other.num_states() && action_counts_ == other.action_counts_;
  }

  /// Order-stable 64-bit FNV-1a digest of the model content.
  std::uint64_t content_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const void* data, std::size_t n) {
      const auto* p = static_cast<const unsigned char*>(data);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
      }
    };
    auto mix_u64 = [&](std::uint64_t v) { mix(&v, sizeof v); };
    auto mix_f64 = [&](double v) {
      if (v == 0.0) v = 0.0;  // fold -0.0
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      mix_u64(bits);
    };
    mix_u64(action_counts_.size());
    for (int c : action_counts_) mix_u64(static_cast<std::uint64_t>(c));
    mix_u64(num_states());
    for (const auto& l : labels_) {
      mix_u64(l.size());
      mix(l.data(), l.size());
    }
    mix_f64(gamma_);
    mix_u64(initial_.value);
    for (std::uint8_t t : terminal_) mix_u64(t);
    for (std::uint32_t s = 0; s < num_states(); ++s)
      for (JointIndex j = 0; j < num_joint_; ++j) {
        const auto r = row(StateId{s}, j);
        mix_u64(r.size());
        for (const Successor& succ : r) {
          mix_u64(succ.state);
          mix_f64(succ.prob);
        }
      }
    for (double v : rewards_) mix_f64(v);
    for (std::uint64_t o : observations_) mix_u64(o);
    mix_u64(obs_cardinality_);
    return h;
  }

 private:
  struct RowRef {
    std::uint32_t offset;
    std::uint32_t count;
  };

  std::size_t row_index(StateId s, JointIndex j) const {
    if (s.value >= num_states()) throw ModelError("state index out of range");
    if (j >= num_joint_) throw ModelError("joint action index out of range");
    return static_cast<std::size_t>(s.value) * num_joint_ + j;
  }

  std::vector<int> action_counts_;
  std::vector<std::string> labels_;
  double gamma_ = 1.0;
  std::uint32_t num_joint_ = 0;
  StateId initial_{};
  std::vector<RowRef> rows_;
  std::vector<Successor> pool_;
  std::vector<double> rewards_;
  std::vector<std::uint8_t> terminal_;
  std::vector<std::uint64_t> observations_;
  std::uint64_t obs_cardinality_ = 0;
};

struct StepResult {
  StateId next;
  std::vector<double> rewards;
  bool done = false;
};

/// Samples one environment transition. Deterministic given the rng state.
inline StepResult step(const TabularMarkovGame& game, StateId s, JointIndex joint, Rng& rng) {
  const auto row = game.row(s, joint);
  if (row.empty())
    throw ModelError("missing transition row at state " + std::to_string(s.value));
  const double u = uniform01(rng);
  double acc = 0.0;
  std::uint32_t next = row.back().state;
  for (const Successor& succ : row) {
    acc += succ.prob;
    if (u < acc) {
      next = succ.state;
      break;
    }
  }
  const auto r = game.rewards(s, joint);
  StepResult out{StateId{next}, std::vector<double>(r.begin(), r.end()), false};
  out.done = game.is_terminal(out.next);
  return out;
}

inline StepResult step(const TabularMarkovGame& game, StateId s, const JointAction& a, Rng& rng) {
  return step(game, s, game.joint_index(a), rng);
}

/// States reachable from `from` (inclusive), in ascending index order.
inline std::vector<StateId> reachable_states(const TabularMarkovGame& game, StateId from) {
  std::vector<std::uint8_t> seen(game.num_states(), 0);
  std::vector<std::uint32_t> stack{from.value};
  seen[from.value] = 1;
  while (!stack.empty()) {
    const std::uint32_t s = stack.back();
    stack.pop_back();
    for (JointIndex j = 0; j < game.num_joint_actions(); ++j)
      for (const Successor& succ : game.row(StateId{s}, j))
        if (succ.prob > 0.0 && !seen[succ.state]) {
          seen[succ.state] = 1;
          stack.push_back(succ.state);
        }
  }
  std::vector<StateId> out;
  for (std::uint32_t s = 0; s < seen.size(); ++s)
    if (seen[s]) out.push_back(StateId{s});
  return out;
}

}  // namespace resil
