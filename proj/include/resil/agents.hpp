#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <unordered_map>
#include <vector>

#include "resil/error.hpp"
#include "resil/observation.hpp"
#include "resil/random.hpp"
#include "resil/replay_buffer.hpp"

namespace resil {

/// Linear decay from `start` to `end` over `decay_episodes`, then constant.
struct EpsilonSchedule {
  double start = 1.0;
  double end = 0.05;
  std::uint64_t decay_episodes = 10000;

  double at(std::uint64_t episode) const {
    if (decay_episodes == 0 || episode >= decay_episodes) return end;
    const double f = static_cast<double>(episode) / static_cast<double>(decay_episodes);
    return start + (end - start) * f;
  }
};

struct AgentConfig {
  double eta = 0.1;
  EpsilonSchedule epsilon;
  /// Uses gamma inside the reward estimate instead of the undiscounted form.
  bool discounted_estimate = false;
  std::size_t buffer_capacity = 5000;
  std::size_t batch_size = 8;
  double alpha = 0.6;
  double eps_norm = 1e-6;
  double j_max = 1e6;

  void validate() const {
    if (!(eta > 0.0 && eta <= 1.0)) throw ConfigError("learning rate eta must lie in (0, 1]");
    for (double e : {epsilon.start, epsilon.end})
      if (!(e >= 0.0 && e <= 1.0)) throw ConfigError("exploration epsilon must lie in [0, 1]");
    if (buffer_capacity == 0) throw ConfigError("buffer capacity must be positive");
    if (!(alpha >= 0.0)) throw ConfigError("priority exponent alpha must be non-negative");
    if (!(eps_norm > 0.0)) throw ConfigError("misalignment floor must be positive");
  }
};

/// Sparse score table: ObservationKey -> one value per choice, 0 when unseen.
class ScoreTable {
 public:
  explicit ScoreTable(int width = 1) : width_(width) {}

  int width() const { return width_; }
  std::size_t size() const { return table_.size(); }

  /// Row for `key`, or nullptr when never written.
  const double* find(const ObservationKey& key) const {
    const auto it = table_.find(key);
    return it == table_.end() ? nullptr : it->second.data();
  }

  double get(const ObservationKey& key, int a) const {
    const double* row = find(key);
    return row ? row[a] : 0.0;
  }

  double* row(const ObservationKey& key) {
    auto [it, inserted] = table_.try_emplace(key);
    if (inserted) it->second.assign(static_cast<std::size_t>(width_), 0.0);
    return it->second.data();
  }

  double max(const ObservationKey& key) const {
    const double* r = find(key);
    return r ? *std::max_element(r, r + width_) : 0.0;
  }

  /// Greedy choice; ties go to the lowest index.
  int argmax(const ObservationKey& key) const {
    const double* r = find(key);
    if (!r) return 0;
    return static_cast<int>(std::max_element(r, r + width_) - r);
  }

  /// Keys in ascending order, for stable iteration.
  std::vector<ObservationKey> sorted_keys() const {
    std::vector<ObservationKey> keys;
    keys.reserve(table_.size());
    for (const auto& kv : table_) keys.push_back(kv.first);
    std::sort(keys.begin(), keys.end());
    return keys;
  }

  /// Order-independent digest of every stored value.
  std::uint64_t digest() const {
    std::uint64_t h = splitmix64(static_cast<std::uint64_t>(width_));
    for (const ObservationKey& k : sorted_keys()) {
      h = splitmix64(h ^ k.local);
      h = splitmix64(h ^ k.message);
      for (double v : table_.at(k)) {
        std::uint64_t bits;
        if (v == 0.0) v = 0.0;
        std::memcpy(&bits, &v, sizeof bits);
        h = splitmix64(h ^ bits);
      }
    }
    return h;
  }

 private:
  int width_;
  std::unordered_map<ObservationKey, std::vector<double>, ObservationKeyHash> table_;
};

using QTable = ScoreTable;

/// Symbol scores over observation keys, shaped by counterfactual misalignment.
struct MessagePolicy {
  ScoreTable scores;
  double eta_m = 0.1;
};

/// Everything one learning agent owns inside a replication.
struct LearnerState {
  AgentConfig config;
  int num_actions = 1;
  double gamma = 1.0;
  QTable q;
  ReplayBuffer buffer;
  MessagePolicy message_policy;
  std::uint64_t steps = 0;
  std::uint64_t episodes = 0;

  LearnerState(const AgentConfig& cfg, int actions, double game_gamma, int symbols = 2)
      : config(cfg),
        num_actions(actions),
        gamma(game_gamma),
        q(actions),
        buffer(cfg.buffer_capacity, cfg.alpha),
        message_policy{ScoreTable(symbols), cfg.eta} {
    config.validate();
  }

  double epsilon() const { return config.epsilon.at(episodes); }

  std::uint64_t digest() const {
    std::uint64_t h = q.digest();
    h = splitmix64(h ^ buffer.digest());
    h = splitmix64(h ^ message_policy.scores.digest());
    return splitmix64(h ^ steps ^ (episodes << 32));
  }
};

/// Epsilon-greedy draw over a score row: one uniform draw decides whether to
/// explore, so the stream advances identically for every epsilon.
inline int epsilon_greedy(const ScoreTable& table, const ObservationKey& key, double epsilon, Rng& rng) {
  const double u = uniform01(rng);
  if (u < epsilon) return static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(table.width())));
  return table.argmax(key);
}

inline int select_action(const LearnerState& agent, const ObservationKey& obs, Rng& rng) {
  return epsilon_greedy(agent.q, obs, agent.epsilon(), rng);
}

inline int select_action(const LearnerState& agent, const ObservationKey& obs, double epsilon, Rng& rng) {
  return epsilon_greedy(agent.q, obs, epsilon, rng);
}

/// r_hat = Q(o, a) - g * Q(o', argmax Q(o', .)) with g = 1, or gamma in the
/// discounted variant. A terminal successor contributes nothing.
inline double estimate_reward(const LearnerState& agent, const Transition& tau) {
  const double g = agent.config.discounted_estimate ? agent.gamma : 1.0;
  const double next = tau.done ? 0.0 : agent.q.get(tau.next_obs, agent.q.argmax(tau.next_obs));
  return agent.q.get(tau.obs, tau.action) - g * next;
}

/// J = |r - r_hat| / max(|r|, eps_norm), clipped at j_max.
inline double misalignment(double r, double r_hat, double eps_norm = 1e-6, double j_max = 1e6) {
  return std::min(std::abs(r - r_hat) / std::max(std::abs(r), eps_norm), j_max);
}

inline double misalignment(const LearnerState& agent, const Transition& tau) {
  return misalignment(tau.reward, estimate_reward(agent, tau), agent.config.eps_norm, agent.config.j_max);
}

/// One Q-learning step on `tau`; returns the TD error before the update.
inline double q_update(LearnerState& agent, const Transition& tau) {
  const double bootstrap = tau.done ? 0.0 : agent.q.max(tau.next_obs);
  const double target = tau.reward + agent.gamma * bootstrap;
  double* row = agent.q.row(tau.obs);
  const double td = target - row[tau.action];
  row[tau.action] += agent.config.eta * td;
  return td;
}

/// Q-learning over a sampled batch, then refreshes each sampled entry's
/// priority to its new misalignment. Returns the mean absolute TD error.
inline double update(LearnerState& agent, const Batch& batch) {
  if (batch.items.empty()) throw ModelError("update needs a non-empty batch");
  double total = 0.0;
  for (const Transition& tau : batch.items) total += std::abs(q_update(agent, tau));
  for (std::size_t k = 0; k < batch.slots.size(); ++k)
    agent.buffer.set_priority(batch.slots[k], misalignment(agent, batch.items[k]));
  return total / static_cast<double>(batch.items.size());
}

/// Q-learning over plain transitions (no buffer bookkeeping).
inline double update(LearnerState& agent, std::span<const Transition> batch) {
  if (batch.empty()) throw ModelError("update needs a non-empty batch");
  double total = 0.0;
  for (const Transition& tau : batch) total += std::abs(q_update(agent, tau));
  return total / static_cast<double>(batch.size());
}

inline std::size_t buffer_push(ReplayBuffer& buffer, const Transition& tau, double priority) {
  return buffer.push(tau, priority);
}

/// Pushes with priority equal to the agent's current misalignment on `tau`.
inline std::size_t buffer_push(LearnerState& agent, const Transition& tau) {
  return agent.buffer.push(tau, misalignment(agent, tau));
}

inline Batch buffer_sample(const ReplayBuffer& buffer, std::size_t n, Rng& rng) { return buffer.sample(n, rng); }

}  // namespace resil
