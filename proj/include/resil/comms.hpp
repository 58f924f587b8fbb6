#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "resil/agents.hpp"
#include "resil/error.hpp"
#include "resil/observation.hpp"
#include "resil/random.hpp"

namespace resil {

enum class ProtocolKind { None, MandatoryBroadcast, EmergentSelfCentric, EmergentGroupCentric };

inline std::string to_string(ProtocolKind k) {
  switch (k) {
    case ProtocolKind::None: return "none";
    case ProtocolKind::MandatoryBroadcast: return "mandatory-broadcast";
    case ProtocolKind::EmergentSelfCentric: return "emergent-self";
    case ProtocolKind::EmergentGroupCentric: return "emergent-group";
  }
  return "?";
}

inline ProtocolKind parse_protocol_kind(const std::string& s) {
  for (ProtocolKind k : {ProtocolKind::None, ProtocolKind::MandatoryBroadcast, ProtocolKind::EmergentSelfCentric,
                         ProtocolKind::EmergentGroupCentric})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown protocol '" + s + "'");
}

struct Protocol {
  ProtocolKind kind = ProtocolKind::None;
  int m_l = 1;
  int symbols = 2;

  bool emergent() const {
    return kind == ProtocolKind::EmergentSelfCentric || kind == ProtocolKind::EmergentGroupCentric;
  }

  void validate() const {
    if (kind == ProtocolKind::MandatoryBroadcast && m_l < 1) throw ConfigError("broadcast bandwidth m_l must be >= 1");
    if (emergent() && symbols < 2) throw ConfigError("emergent protocols need at least 2 symbols");
  }
};

/// One row of the optional per-step message log.
struct MessageLogEntry {
  std::uint64_t step = 0;
  int sender = 0;
  /// Symbol for emergent protocols, -1 for broadcast.
  int symbol = -1;
  /// Transition time stamp for broadcast, 0 otherwise.
  std::uint64_t transition = 0;
};

inline void write_message_log(std::ostream& out, std::span<const MessageLogEntry> log) {
  out << "step,sender,symbol,transition\n";
  for (const MessageLogEntry& e : log) {
    out << e.step << ',' << e.sender << ',';
    if (e.symbol >= 0) out << e.symbol;
    out << ',';
    if (e.symbol < 0) out << e.transition;
    out << '\n';
  }
}

/// Transition produced by an agent since the last broadcast tick.
struct FreshTransition {
  Transition tau;
  std::uint64_t seq = 0;
};

/**
 * @brief Each agent sends its top-m_l fresh transitions (by current
 * misalignment, newest first on ties) to every other agent's buffer.
 *
 * `fresh[i]` holds agent i's transitions since the previous tick and is
 * cleared. Returns the number of (transition, receiver) deliveries.
 */
inline std::size_t mandatory_broadcast(std::span<LearnerState> agents, std::vector<std::vector<FreshTransition>>& fresh,
                                       int m_l, std::uint64_t step = 0, std::vector<MessageLogEntry>* log = nullptr) {
  if (fresh.size() != agents.size()) throw ModelError("one fresh list per agent required");
  struct Pick {
    double j;
    std::uint64_t seq;
    std::size_t k;
  };
  std::vector<std::vector<std::pair<Transition, double>>> outgoing(agents.size());
  for (std::size_t i = 0; i < agents.size(); ++i) {
    std::vector<Pick> picks;
    picks.reserve(fresh[i].size());
    for (std::size_t k = 0; k < fresh[i].size(); ++k)
      picks.push_back({misalignment(agents[i], fresh[i][k].tau), fresh[i][k].seq, k});
    const std::size_t take = std::min(picks.size(), static_cast<std::size_t>(std::max(m_l, 0)));
    std::partial_sort(picks.begin(), picks.begin() + static_cast<std::ptrdiff_t>(take), picks.end(),
                      [](const Pick& a, const Pick& b) { return a.j != b.j ? a.j > b.j : a.seq > b.seq; });
    for (std::size_t p = 0; p < take; ++p) {
      outgoing[i].emplace_back(fresh[i][picks[p].k].tau, picks[p].j);
      if (log) log->push_back({step, static_cast<int>(i), -1, fresh[i][picks[p].k].tau.t});
    }
    fresh[i].clear();
  }
  // Deliver after every sender has chosen, so receipt order cannot leak into selection.
  std::size_t delivered = 0;
  for (std::size_t i = 0; i < agents.size(); ++i)
    for (const auto& [tau, j] : outgoing[i])
      for (std::size_t r = 0; r < agents.size(); ++r) {
        if (r == i) continue;
        agents[r].buffer.push(tau, j);
        ++delivered;
      }
  return delivered;
}

/// Where the agent's own symbol sits inside the message component.
struct MessageSlot {
  int agent = 0;
  int n_agents = 1;
  int symbols = 2;
};

/// Misalignment of `tau` had the agent's own slot of the received message
/// been `symbol`. Pure: reads the Q table only.
inline double counterfactual_misalignment(const LearnerState& agent, const Transition& tau, int symbol,
                                          const MessageSlot& slot) {
  Transition cf = tau;
  cf.obs.message = substitute_symbol(tau.obs.message, slot.agent, symbol, slot.n_agents, slot.symbols);
  return misalignment(agent, cf);
}

/// Counterfactual misalignment with the whole received vector replaced.
inline double counterfactual_misalignment(const LearnerState& agent, const Transition& tau, const MessageVector& m,
                                          int symbols) {
  Transition cf = tau;
  cf.obs.message = encode_message(m, symbols);
  return misalignment(agent, cf);
}

inline int select_symbol(const LearnerState& agent, const ObservationKey& obs, double epsilon, Rng& rng) {
  return epsilon_greedy(agent.message_policy.scores, obs, epsilon, rng);
}

inline int select_symbol(const LearnerState& agent, const ObservationKey& obs, Rng& rng) {
  return select_symbol(agent, obs, agent.epsilon(), rng);
}

/// Raises the target symbol's score at `key` by eta*loss and moves every
/// other score toward 0 by eta*loss/(symbols-1).
inline void reinforce_symbol(MessagePolicy& policy, const ObservationKey& key, int target, double loss) {
  const int width = policy.scores.width();
  if (target < 0 || target >= width) throw ModelError("symbol outside the message policy");
  if (loss == 0.0) return;
  const double step = policy.eta_m * loss;
  const double decay = step / static_cast<double>(width - 1);
  double* row = policy.scores.row(key);
  for (int m = 0; m < width; ++m) {
    if (m == target) {
      row[m] += step;
    } else if (row[m] > 0.0) {
      row[m] = std::max(0.0, row[m] - decay);
    } else if (row[m] < 0.0) {
      row[m] = std::min(0.0, row[m] + decay);
    }
  }
}

struct SymbolLoss {
  double loss = 0.0;
  int argmin = 0;
  double best = 0.0;
};

/// Minimum of `values` (lowest index on ties) and its gap to `actual`.
inline SymbolLoss symbol_loss(std::span<const double> values, double actual) {
  SymbolLoss out;
  out.best = std::numeric_limits<double>::infinity();
  for (std::size_t m = 0; m < values.size(); ++m)
    if (values[m] < out.best) {
      out.best = values[m];
      out.argmin = static_cast<int>(m);
    }
  out.loss = std::abs(out.best - actual);
  return out;
}

/**
 * @brief Self-centric symbol learning.
 *
 * `tau` is the transition whose observation carried the symbol the agent had
 * sent from `chosen_at`. Scans every substitute for that symbol, takes the
 * minimum counterfactual misalignment, and reinforces the argmin at
 * `chosen_at`. Returns |min J - J_actual|.
 */
inline double update_policy_self(LearnerState& agent, const Transition& tau, const ObservationKey& chosen_at,
                                 const MessageSlot& slot) {
  if (tau.obs.message == 0) return 0.0;
  std::vector<double> cf(static_cast<std::size_t>(slot.symbols));
  for (int m = 0; m < slot.symbols; ++m) cf[static_cast<std::size_t>(m)] = counterfactual_misalignment(agent, tau, m, slot);
  const SymbolLoss s = symbol_loss(cf, misalignment(agent, tau));
  reinforce_symbol(agent.message_policy, chosen_at, s.argmin, s.loss);
  return s.loss;
}

/// Running-average model of the others' mean misalignment, keyed by the
/// agent's message-bearing observation.
class MisalignmentPredictor {
 public:
  struct Cell {
    double mean = 0.0;
    std::uint64_t count = 0;
  };

  void observe(const ObservationKey& key, double j) {
    Cell& c = table_[key];
    ++c.count;
    c.mean += (j - c.mean) / static_cast<double>(c.count);
  }

  /// Prediction at `key`, or `fallback` when the key was never observed.
  double predict(const ObservationKey& key, double fallback) const {
    const auto it = table_.find(key);
    return it == table_.end() ? fallback : it->second.mean;
  }

  const Cell* find(const ObservationKey& key) const {
    const auto it = table_.find(key);
    return it == table_.end() ? nullptr : &it->second;
  }

  void set(const ObservationKey& key, double mean, std::uint64_t count = 1) { table_[key] = {mean, count}; }
  std::size_t size() const { return table_.size(); }

 private:
  std::unordered_map<ObservationKey, Cell, ObservationKeyHash> table_;
};

/**
 * @brief Group-centric symbol learning.
 *
 * Scans the agent's own slot of the message inside `obs` with the predictor
 * as it stood before this step, then folds `observed_group_j` into it.
 * Unseen keys predict the factual value, itself defaulting to the
 * observation. Reinforces the argmin at `chosen_at`; returns
 * |min J_hat - observed_group_j|.
 */
inline double update_policy_group(LearnerState& agent, MisalignmentPredictor& predictor, double observed_group_j,
                                  const ObservationKey& obs, const ObservationKey& chosen_at, const MessageSlot& slot) {
  if (obs.message == 0) return 0.0;
  const double factual = predictor.predict(obs, observed_group_j);
  std::vector<double> pred(static_cast<std::size_t>(slot.symbols));
  for (int m = 0; m < slot.symbols; ++m) {
    const ObservationKey key =
        obs.with_message(substitute_symbol(obs.message, slot.agent, m, slot.n_agents, slot.symbols));
    pred[static_cast<std::size_t>(m)] = predictor.predict(key, factual);
  }
  predictor.observe(obs, observed_group_j);
  const SymbolLoss s = symbol_loss(pred, observed_group_j);
  reinforce_symbol(agent.message_policy, chosen_at, s.argmin, s.loss);
  return s.loss;
}

/// Message vector every agent sees at the next step; empty without an
/// emergent protocol.
inline MessageVector route_messages(std::span<const LearnerState> agents, std::span<const ObservationKey> obs,
                                    const Protocol& protocol, Rng& rng) {
  MessageVector m;
  if (!protocol.emergent()) return m;
  if (obs.size() != agents.size()) throw ModelError("one observation per agent required");
  m.symbols.reserve(agents.size());
  for (std::size_t i = 0; i < agents.size(); ++i) m.symbols.push_back(select_symbol(agents[i], obs[i], rng));
  return m;
}

}  // namespace resil
