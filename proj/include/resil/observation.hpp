#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "resil/game.hpp"

namespace resil {

/// Concatenated per-agent message symbols received at one time step.
/// An empty vector means "no message" (no emergent protocol, or first step).
struct MessageVector {
  std::vector<int> symbols;

  bool empty() const { return symbols.empty(); }
  friend bool operator==(const MessageVector&, const MessageVector&) = default;
};

/// Hashable token for one agent's view: the game's local feature code plus
/// the message component (0 when no message was received).
struct ObservationKey {
  std::uint64_t local = 0;
  std::uint64_t message = 0;

  constexpr auto operator<=>(const ObservationKey&) const = default;

  ObservationKey with_message(std::uint64_t message_code) const { return {local, message_code}; }
};

struct ObservationKeyHash {
  std::size_t operator()(const ObservationKey& k) const noexcept {
    return static_cast<std::size_t>(splitmix64(k.local * 0x9e3779b97f4a7c15ULL ^ splitmix64(k.message)));
  }
};

/// Injective code for a message vector; 0 is reserved for the empty vector.
inline std::uint64_t encode_message(const MessageVector& m, int symbol_count) {
  if (m.empty()) return 0;
  std::uint64_t code = 0;
  for (int s : m.symbols) {
    if (s < 0 || s >= symbol_count) throw ModelError("message symbol out of range");
    code = code * static_cast<std::uint64_t>(symbol_count) + static_cast<std::uint64_t>(s);
  }
  return code + 1;
}

inline MessageVector decode_message(std::uint64_t code, int n_agents, int symbol_count) {
  MessageVector m;
  if (code == 0) return m;
  code -= 1;
  m.symbols.assign(static_cast<std::size_t>(n_agents), 0);
  for (std::size_t i = m.symbols.size(); i-- > 0;) {
    m.symbols[i] = static_cast<int>(code % static_cast<std::uint64_t>(symbol_count));
    code /= static_cast<std::uint64_t>(symbol_count);
  }
  return m;
}

/// Code of the vector behind `code` with slot `agent` replaced by `symbol`.
/// The empty code stays empty: there is no slot to substitute.
inline std::uint64_t substitute_symbol(std::uint64_t code, int agent, int symbol, int n_agents, int symbol_count) {
  if (code == 0) return 0;
  MessageVector m = decode_message(code, n_agents, symbol_count);
  m.symbols.at(static_cast<std::size_t>(agent)) = symbol;
  return encode_message(m, symbol_count);
}

/// Observation of `agent` in state `s` with the message vector it received.
inline ObservationKey observe(const TabularMarkovGame& game, StateId s, int agent,
                              const MessageVector& incoming, int symbol_count = 2) {
  return {game.observation(s, agent), encode_message(incoming, symbol_count)};
}

}  // namespace resil
