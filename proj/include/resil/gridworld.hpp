#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "resil/error.hpp"
#include "resil/game.hpp"

namespace resil {

struct Cell {
  int x = 0;
  int y = 0;
  auto operator<=>(const Cell&) const = default;
};

/// Undirected edge between two 4-adjacent cells, stored with a < b.
struct WallEdge {
  Cell a;
  Cell b;
  auto operator<=>(const WallEdge&) const = default;

  static WallEdge between(Cell p, Cell q) { return p < q ? WallEdge{p, q} : WallEdge{q, p}; }
};

struct PassengerSpec {
  Cell pickup;
  Cell dropoff;
  double payment = 0.0;
};

struct ResourceSpec {
  Cell cell;
  double regrowth = 0.0;
};

enum class GridKind { Taxi, Commons };

/**
 * @brief Layout and reward parameters of a gridworld environment.
 *
 * Reward defaults follow the classic Taxi domain (step -1, illegal move -5,
 * dropoff +20). A passenger payment of 0 means "use dropoff_reward".
 */
struct GridWorldSpec {
  GridKind kind = GridKind::Taxi;
  int width = 0;
  int height = 0;
  std::set<WallEdge> walls;
  std::vector<Cell> agent_starts;
  std::vector<PassengerSpec> passengers;
  std::vector<ResourceSpec> resources;
  double step_penalty = -1.0;
  double pickup_reward = 0.0;
  double dropoff_reward = 20.0;
  double illegal_move_penalty = -5.0;
  double harvest_reward = 1.0;
  /// Chebyshev radius used to count neighbouring resources for regrowth.
  int regrowth_radius = 2;
  double gamma = 0.95;
  int horizon = 100;

  int num_cells() const { return width * height; }
  bool in_bounds(Cell c) const { return c.x >= 0 && c.y >= 0 && c.x < width && c.y < height; }
  int cell_index(Cell c) const { return c.y * width + c.x; }
  Cell cell_at(int index) const { return {index % width, index / width}; }

  double payment(std::size_t passenger) const {
    const double p = passengers.at(passenger).payment;
    return p != 0.0 ? p : dropoff_reward;
  }

  bool blocked(Cell from, Cell to) const { return walls.count(WallEdge::between(from, to)) > 0; }

  void validate() const {
    if (width < 1 || height < 1) throw ConfigError("grid dimensions must be positive");
    if (agent_starts.empty()) throw ConfigError("at least one agent start is required");
    if (static_cast<int>(agent_starts.size()) > num_cells())
      throw ConfigError("more agents than grid cells");
    std::set<Cell> starts;
    for (Cell c : agent_starts) {
      if (!in_bounds(c)) throw ConfigError("agent start outside the grid");
      if (!starts.insert(c).second) throw ConfigError("agent starts must be distinct");
    }
    for (const WallEdge& w : walls) {
      if (!in_bounds(w.a) || !in_bounds(w.b)) throw ConfigError("wall edge outside the grid");
      if (std::abs(w.a.x - w.b.x) + std::abs(w.a.y - w.b.y) != 1)
        throw ConfigError("wall must separate two adjacent cells");
    }
    if (!(dropoff_reward > 0.0)) throw ConfigError("dropoff reward must be positive");
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in (0, 1]");
    if (horizon < 1) throw ConfigError("horizon must be positive");
    if (kind == GridKind::Taxi) {
      for (std::size_t p = 0; p < passengers.size(); ++p) {
        if (!in_bounds(passengers[p].pickup) || !in_bounds(passengers[p].dropoff))
          throw ConfigError("passenger cell outside the grid");
        if (!(payment(p) > 0.0)) throw ConfigError("passenger payment must be positive");
      }
    } else {
      if (resources.empty()) throw ConfigError("commons environment needs at least one resource");
      std::set<Cell> cells;
      for (const ResourceSpec& r : resources) {
        if (!in_bounds(r.cell)) throw ConfigError("resource cell outside the grid");
        if (!cells.insert(r.cell).second) throw ConfigError("resource cells must be distinct");
        if (!(r.regrowth >= 0.0)) throw ConfigError("regrowth must be non-negative");
      }
    }
  }
};

/// Per-state payload: agent cells plus passenger statuses (taxi) or resource
/// presence bits (commons).
struct GridState {
  std::vector<int> cells;
  std::vector<int> items;
  friend bool operator==(const GridState&, const GridState&) = default;
};

/**
 * @brief Bijection between GridState tuples and StateIds.
 *
 * States are enumerated lexicographically over (agent cells, item statuses).
 * Agents never share a cell. Taxi passenger status is 0 = waiting,
 * k+1 = riding in taxi k, n_agents+1 = delivered; each taxi carries at most
 * one passenger. When every passenger is delivered the episode ends, and all
 * such configurations collapse into a single terminal sink appended last.
 */
class GridCodec {
 public:
  explicit GridCodec(const GridWorldSpec& spec) : spec_(spec) {
    spec_.validate();
    n_agents_ = static_cast<int>(spec_.agent_starts.size());
    n_items_ = static_cast<int>(spec_.kind == GridKind::Taxi ? spec_.passengers.size()
                                                             : spec_.resources.size());
    item_radix_ = spec_.kind == GridKind::Taxi ? n_agents_ + 2 : 2;
    std::uint64_t dense = 1;
    for (int i = 0; i < n_agents_; ++i) dense *= static_cast<std::uint64_t>(spec_.num_cells());
    for (int i = 0; i < n_items_; ++i) dense *= static_cast<std::uint64_t>(item_radix_);
    if (dense > 50'000'000ULL) throw ConfigError("state space too large for tabular enumeration");
    index_.assign(dense, -1);

    GridState st;
    st.cells.assign(static_cast<std::size_t>(n_agents_), 0);
    st.items.assign(static_cast<std::size_t>(n_items_), 0);
    enumerate_cells(st, 0);
    if (has_sink()) {
      sink_ = static_cast<std::uint32_t>(states_.size());
      states_.push_back(GridState{});
    }
  }

  const GridWorldSpec& spec() const { return spec_; }
  std::size_t size() const { return states_.size(); }
  int num_agents() const { return n_agents_; }
  int num_items() const { return n_items_; }
  bool has_sink() const { return spec_.kind == GridKind::Taxi && n_items_ > 0; }
  StateId sink() const { return StateId{sink_}; }
  bool is_sink(StateId s) const { return has_sink() && s.value == sink_; }
  int delivered_status() const { return n_agents_ + 1; }

  const GridState& decode(StateId s) const { return states_.at(s.value); }

  StateId encode(const GridState& st) const {
    if (spec_.kind == GridKind::Taxi && n_items_ > 0 &&
        std::all_of(st.items.begin(), st.items.end(), [&](int v) { return v == delivered_status(); }))
      return sink();
    const int id = index_.at(dense_key(st));
    if (id < 0) throw ModelError("grid state is not part of the enumerated state space");
    return StateId{static_cast<std::uint32_t>(id)};
  }

  GridState initial_grid_state() const {
    GridState st;
    for (Cell c : spec_.agent_starts) st.cells.push_back(spec_.cell_index(c));
    st.items.assign(static_cast<std::size_t>(n_items_), spec_.kind == GridKind::Taxi ? 0 : 1);
    return st;
  }

  std::string label(StateId s) const {
    if (is_sink(s)) return "all-delivered";
    const GridState& st = decode(s);
    std::ostringstream os;
    for (int i = 0; i < n_agents_; ++i) {
      const Cell c = spec_.cell_at(st.cells[static_cast<std::size_t>(i)]);
      os << (i ? " " : "") << "a" << i << "@" << c.x << "," << c.y;
    }
    for (int k = 0; k < n_items_; ++k) {
      const int v = st.items[static_cast<std::size_t>(k)];
      if (spec_.kind == GridKind::Taxi) {
        os << " p" << k << ":";
        if (v == 0)
          os << "wait";
        else if (v == delivered_status())
          os << "done";
        else
          os << "taxi" << (v - 1);
      } else {
        os << " r" << k << ":" << v;
      }
    }
    return os.str();
  }

 private:
  std::size_t dense_key(const GridState& st) const {
    std::size_t key = 0;
    for (int c : st.cells) key = key * static_cast<std::size_t>(spec_.num_cells()) + static_cast<std::size_t>(c);
    for (int v : st.items) key = key * static_cast<std::size_t>(item_radix_) + static_cast<std::size_t>(v);
    return key;
  }

  void enumerate_cells(GridState& st, int agent) {
    if (agent == n_agents_) {
      enumerate_items(st, 0);
      return;
    }
    for (int c = 0; c < spec_.num_cells(); ++c) {
      bool taken = false;
      for (int i = 0; i < agent; ++i) taken |= st.cells[static_cast<std::size_t>(i)] == c;
      if (taken) continue;
      st.cells[static_cast<std::size_t>(agent)] = c;
      enumerate_cells(st, agent + 1);
    }
  }

  void enumerate_items(GridState& st, int item) {
    if (item == n_items_) {
      if (!admissible(st)) return;
      index_[dense_key(st)] = static_cast<int>(states_.size());
      states_.push_back(st);
      return;
    }
    for (int v = 0; v < item_radix_; ++v) {
      st.items[static_cast<std::size_t>(item)] = v;
      enumerate_items(st, item + 1);
    }
  }

  bool admissible(const GridState& st) const {
    if (spec_.kind != GridKind::Taxi || n_items_ == 0) return true;
    bool all_delivered = true;
    std::vector<int> load(static_cast<std::size_t>(n_agents_), 0);
    for (int v : st.items) {
      all_delivered &= v == delivered_status();
      if (v >= 1 && v <= n_agents_ && ++load[static_cast<std::size_t>(v - 1)] > 1) return false;
    }
    return !all_delivered;
  }

  GridWorldSpec spec_;
  int n_agents_ = 0;
  int n_items_ = 0;
  int item_radix_ = 2;
  std::vector<GridState> states_;
  std::vector<int> index_;
  std::uint32_t sink_ = 0;
};

namespace taxi_action {
inline constexpr int kNorth = 0;
inline constexpr int kSouth = 1;
inline constexpr int kEast = 2;
inline constexpr int kWest = 3;
inline constexpr int kPickup = 4;
inline constexpr int kDropoff = 5;
inline constexpr int kCount = 6;
}  // namespace taxi_action

namespace commons_action {
inline constexpr int kStay = 4;
inline constexpr int kCount = 5;
}  // namespace commons_action

namespace detail {

inline Cell offset(Cell c, int move) {
  switch (move) {
    case 0: return {c.x, c.y - 1};
    case 1: return {c.x, c.y + 1};
    case 2: return {c.x + 1, c.y};
    case 3: return {c.x - 1, c.y};
    default: return c;
  }
}

/// Moves agent `i` in place. Returns false for a wall or boundary bump.
inline bool try_move(const GridWorldSpec& spec, std::vector<int>& cells, std::size_t i, int move) {
  const Cell from = spec.cell_at(cells[i]);
  const Cell to = offset(from, move);
  if (!spec.in_bounds(to) || spec.blocked(from, to)) return false;
  const int target = spec.cell_index(to);
  for (std::size_t k = 0; k < cells.size(); ++k)
    if (k != i && cells[k] == target) return true;  // occupied: stay, not illegal
  cells[i] = target;
  return true;
}

}  // namespace detail

/// Local view of a taxi: own cell plus each passenger's status relative to the
/// viewer (0 waiting, 1 in own taxi, 2 in another taxi, 3 delivered).
inline std::uint64_t taxi_observation(const GridCodec& codec, StateId s, int agent) {
  const GridWorldSpec& spec = codec.spec();
  const auto cells = static_cast<std::uint64_t>(spec.num_cells());
  std::uint64_t status_code = 0;
  if (codec.is_sink(s)) {
    for (int k = 0; k < codec.num_items(); ++k) status_code = status_code * 4 + 3;
    return cells * status_code;
  }
  const GridState& st = codec.decode(s);
  for (int v : st.items) {
    std::uint64_t rel = 0;
    if (v == codec.delivered_status())
      rel = 3;
    else if (v == agent + 1)
      rel = 1;
    else if (v != 0)
      rel = 2;
    status_code = status_code * 4 + rel;
  }
  return static_cast<std::uint64_t>(st.cells[static_cast<std::size_t>(agent)]) + cells * status_code;
}

/// Local view of a forager: own cell plus presence bits of every resource.
inline std::uint64_t commons_observation(const GridCodec& codec, StateId s, int agent) {
  const GridState& st = codec.decode(s);
  std::uint64_t bits = 0;
  for (int v : st.items) bits = bits * 2 + static_cast<std::uint64_t>(v);
  return static_cast<std::uint64_t>(st.cells[static_cast<std::size_t>(agent)]) +
         static_cast<std::uint64_t>(codec.spec().num_cells()) * bits;
}

/**
 * @brief Enumerated multi-agent Taxi game.
 *
 * Agents act in index order within a joint action. A move into a wall or the
 * grid boundary leaves the taxi in place and costs illegal_move_penalty; a move
 * into a cell occupied by another taxi leaves it in place at the normal step
 * cost. Pickup and dropoff are illegal unless they succeed. A successful
 * dropoff pays the passenger's payment to the acting taxi in place of the step
 * cost.
 */
inline TabularMarkovGame build_taxi(const GridWorldSpec& spec) {
  if (spec.kind != GridKind::Taxi) throw ConfigError("build_taxi requires a taxi spec");
  const GridCodec codec(spec);
  const int n = codec.num_agents();
  std::vector<std::string> labels;
  labels.reserve(codec.size());
  for (std::uint32_t s = 0; s < codec.size(); ++s) labels.push_back(codec.label(StateId{s}));
  TabularMarkovGame game(std::vector<int>(static_cast<std::size_t>(n), taxi_action::kCount),
                         std::move(labels), spec.gamma);
  std::uint64_t card = static_cast<std::uint64_t>(spec.num_cells());
  for (int k = 0; k < codec.num_items(); ++k) card *= 4;
  game.set_observation_cardinality(card);

  std::vector<double> rewards(static_cast<std::size_t>(n));
  for (std::uint32_t s = 0; s < codec.size(); ++s) {
    const StateId sid{s};
    for (int i = 0; i < n; ++i) game.set_observation(sid, i, taxi_observation(codec, sid, i));
    if (codec.is_sink(sid)) {
      game.set_terminal(sid, true);
      const Successor self{s, 1.0};
      for (JointIndex j = 0; j < game.num_joint_actions(); ++j) game.set_row(sid, j, {&self, 1});
      continue;
    }
    const GridState& base = codec.decode(sid);
    for (JointIndex j = 0; j < game.num_joint_actions(); ++j) {
      const JointAction a = game.joint_action(j);
      GridState st = base;
      for (std::size_t i = 0; i < static_cast<std::size_t>(n); ++i) {
        const int act = a[i];
        double r = spec.step_penalty;
        if (act < taxi_action::kPickup) {
          if (!detail::try_move(spec, st.cells, i, act)) r = spec.illegal_move_penalty;
        } else if (act == taxi_action::kPickup) {
          bool carrying = false;
          for (int v : st.items) carrying |= v == static_cast<int>(i) + 1;
          r = spec.illegal_move_penalty;
          if (!carrying) {
            for (std::size_t p = 0; p < st.items.size(); ++p)
              if (st.items[p] == 0 && spec.cell_index(spec.passengers[p].pickup) == st.cells[i]) {
                st.items[p] = static_cast<int>(i) + 1;
                r = spec.step_penalty + spec.pickup_reward;
                break;
              }
          }
        } else {
          r = spec.illegal_move_penalty;
          for (std::size_t p = 0; p < st.items.size(); ++p)
            if (st.items[p] == static_cast<int>(i) + 1 &&
                spec.cell_index(spec.passengers[p].dropoff) == st.cells[i]) {
              st.items[p] = codec.delivered_status();
              r = spec.payment(p);
              break;
            }
        }
        rewards[i] = r;
      }
      const Successor next{codec.encode(st).value, 1.0};
      game.set_row(sid, j, {&next, 1});
      game.set_rewards(sid, j, rewards);
    }
  }
  game.set_initial_state(codec.encode(codec.initial_grid_state()));
  game.validate();
  return game;
}

/**
 * @brief Harvest-style commons game.
 *
 * Agents move (or stay) in index order, then every agent standing on a present
 * resource harvests it. Each absent resource then regrows independently with
 * probability min(1, regrowth * (1 + present neighbours within
 * regrowth_radius)), so a depleted neighbourhood recovers slowly.
 */
inline TabularMarkovGame build_commons(const GridWorldSpec& spec) {
  if (spec.kind != GridKind::Commons) throw ConfigError("build_commons requires a commons spec");
  const GridCodec codec(spec);
  const int n = codec.num_agents();
  const int m = codec.num_items();
  std::vector<std::string> labels;
  labels.reserve(codec.size());
  for (std::uint32_t s = 0; s < codec.size(); ++s) labels.push_back(codec.label(StateId{s}));
  TabularMarkovGame game(std::vector<int>(static_cast<std::size_t>(n), commons_action::kCount),
                         std::move(labels), spec.gamma);
  game.set_observation_cardinality(static_cast<std::uint64_t>(spec.num_cells()) << m);

  std::vector<double> rewards(static_cast<std::size_t>(n));
  std::vector<Successor> row;
  std::map<std::uint32_t, double> outcomes;
  for (std::uint32_t s = 0; s < codec.size(); ++s) {
    const StateId sid{s};
    for (int i = 0; i < n; ++i) game.set_observation(sid, i, commons_observation(codec, sid, i));
    const GridState& base = codec.decode(sid);
    for (JointIndex j = 0; j < game.num_joint_actions(); ++j) {
      const JointAction a = game.joint_action(j);
      GridState st = base;
      for (std::size_t i = 0; i < static_cast<std::size_t>(n); ++i) {
        rewards[i] = spec.step_penalty;
        if (a[i] != commons_action::kStay && !detail::try_move(spec, st.cells, i, a[i]))
          rewards[i] = spec.illegal_move_penalty;
      }
      for (std::size_t i = 0; i < static_cast<std::size_t>(n); ++i)
        for (std::size_t k = 0; k < static_cast<std::size_t>(m); ++k)
          if (st.items[k] == 1 && spec.cell_index(spec.resources[k].cell) == st.cells[i]) {
            st.items[k] = 0;
            rewards[i] += spec.harvest_reward;
          }

      std::vector<double> p_regrow(static_cast<std::size_t>(m), 0.0);
      std::vector<std::size_t> absent;
      for (std::size_t k = 0; k < static_cast<std::size_t>(m); ++k) {
        if (st.items[k] == 1) continue;
        int nearby = 0;
        for (std::size_t o = 0; o < static_cast<std::size_t>(m); ++o) {
          if (o == k || st.items[o] != 1) continue;
          const Cell a0 = spec.resources[k].cell;
          const Cell b0 = spec.resources[o].cell;
          if (std::max(std::abs(a0.x - b0.x), std::abs(a0.y - b0.y)) <= spec.regrowth_radius) ++nearby;
        }
        p_regrow[k] = std::min(1.0, spec.resources[k].regrowth * (1.0 + nearby));
        absent.push_back(k);
      }
      outcomes.clear();
      for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << absent.size()); ++mask) {
        double p = 1.0;
        GridState next = st;
        for (std::size_t b = 0; b < absent.size(); ++b) {
          const bool grows = (mask >> b) & 1U;
          p *= grows ? p_regrow[absent[b]] : 1.0 - p_regrow[absent[b]];
          if (grows) next.items[absent[b]] = 1;
        }
        if (p > 0.0) outcomes[codec.encode(next).value] += p;
      }
      row.clear();
      for (const auto& [state, p] : outcomes) row.push_back({state, p});
      game.set_row(sid, j, row);
      game.set_rewards(sid, j, rewards);
    }
  }
  game.set_initial_state(codec.encode(codec.initial_grid_state()));
  game.validate();
  return game;
}

inline TabularMarkovGame build_game(const GridWorldSpec& spec) {
  return spec.kind == GridKind::Taxi ? build_taxi(spec) : build_commons(spec);
}

/// A gridworld spec together with its enumeration and the built game.
struct GridEnvironment {
  GridWorldSpec spec;
  GridCodec codec;
  TabularMarkovGame game;

  explicit GridEnvironment(const GridWorldSpec& s) : spec(s), codec(s), game(build_game(s)) {}
};

/**
 * @brief Parses the line-oriented environment format.
 *
 *     schema-version 1
 *     env taxi                  # or commons
 *     map                       # rows of . A P D o, terminated by `end`
 *     A...
 *     ..P.
 *     A..D
 *     end
 *     wall 1 0 1 1              # edge between cells (1,0) and (1,1)
 *     passenger 0 0 -> 3 2 pay 30
 *     resource 2 2 regrowth 0.1
 *     reward step|illegal|pickup|dropoff|harvest <value>
 *     regrowth <default for map `o` cells>
 *     regrowth-radius 2
 *     gamma 0.95
 *     horizon 100
 *
 * Agents are numbered in map reading order. A single `P` and `D` in the map
 * define one passenger with the default payment.
 */
inline GridWorldSpec parse_grid_spec(std::istream& in) {
  GridWorldSpec spec;
  std::vector<std::string> map_rows;
  std::vector<PassengerSpec> extra_passengers;
  std::vector<ResourceSpec> extra_resources;
  double default_regrowth = 0.1;
  bool kind_set = false;
  bool have_commons_defaults = false;
  std::map<std::string, double> reward_overrides;
  std::string line;
  int line_no = 0;
  bool in_map = false;

  auto fail = [&](const std::string& msg) {
    throw ConfigError("environment spec line " + std::to_string(line_no) + ": " + msg);
  };
  auto read_cell = [&](std::istringstream& is) {
    Cell c;
    if (!(is >> c.x >> c.y)) fail("expected two integer coordinates");
    return c;
  };

  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos && !in_map) line.erase(hash);
    std::istringstream is(line);
    std::string key;
    if (in_map) {
      std::string row;
      is >> row;
      if (row.empty()) continue;
      if (row == "end") {
        in_map = false;
        continue;
      }
      map_rows.push_back(row);
      continue;
    }
    if (!(is >> key)) continue;
    if (key == "schema-version") {
      int v = 0;
      if (!(is >> v) || v != 1) fail("unsupported schema-version");
    } else if (key == "env") {
      std::string kind;
      is >> kind;
      if (kind == "taxi")
        spec.kind = GridKind::Taxi;
      else if (kind == "commons") {
        spec.kind = GridKind::Commons;
        have_commons_defaults = true;
      } else
        fail("unknown env kind '" + kind + "'");
      kind_set = true;
    } else if (key == "map") {
      in_map = true;
    } else if (key == "size") {
      if (!(is >> spec.width >> spec.height)) fail("expected width and height");
    } else if (key == "wall") {
      const Cell a = read_cell(is);
      const Cell b = read_cell(is);
      spec.walls.insert(WallEdge::between(a, b));
    } else if (key == "agent") {
      spec.agent_starts.push_back(read_cell(is));
    } else if (key == "passenger") {
      PassengerSpec p;
      p.pickup = read_cell(is);
      std::string arrow;
      if (!(is >> arrow) || (arrow != "->" && arrow != "→")) fail("expected '->' in passenger line");
      p.dropoff = read_cell(is);
      std::string word;
      if (is >> word) {
        if (word != "pay" || !(is >> p.payment)) fail("expected 'pay <value>'");
      }
      extra_passengers.push_back(p);
    } else if (key == "resource") {
      ResourceSpec r;
      r.cell = read_cell(is);
      r.regrowth = -1.0;
      std::string word;
      if (is >> word) {
        if (word != "regrowth" || !(is >> r.regrowth)) fail("expected 'regrowth <value>'");
      }
      extra_resources.push_back(r);
    } else if (key == "reward") {
      std::string which;
      double v = 0;
      if (!(is >> which >> v)) fail("expected 'reward <kind> <value>'");
      if (which != "step" && which != "illegal" && which != "pickup" && which != "dropoff" &&
          which != "harvest")
        fail("unknown reward kind '" + which + "'");
      reward_overrides[which] = v;
    } else if (key == "regrowth") {
      if (!(is >> default_regrowth)) fail("expected a regrowth value");
    } else if (key == "regrowth-radius") {
      if (!(is >> spec.regrowth_radius)) fail("expected an integer radius");
    } else if (key == "gamma") {
      if (!(is >> spec.gamma)) fail("expected a gamma value");
    } else if (key == "horizon") {
      if (!(is >> spec.horizon)) fail("expected a horizon value");
    } else {
      fail("unknown directive '" + key + "'");
    }
  }
  if (in_map) throw ConfigError("environment spec: map block not terminated by 'end'");
  if (!kind_set) throw ConfigError("environment spec: missing 'env' directive");

  if (have_commons_defaults) {
    spec.step_penalty = 0.0;
    spec.illegal_move_penalty = 0.0;
  }
  if (auto it = reward_overrides.find("step"); it != reward_overrides.end()) spec.step_penalty = it->second;
  if (auto it = reward_overrides.find("illegal"); it != reward_overrides.end())
    spec.illegal_move_penalty = it->second;
  if (auto it = reward_overrides.find("pickup"); it != reward_overrides.end()) spec.pickup_reward = it->second;
  if (auto it = reward_overrides.find("dropoff"); it != reward_overrides.end())
    spec.dropoff_reward = it->second;
  if (auto it = reward_overrides.find("harvest"); it != reward_overrides.end())
    spec.harvest_reward = it->second;

  if (!map_rows.empty()) {
    spec.height = static_cast<int>(map_rows.size());
    spec.width = static_cast<int>(map_rows.front().size());
    std::vector<Cell> pickups, dropoffs;
    std::vector<Cell> starts;
    for (int y = 0; y < spec.height; ++y) {
      const std::string& row = map_rows[static_cast<std::size_t>(y)];
      if (static_cast<int>(row.size()) != spec.width)
        throw ConfigError("environment spec: map rows must have equal width");
      for (int x = 0; x < spec.width; ++x) {
        switch (row[static_cast<std::size_t>(x)]) {
          case '.': break;
          case 'A': starts.push_back({x, y}); break;
          case 'P': pickups.push_back({x, y}); break;
          case 'D': dropoffs.push_back({x, y}); break;
          case 'o': spec.resources.push_back({{x, y}, default_regrowth}); break;
          default: throw ConfigError(std::string("environment spec: unknown map symbol '") + row[x] + "'");
        }
      }
    }
    spec.agent_starts.insert(spec.agent_starts.begin(), starts.begin(), starts.end());
    if (pickups.size() != dropoffs.size() || pickups.size() > 1)
      throw ConfigError("environment spec: map may hold at most one P/D pair; use passenger lines");
    if (!pickups.empty()) spec.passengers.push_back({pickups[0], dropoffs[0], 0.0});
  }
  spec.passengers.insert(spec.passengers.end(), extra_passengers.begin(), extra_passengers.end());
  for (ResourceSpec r : extra_resources) {
    if (r.regrowth < 0.0) r.regrowth = default_regrowth;
    spec.resources.push_back(r);
  }
  spec.validate();
  return spec;
}

inline GridWorldSpec parse_grid_spec_string(const std::string& text) {
  std::istringstream is(text);
  return parse_grid_spec(is);
}

inline GridWorldSpec load_grid_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open environment spec '" + path + "'");
  return parse_grid_spec(in);
}

}  // namespace resil
