#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "resil/error.hpp"
#include "resil/game.hpp"
#include "resil/perturbation.hpp"

namespace resil {

using Json = nlohmann::json;

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::uint64_t parse_hex64(const std::string& s) {
  std::size_t used = 0;
  const unsigned long long v = std::stoull(s, &used, 16);
  if (used != s.size()) throw ConfigError("malformed hex digest '" + s + "'");
  return v;
}

/// Canonical text form: sorted keys, no whitespace, shortest round-trip doubles.
inline std::string canonical(const Json& j) { return j.dump(); }

/**
 * @brief Canonical JSON model of a game.
 *
 * Transitions are sparse quadruplets [state, joint, next, prob]; rewards list
 * only (state, joint) entries with a non-zero component.
 */
inline Json game_to_json(const TabularMarkovGame& g) {
  Json j;
  j["format"] = "resil-game";
  j["schema-version"] = 1;
  j["actions"] = g.action_counts();
  j["gamma"] = g.gamma();
  j["initial"] = g.initial_state().value;
  j["states"] = g.labels();
  j["observation-cardinality"] = g.observation_cardinality();
  Json terminal = Json::array(), obs = Json::array(), trans = Json::array(), rew = Json::array();
  for (std::uint32_t s = 0; s < g.num_states(); ++s) {
    const StateId sid{s};
    if (g.is_terminal(sid)) terminal.push_back(s);
    Json o = Json::array();
    for (int i = 0; i < g.num_agents(); ++i) o.push_back(g.observation(sid, i));
    obs.push_back(std::move(o));
    for (JointIndex a = 0; a < g.num_joint_actions(); ++a) {
      for (const Successor& e : g.row(sid, a)) trans.push_back({s, a, e.state, e.prob});
      const auto r = g.rewards(sid, a);
      bool any = false;
      for (double v : r) any |= v != 0.0;
      if (any) rew.push_back({s, a, std::vector<double>(r.begin(), r.end())});
    }
  }
  j["terminal"] = std::move(terminal);
  j["observations"] = std::move(obs);
  j["transitions"] = std::move(trans);
  j["rewards"] = std::move(rew);
  return j;
}

inline TabularMarkovGame game_from_json(const Json& j) {
  try {
    if (j.at("format") != "resil-game") throw ConfigError("not a resil game model");
    if (j.at("schema-version") != 1) throw ConfigError("unsupported game schema-version");
    TabularMarkovGame g(j.at("actions").get<std::vector<int>>(), j.at("states").get<std::vector<std::string>>(),
                        j.at("gamma").get<double>());
    const std::size_t n = g.num_states();
    const std::size_t nj = g.num_joint_actions();
    std::vector<std::vector<Successor>> rows(n * nj);
    for (const Json& t : j.at("transitions")) {
      const auto s = t.at(0).get<std::uint32_t>();
      const auto a = t.at(1).get<std::uint32_t>();
      if (s >= n || a >= nj) throw ModelError("transition entry out of range");
      rows[static_cast<std::size_t>(s) * nj + a].push_back({t.at(2).get<std::uint32_t>(), t.at(3).get<double>()});
    }
    for (std::uint32_t s = 0; s < n; ++s)
      for (JointIndex a = 0; a < nj; ++a) {
        const auto& row = rows[static_cast<std::size_t>(s) * nj + a];
        if (!row.empty()) g.set_row(StateId{s}, a, row);
      }
    for (const Json& r : j.at("rewards")) {
      const auto v = r.at(2).get<std::vector<double>>();
      g.set_rewards(StateId{r.at(0).get<std::uint32_t>()}, r.at(1).get<std::uint32_t>(), v);
    }
    for (const Json& t : j.at("terminal")) g.set_terminal(StateId{t.get<std::uint32_t>()}, true);
    const Json& obs = j.at("observations");
    if (obs.size() != n) throw ModelError("observation table has wrong length");
    for (std::uint32_t s = 0; s < n; ++s)
      for (int i = 0; i < g.num_agents(); ++i)
        g.set_observation(StateId{s}, i, obs[s].at(static_cast<std::size_t>(i)).get<std::uint64_t>());
    g.set_observation_cardinality(j.at("observation-cardinality").get<std::uint64_t>());
    g.set_initial_state(StateId{j.at("initial").get<std::uint32_t>()});
    g.validate();
    return g;
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("malformed game model: ") + e.what());
  }
}

inline Json perturbation_to_json(const AtomicPerturbation& p) {
  Json j;
  j["kind"] = to_string(p.kind);
  switch (p.kind) {
    case PerturbationKind::TransitionEdit: {
      j["state"] = p.state.value;
      j["joint"] = p.joint;
      Json row = Json::array();
      for (const Successor& e : p.row) row.push_back({e.state, e.prob});
      j["row"] = std::move(row);
      break;
    }
    case PerturbationKind::RewardEdit:
      j["state"] = p.state.value;
      j["joint"] = p.joint;
      j["agent"] = p.agent;
      j["value"] = p.reward;
      break;
    case PerturbationKind::InitialStateEdit:
      j["state"] = p.initial.value;
      break;
  }
  return j;
}

inline AtomicPerturbation perturbation_from_json(const Json& j) {
  const std::string kind = j.at("kind");
  const StateId s{j.at("state").get<std::uint32_t>()};
  if (kind == "transition") {
    std::vector<Successor> row;
    for (const Json& e : j.at("row")) row.push_back({e.at(0).get<std::uint32_t>(), e.at(1).get<double>()});
    return AtomicPerturbation::transition(s, j.at("joint").get<JointIndex>(), std::move(row));
  }
  if (kind == "reward")
    return AtomicPerturbation::reward_edit(s, j.at("joint").get<JointIndex>(), j.at("agent").get<int>(),
                                           j.at("value").get<double>());
  if (kind == "initial-state") return AtomicPerturbation::initial_state(s);
  throw ConfigError("unknown perturbation kind '" + kind + "'");
}

inline Json trace_to_json(const PerturbationTrace& t) {
  Json j;
  j["format"] = "resil-trace";
  j["origin-hash"] = hex64(t.origin_hash);
  j["seed"] = t.seed;
  j["bound"] = t.bound;
  j["magnitude"] = t.magnitude;
  j["shortfall"] = t.shortfall;
  j["candidates"] = t.candidates;
  Json steps = Json::array();
  for (const TraceStep& s : t.steps) {
    Json edits = Json::array();
    for (const AtomicPerturbation& p : s.edits) edits.push_back(perturbation_to_json(p));
    steps.push_back({{"generator", s.generator}, {"magnitude", s.magnitude}, {"edits", std::move(edits)}});
  }
  j["steps"] = std::move(steps);
  return j;
}

inline PerturbationTrace trace_from_json(const Json& j) {
  try {
    if (j.at("format") != "resil-trace") throw ConfigError("not a perturbation trace");
    PerturbationTrace t;
    t.origin_hash = parse_hex64(j.at("origin-hash"));
    t.seed = j.at("seed");
    t.bound = j.at("bound");
    t.magnitude = j.at("magnitude");
    t.shortfall = j.at("shortfall");
    t.candidates = j.at("candidates");
    for (const Json& s : j.at("steps")) {
      TraceStep step;
      step.generator = s.at("generator");
      step.magnitude = s.at("magnitude");
      for (const Json& e : s.at("edits")) step.edits.push_back(perturbation_from_json(e));
      t.steps.push_back(std::move(step));
    }
    return t;
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("malformed trace: ") + e.what());
  }
}

inline Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError("'" + path + "' is not valid JSON: " + e.what());
  }
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << text;
}

}  // namespace resil
