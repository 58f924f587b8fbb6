#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "resil/agents.hpp"
#include "resil/bisimulation.hpp"
#include "resil/comms.hpp"
#include "resil/error.hpp"
#include "resil/gridworld.hpp"
#include "resil/io.hpp"
#include "resil/perturbation.hpp"
#include "resil/resilience.hpp"

namespace resil {

inline constexpr const char* kVersionStamp = "resil 0.1.0";
inline constexpr int kConfigSchemaVersion = 1;

inline std::uint64_t fnv1a64(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// The world a replication lives in: always a game, plus the grid model when
/// it came from an environment spec (enables the grid-only generators).
struct Environment {
  std::string name;
  std::optional<GridEnvironment> grid;
  TabularMarkovGame game;
  int horizon = 100;

  static Environment from_grid(const GridWorldSpec& spec, std::string name) {
    Environment e{std::move(name), GridEnvironment(spec), {}, spec.horizon};
    e.game = e.grid->game;
    return e;
  }

  /// `.json` paths load a game model, anything else a grid spec.
  static Environment load(const std::string& path, std::optional<int> horizon = std::nullopt) {
    const std::string stem = std::filesystem::path(path).stem().string();
    Environment e;
    if (std::filesystem::path(path).extension() == ".json") {
      e = Environment{stem, std::nullopt, game_from_json(read_json_file(path)), 100};
    } else {
      e = from_grid(load_grid_spec(path), stem);
    }
    if (horizon) e.horizon = *horizon;
    if (e.horizon < 1) throw ConfigError("episode horizon must be >= 1");
    return e;
  }
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::string environment;
  std::optional<int> horizon;
  std::vector<Protocol> protocols;
  std::vector<double> K;
  std::uint64_t t_pert = 20000;
  std::uint64_t t_post = 20000;
  std::size_t window = 500;
  std::vector<std::uint64_t> seeds;
  AgentConfig agent;
  double eta_m = 0.1;
  int updates_per_step = 1;
  bool reset_epsilon = false;
  MetricOptions metric;
  PerturbationFamily family;
  std::string output = "out";
  int parallelism = 1;

  void validate() const {
    if (environment.empty()) throw ConfigError("config needs an environment");
    if (protocols.empty()) throw ConfigError("protocol list must not be empty");
    if (K.empty()) throw ConfigError("K list must not be empty");
    if (seeds.empty()) throw ConfigError("seed list must not be empty");
    for (const Protocol& p : protocols) p.validate();
    for (double k : K)
      if (!(k >= 0.0) || !std::isfinite(k)) throw ConfigError("K values must be finite and >= 0");
    if (window < 1) throw ConfigError("window must be >= 1");
    if (t_pert < window) throw ConfigError("t_pert must be >= window");
    if (t_post < window) throw ConfigError("t_post must be >= window");
    if (updates_per_step < 0) throw ConfigError("updates_per_step must be >= 0");
    if (!(eta_m > 0.0)) throw ConfigError("message learning rate must be positive");
    if (!(metric.c >= 0.0 && metric.c < 1.0)) throw ConfigError("metric c must lie in [0, 1)");
    if (parallelism < 1) throw ConfigError("parallelism must be >= 1");
    agent.validate();
  }
};

inline Json protocol_to_json(const Protocol& p) {
  Json j{{"kind", to_string(p.kind)}};
  if (p.kind == ProtocolKind::MandatoryBroadcast) j["m_l"] = p.m_l;
  if (p.emergent()) j["symbols"] = p.symbols;
  return j;
}

inline Protocol protocol_from_json(const Json& j) {
  Protocol p;
  if (j.is_string()) {
    p.kind = parse_protocol_kind(j.get<std::string>());
    return p;
  }
  p.kind = parse_protocol_kind(j.at("kind").get<std::string>());
  p.m_l = j.value("m_l", 1);
  p.symbols = j.value("symbols", 2);
  return p;
}

/// Equal as far as the protocol kind uses its parameters.
inline bool same_protocol(const Protocol& a, const Protocol& b) {
  return a.kind == b.kind && (a.kind != ProtocolKind::MandatoryBroadcast || a.m_l == b.m_l) &&
         (!a.emergent() || a.symbols == b.symbols);
}

/// Short label used in file names and report rows.
inline std::string protocol_label(const Protocol& p) {
  std::string s = to_string(p.kind);
  if (p.kind == ProtocolKind::MandatoryBroadcast && p.m_l != 1) s += "-m" + std::to_string(p.m_l);
  if (p.emergent() && p.symbols != 2) s += "-s" + std::to_string(p.symbols);
  return s;
}

/// Canonical JSON with every default filled in; its hash identifies the config.
inline Json config_to_json(const ExperimentConfig& c) {
  Json j;
  j["schema-version"] = kConfigSchemaVersion;
  j["name"] = c.name;
  j["environment"] = c.environment;
  if (c.horizon) j["horizon"] = *c.horizon;
  Json protos = Json::array();
  for (const Protocol& p : c.protocols) protos.push_back(protocol_to_json(p));
  j["protocols"] = protos;
  j["K"] = c.K;
  j["t_pert"] = c.t_pert;
  j["t_post"] = c.t_post;
  j["window"] = c.window;
  j["seeds"] = c.seeds;
  j["agent"] = {{"eta", c.agent.eta},
                {"epsilon", {{"start", c.agent.epsilon.start},
                             {"end", c.agent.epsilon.end},
                             {"decay_episodes", c.agent.epsilon.decay_episodes}}},
                {"discounted_estimate", c.agent.discounted_estimate},
                {"buffer_capacity", c.agent.buffer_capacity},
                {"batch_size", c.agent.batch_size},
                {"alpha", c.agent.alpha},
                {"eps_norm", c.agent.eps_norm},
                {"j_max", c.agent.j_max},
                {"eta_m", c.eta_m},
                {"updates_per_step", c.updates_per_step},
                {"reset_epsilon", c.reset_epsilon}};
  j["metric"] = {{"c", c.metric.c}, {"tol", c.metric.tol}, {"max_iter", c.metric.max_iter}};
  j["perturbation"] = {{"reward", c.family.w_reward},       {"transition", c.family.w_transition},
                       {"wall", c.family.w_wall},           {"relocate", c.family.w_relocate},
                       {"start", c.family.w_start},         {"reward_scale", c.family.reward_scale},
                       {"max_retries", c.family.max_retries}, {"max_steps", c.family.max_steps},
                       {"shortfall_fraction", c.family.shortfall_fraction}};
  return j;
}

/**
 * @brief Parses an experiment config. Relative environment and output paths
 * resolve against `base_dir`. Unknown keys are rejected so typos surface.
 */
inline ExperimentConfig config_from_json(const Json& j, const std::string& base_dir = "") {
  auto check_keys = [](const Json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!obj.is_object()) throw ConfigError(where + " must be an object");
    for (const auto& item : obj.items()) {
      bool ok = false;
      for (const char* a : allowed) ok |= item.key() == a;
      if (!ok) throw ConfigError("unknown key '" + item.key() + "' in " + where);
    }
  };
  try {
    check_keys(j,
               {"schema-version", "name", "environment", "horizon", "protocols", "K", "t_pert", "t_post", "window",
                "seeds", "agent", "metric", "perturbation", "output", "parallelism"},
               "config");
    if (!j.contains("schema-version")) throw ConfigError("config lacks schema-version");
    if (j.at("schema-version") != kConfigSchemaVersion)
      throw ConfigError("unsupported config schema-version " + j.at("schema-version").dump());
    ExperimentConfig c;
    c.name = j.value("name", c.name);
    auto resolve = [&](const std::string& p) {
      if (p.empty() || base_dir.empty() || std::filesystem::path(p).is_absolute()) return p;
      return (std::filesystem::path(base_dir) / p).lexically_normal().string();
    };
    c.environment = resolve(j.at("environment").get<std::string>());
    if (j.contains("horizon")) c.horizon = j.at("horizon").get<int>();
    for (const Json& p : j.at("protocols")) c.protocols.push_back(protocol_from_json(p));
    c.K = j.at("K").get<std::vector<double>>();
    c.t_pert = j.value("t_pert", c.t_pert);
    c.t_post = j.value("t_post", c.t_post);
    c.window = j.value("window", c.window);
    c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    c.output = resolve(j.value("output", c.output));
    c.parallelism = j.value("parallelism", c.parallelism);
    if (j.contains("agent")) {
      const Json& a = j.at("agent");
      check_keys(a,
                 {"eta", "epsilon", "discounted_estimate", "buffer_capacity", "batch_size", "alpha", "eps_norm",
                  "j_max", "eta_m", "updates_per_step", "reset_epsilon"},
                 "agent");
      c.agent.eta = a.value("eta", c.agent.eta);
      if (a.contains("epsilon")) {
        const Json& e = a.at("epsilon");
        check_keys(e, {"start", "end", "decay_episodes"}, "agent.epsilon");
        c.agent.epsilon.start = e.value("start", c.agent.epsilon.start);
        c.agent.epsilon.end = e.value("end", c.agent.epsilon.end);
        c.agent.epsilon.decay_episodes = e.value("decay_episodes", c.agent.epsilon.decay_episodes);
      }
      c.agent.discounted_estimate = a.value("discounted_estimate", c.agent.discounted_estimate);
      c.agent.buffer_capacity = a.value("buffer_capacity", c.agent.buffer_capacity);
      c.agent.batch_size = a.value("batch_size", c.agent.batch_size);
      c.agent.alpha = a.value("alpha", c.agent.alpha);
      c.agent.eps_norm = a.value("eps_norm", c.agent.eps_norm);
      c.agent.j_max = a.value("j_max", c.agent.j_max);
      c.eta_m = a.value("eta_m", c.eta_m);
      c.updates_per_step = a.value("updates_per_step", c.updates_per_step);
      c.reset_epsilon = a.value("reset_epsilon", c.reset_epsilon);
    }
    if (j.contains("metric")) {
      const Json& m = j.at("metric");
      check_keys(m, {"c", "tol", "max_iter"}, "metric");
      c.metric.c = m.value("c", c.metric.c);
      c.metric.tol = m.value("tol", c.metric.tol);
      c.metric.max_iter = m.value("max_iter", c.metric.max_iter);
    }
    if (j.contains("perturbation")) {
      const Json& f = j.at("perturbation");
      check_keys(f,
                 {"reward", "transition", "wall", "relocate", "start", "reward_scale", "max_retries", "max_steps",
                  "shortfall_fraction"},
                 "perturbation");
      c.family.w_reward = f.value("reward", c.family.w_reward);
      c.family.w_transition = f.value("transition", c.family.w_transition);
      c.family.w_wall = f.value("wall", c.family.w_wall);
      c.family.w_relocate = f.value("relocate", c.family.w_relocate);
      c.family.w_start = f.value("start", c.family.w_start);
      c.family.reward_scale = f.value("reward_scale", c.family.reward_scale);
      c.family.max_retries = f.value("max_retries", c.family.max_retries);
      c.family.max_steps = f.value("max_steps", c.family.max_steps);
      c.family.shortfall_fraction = f.value("shortfall_fraction", c.family.shortfall_fraction);
    }
    c.validate();
    return c;
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
}

inline ExperimentConfig load_config(const std::string& path) {
  return config_from_json(read_json_file(path), std::filesystem::path(path).parent_path().string());
}

/// Identity of a config: its canonical JSON (paths excluded) plus the game it names.
inline std::uint64_t config_hash(const ExperimentConfig& c, const TabularMarkovGame& game) {
  Json j = config_to_json(c);
  j.erase("environment");
  return splitmix64(fnv1a64(canonical(j)) ^ game.content_hash());
}

struct EpisodeStats {
  double discounted = 0.0;
  double undiscounted = 0.0;
  std::size_t steps = 0;
  bool terminated = false;
};

/**
 * @brief One replication: the agents of a group plus their protocol state.
 *
 * Each step every agent observes (local view, messages sent at the previous
 * step), acts, and emits a symbol under emergent protocols. The symbols enter
 * observations one step later. Every agent stores its own transition with
 * priority equal to its misalignment; then the protocol runs; then each agent
 * replays `updates_per_step` prioritized batches.
 */
class Replication {
 public:
  Replication(const TabularMarkovGame& game, const Protocol& protocol, const AgentConfig& agent, double eta_m,
              int updates_per_step, std::uint64_t seed)
      : protocol_(protocol),
        n_(game.num_agents()),
        updates_per_step_(updates_per_step),
        action_rng_(derive_seed(seed, {1})),
        env_rng_(derive_seed(seed, {2})),
        replay_rng_(derive_seed(seed, {3})) {
    protocol_.validate();
    const int symbols = protocol_.emergent() ? protocol_.symbols : 2;
    for (int i = 0; i < n_; ++i) {
      agents_.emplace_back(agent, game.action_counts()[static_cast<std::size_t>(i)], game.gamma(), symbols);
      agents_.back().message_policy.eta_m = eta_m;
    }
    predictors_.resize(static_cast<std::size_t>(n_));
    fresh_.resize(static_cast<std::size_t>(n_));
  }

  std::vector<LearnerState>& agents() { return agents_; }
  const std::vector<LearnerState>& agents() const { return agents_; }
  const Protocol& protocol() const { return protocol_; }

  std::uint64_t digest() const {
    std::uint64_t h = 0;
    for (const LearnerState& a : agents_) h = splitmix64(h ^ a.digest());
    return h;
  }

  /// Q tables only: what the learners know, independent of bookkeeping.
  std::uint64_t q_digest() const {
    std::uint64_t h = 0;
    for (const LearnerState& a : agents_) h = splitmix64(h ^ a.q.digest());
    return h;
  }

  void reset_epsilon() {
    for (LearnerState& a : agents_) a.episodes = 0;
  }

  void set_message_log(std::vector<MessageLogEntry>* log) { log_ = log; }

  /// Called after every step with the global step index and the number of
  /// broadcast deliveries made at that step.
  void set_step_observer(std::function<void(std::uint64_t, std::size_t)> f) { observer_ = std::move(f); }

  /// Plays one learning episode of at most `horizon` steps in `game`.
  EpisodeStats run_episode(const TabularMarkovGame& game, int horizon) {
    if (game.num_agents() != n_) throw ModelError("game has a different number of agents");
    const int symbols = protocol_.emergent() ? protocol_.symbols : 2;
    EpisodeStats out;
    StateId s = game.initial_state();
    std::uint64_t msg = 0;
    std::vector<ObservationKey> obs(static_cast<std::size_t>(n_)), prev_obs(static_cast<std::size_t>(n_));
    std::vector<int> actions(static_cast<std::size_t>(n_));
    std::vector<Transition> taus(static_cast<std::size_t>(n_));
    std::vector<double> js(static_cast<std::size_t>(n_));
    std::vector<double> eps(static_cast<std::size_t>(n_));
    for (int i = 0; i < n_; ++i) eps[static_cast<std::size_t>(i)] = agents_[static_cast<std::size_t>(i)].epsilon();
    double discount = 1.0;
    MessageVector sent;
    for (int t = 0; t < horizon && !game.is_terminal(s); ++t) {
      JointIndex joint = 0;
      for (int i = 0; i < n_; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        obs[ui] = {game.observation(s, i), msg};
        actions[ui] = select_action(agents_[ui], obs[ui], eps[ui], action_rng_);
        joint = joint * static_cast<JointIndex>(game.action_counts()[ui]) + static_cast<JointIndex>(actions[ui]);
      }
      if (protocol_.emergent()) {
        sent.symbols.resize(static_cast<std::size_t>(n_));
        for (int i = 0; i < n_; ++i) {
          const auto ui = static_cast<std::size_t>(i);
          sent.symbols[ui] = select_symbol(agents_[ui], obs[ui], eps[ui], action_rng_);
          if (log_) log_->push_back({step_, i, sent.symbols[ui], 0});
        }
      }
      const std::uint64_t next_msg = protocol_.emergent() ? encode_message(sent, symbols) : 0;
      const StateId next = sample_next(game, s, joint);
      const bool done = game.is_terminal(next);
      for (int i = 0; i < n_; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        Transition& tau = taus[ui];
        tau.obs = obs[ui];
        tau.action = actions[ui];
        tau.next_obs = {game.observation(next, i), next_msg};
        tau.reward = game.reward(s, joint, i);
        tau.done = done;
        tau.t = step_;
        tau.state = s;
        tau.next_state = next;
        tau.agent = i;
        js[ui] = misalignment(agents_[ui], tau);
        agents_[ui].buffer.push(tau, js[ui]);
        out.discounted += discount * tau.reward;
        out.undiscounted += tau.reward;
      }
      discount *= game.gamma();

      if (protocol_.kind == ProtocolKind::EmergentSelfCentric && t > 0) {
        for (int i = 0; i < n_; ++i) {
          const auto ui = static_cast<std::size_t>(i);
          update_policy_self(agents_[ui], taus[ui], prev_obs[ui], MessageSlot{i, n_, symbols});
        }
      } else if (protocol_.kind == ProtocolKind::EmergentGroupCentric && t > 0) {
        double total = 0.0;
        for (double j : js) total += j;
        for (int i = 0; i < n_; ++i) {
          const auto ui = static_cast<std::size_t>(i);
          const double others = n_ > 1 ? (total - js[ui]) / (n_ - 1) : js[ui];
          update_policy_group(agents_[ui], predictors_[ui], others, obs[ui], prev_obs[ui],
                              MessageSlot{i, n_, symbols});
        }
      }

      std::size_t delivered = 0;
      if (protocol_.kind == ProtocolKind::MandatoryBroadcast) {
        for (int i = 0; i < n_; ++i) fresh_[static_cast<std::size_t>(i)].push_back({taus[static_cast<std::size_t>(i)], step_});
        delivered = mandatory_broadcast(agents_, fresh_, protocol_.m_l, step_, log_);
      }

      for (LearnerState& a : agents_) {
        for (int u = 0; u < updates_per_step_; ++u) update(a, a.buffer.sample(a.config.batch_size, replay_rng_));
        ++a.steps;
      }
      if (observer_) observer_(step_, delivered);

      prev_obs = obs;
      msg = next_msg;
      s = next;
      ++step_;
      ++out.steps;
      if (done) out.terminated = true;
    }
    for (LearnerState& a : agents_) ++a.episodes;
    return out;
  }

  /// Greedy rollout without learning; returns the mean misalignment of the
  /// visited transitions (per agent, averaged). Uses its own rng stream.
  double greedy_misalignment(const TabularMarkovGame& game, int horizon, std::uint64_t seed = 0) const {
    Rng env(seed), pick(seed ^ 0x5bd1e995ULL);
    StateId s = game.initial_state();
    double total = 0.0;
    std::size_t count = 0;
    for (int t = 0; t < horizon && !game.is_terminal(s); ++t) {
      JointIndex joint = 0;
      std::vector<ObservationKey> obs(static_cast<std::size_t>(n_));
      std::vector<int> actions(static_cast<std::size_t>(n_));
      for (int i = 0; i < n_; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        obs[ui] = {game.observation(s, i), 0};
        actions[ui] = select_action(agents_[ui], obs[ui], 0.0, pick);
        joint = joint * static_cast<JointIndex>(game.action_counts()[ui]) + static_cast<JointIndex>(actions[ui]);
      }
      const StepResult r = step(game, s, joint, env);
      for (int i = 0; i < n_; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        Transition tau;
        tau.obs = obs[ui];
        tau.action = actions[ui];
        tau.next_obs = {game.observation(r.next, i), 0};
        tau.reward = r.rewards[ui];
        tau.done = r.done;
        total += misalignment(agents_[ui], tau);
        ++count;
      }
      s = r.next;
    }
    return count ? total / static_cast<double>(count) : 0.0;
  }

 private:
  StateId sample_next(const TabularMarkovGame& game, StateId s, JointIndex joint) {
    const auto row = game.row(s, joint);
    if (row.empty()) throw ModelError("missing transition row at state " + std::to_string(s.value));
    const double u = uniform01(env_rng_);
    double acc = 0.0;
    for (const Successor& e : row) {
      acc += e.prob;
      if (u < acc) return StateId{e.state};
    }
    return StateId{row.back().state};
  }

  Protocol protocol_;
  int n_;
  int updates_per_step_;
  std::vector<LearnerState> agents_;
  std::vector<MisalignmentPredictor> predictors_;
  std::vector<std::vector<FreshTransition>> fresh_;
  Rng action_rng_, env_rng_, replay_rng_;
  std::uint64_t step_ = 0;
  std::vector<MessageLogEntry>* log_ = nullptr;
  std::function<void(std::uint64_t, std::size_t)> observer_;
};

struct PerturbedGame {
  TabularMarkovGame game;
  PerturbationTrace trace;
};

/// Seed of the M' draw for (seed, K): shared by every protocol so that all
/// protocols of one seed face the same perturbed game.
inline std::uint64_t perturbation_seed(std::uint64_t seed, double K) {
  std::uint64_t bits;
  std::memcpy(&bits, &K, sizeof bits);
  return derive_seed(seed, {0x70657274ULL, bits});
}

/// K = 0 leaves the game unchanged without invoking the sampler.
inline PerturbedGame draw_perturbation(const Environment& env, const ExperimentConfig& c, std::uint64_t seed,
                                       double K) {
  if (K == 0.0) {
    PerturbedGame p{env.game, {}};
    p.trace.origin_hash = env.game.content_hash();
    p.trace.seed = perturbation_seed(seed, K);
    return p;
  }
  auto r = env.grid ? sample_perturbed(*env.grid, K, c.family, c.metric, perturbation_seed(seed, K))
                    : sample_perturbed(env.game, K, c.family, c.metric, perturbation_seed(seed, K));
  return {std::move(r.game), std::move(r.trace)};
}

struct RunRecord {
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  Protocol protocol;
  double K = 0.0;
  std::string environment;
  PerturbationTrace trace;
  std::vector<double> pre_returns, post_returns;
  std::vector<double> pre_returns_undiscounted, post_returns_undiscounted;
  double u_pre = 0.0, u_post = 0.0;
  double u_pre_undiscounted = 0.0, u_post_undiscounted = 0.0;
  std::uint64_t q_digest_pre = 0, q_digest_post_start = 0;
  std::uint64_t t_pert = 0;
  std::size_t window = 0;
  std::string error;
  /// Not serialized: timings live in a sidecar so records stay reproducible.
  double wall_seconds = 0.0;

  bool ok() const { return error.empty(); }
};

inline Json record_to_json(const RunRecord& r) {
  Json j;
  j["format"] = "resil-run";
  j["version"] = kVersionStamp;
  j["config-hash"] = hex64(r.config_hash);
  j["seed"] = r.seed;
  j["protocol"] = protocol_to_json(r.protocol);
  j["K"] = r.K;
  j["environment"] = r.environment;
  j["t_pert"] = r.t_pert;
  j["window"] = r.window;
  if (!r.ok()) {
    j["error"] = r.error;
    return j;
  }
  j["trace"] = trace_to_json(r.trace);
  j["returns"] = {{"pre", r.pre_returns},
                  {"post", r.post_returns},
                  {"pre-undiscounted", r.pre_returns_undiscounted},
                  {"post-undiscounted", r.post_returns_undiscounted}};
  j["utility"] = {{"pre", r.u_pre},
                  {"post", r.u_post},
                  {"pre-undiscounted", r.u_pre_undiscounted},
                  {"post-undiscounted", r.u_post_undiscounted}};
  j["q-digest"] = {{"pre", hex64(r.q_digest_pre)}, {"post-start", hex64(r.q_digest_post_start)}};
  return j;
}

inline RunRecord record_from_json(const Json& j) {
  try {
    if (j.at("format") != "resil-run") throw ConfigError("not a run record");
    RunRecord r;
    r.config_hash = parse_hex64(j.at("config-hash"));
    r.seed = j.at("seed");
    r.protocol = protocol_from_json(j.at("protocol"));
    r.K = j.at("K");
    r.environment = j.at("environment");
    r.t_pert = j.at("t_pert");
    r.window = j.at("window");
    if (j.contains("error")) {
      r.error = j.at("error");
      return r;
    }
    r.trace = trace_from_json(j.at("trace"));
    const Json& ret = j.at("returns");
    r.pre_returns = ret.at("pre").get<std::vector<double>>();
    r.post_returns = ret.at("post").get<std::vector<double>>();
    r.pre_returns_undiscounted = ret.at("pre-undiscounted").get<std::vector<double>>();
    r.post_returns_undiscounted = ret.at("post-undiscounted").get<std::vector<double>>();
    const Json& u = j.at("utility");
    r.u_pre = u.at("pre");
    r.u_post = u.at("post");
    r.u_pre_undiscounted = u.at("pre-undiscounted");
    r.u_post_undiscounted = u.at("post-undiscounted");
    r.q_digest_pre = parse_hex64(j.at("q-digest").at("pre"));
    r.q_digest_post_start = parse_hex64(j.at("q-digest").at("post-start"));
    return r;
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("malformed run record: ") + e.what());
  }
}

namespace detail {

inline void play(Replication& rep, const TabularMarkovGame& game, int horizon, std::uint64_t episodes,
                 std::vector<double>& disc, std::vector<double>& undisc) {
  disc.reserve(disc.size() + episodes);
  undisc.reserve(undisc.size() + episodes);
  for (std::uint64_t e = 0; e < episodes; ++e) {
    const EpisodeStats s = rep.run_episode(game, horizon);
    disc.push_back(s.discounted);
    undisc.push_back(s.undiscounted);
  }
}

}  // namespace detail

/**
 * @brief Runs one protocol and seed against every K in `Ks`.
 *
 * The pre-perturbation phase does not depend on K, so it is trained once and
 * the learners are copied for each K. The result equals running the cells one
 * by one. `perturbed` may supply pre-drawn games, index-aligned with `Ks`.
 */
inline std::vector<RunRecord> run_cells(const ExperimentConfig& c, const Environment& env, const Protocol& protocol,
                                        std::uint64_t seed, const std::vector<double>& Ks,
                                        const std::vector<const PerturbedGame*>* perturbed = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::uint64_t hash = config_hash(c, env.game);
  auto blank = [&](double K) {
    RunRecord r;
    r.config_hash = hash;
    r.seed = seed;
    r.protocol = protocol;
    r.K = K;
    r.environment = env.name;
    r.t_pert = c.t_pert;
    r.window = c.window;
    return r;
  };
  std::vector<RunRecord> out;
  Replication pre(env.game, protocol, c.agent, c.eta_m, c.updates_per_step, seed);
  std::vector<double> pre_d, pre_u;
  try {
    detail::play(pre, env.game, env.horizon, c.t_pert, pre_d, pre_u);
  } catch (const std::exception& e) {
    for (double K : Ks) {
      out.push_back(blank(K));
      out.back().error = e.what();
    }
    return out;
  }
  const double pre_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  for (std::size_t k = 0; k < Ks.size(); ++k) {
    const auto tk = std::chrono::steady_clock::now();
    RunRecord r = blank(Ks[k]);
    try {
      std::optional<PerturbedGame> own;
      const PerturbedGame* pg = perturbed ? (*perturbed)[k] : nullptr;
      if (!pg) {
        own = draw_perturbation(env, c, seed, Ks[k]);
        pg = &*own;
      }
      r.trace = pg->trace;
      Replication rep = pre;
      r.q_digest_pre = pre.q_digest();
      if (c.reset_epsilon) rep.reset_epsilon();
      r.q_digest_post_start = rep.q_digest();
      r.pre_returns = pre_d;
      r.pre_returns_undiscounted = pre_u;
      detail::play(rep, pg->game, env.horizon, c.t_post, r.post_returns, r.post_returns_undiscounted);
      r.u_pre = group_utility(r.pre_returns, c.window);
      r.u_post = group_utility(r.post_returns, c.window);
      r.u_pre_undiscounted = group_utility(r.pre_returns_undiscounted, c.window);
      r.u_post_undiscounted = group_utility(r.post_returns_undiscounted, c.window);
    } catch (const std::exception& e) {
      r = blank(Ks[k]);
      r.error = e.what();
    }
    r.wall_seconds = pre_seconds + std::chrono::duration<double>(std::chrono::steady_clock::now() - tk).count();
    out.push_back(std::move(r));
  }
  return out;
}

inline RunRecord run_single(const ExperimentConfig& c, const Environment& env, const Protocol& protocol, double K,
                            std::uint64_t seed) {
  return run_cells(c, env, protocol, seed, {K}).front();
}

/// Runs `jobs` on up to `parallelism` threads. Each job writes only its own
/// output slot, so results do not depend on scheduling.
inline void parallel_for(std::size_t jobs, int parallelism, const std::function<void(std::size_t)>& body) {
  const std::size_t workers = std::min<std::size_t>(jobs, static_cast<std::size_t>(std::max(parallelism, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < jobs; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < jobs; i = next++) body(i);
    });
  for (std::thread& t : pool) t.join();
}

struct ProtocolUtility {
  SampleStats discounted;
  SampleStats undiscounted;
};

struct ResilienceReport {
  std::uint64_t config_hash = 0;
  std::string environment;
  std::vector<Protocol> protocols;
  std::vector<double> K;
  std::vector<std::uint64_t> seeds;
  /// [protocol][K]
  std::vector<std::vector<ResilienceEstimate>> cells;
  /// Undiscounted counterpart of `cells`.
  std::vector<std::vector<ResilienceEstimate>> cells_undiscounted;
  std::vector<ProtocolUtility> utility;
  std::size_t expected_runs = 0;
  std::size_t completed_runs = 0;
  std::size_t shortfalls = 0;
  std::vector<std::string> failures;

  bool complete() const { return completed_runs == expected_runs && failures.empty(); }

  const ResilienceEstimate& at(ProtocolKind kind, double K) const {
    for (std::size_t p = 0; p < protocols.size(); ++p)
      if (protocols[p].kind == kind)
        for (std::size_t k = 0; k < this->K.size(); ++k)
          if (this->K[k] == K) return cells[p][k];
    throw ModelError("no report cell for " + to_string(kind));
  }
};

/// Per-seed ratios and utilities of one (protocol, K) cell, in seed order.
struct CellSamples {
  std::vector<double> u_pre, u_post, u_pre_undiscounted, u_post_undiscounted;
};

inline CellSamples cell_samples(const std::vector<RunRecord>& records, const Protocol& p, double K) {
  std::vector<const RunRecord*> hits;
  for (const RunRecord& r : records)
    if (r.ok() && same_protocol(r.protocol, p) && r.K == K)
      hits.push_back(&r);
  std::sort(hits.begin(), hits.end(), [](const RunRecord* a, const RunRecord* b) { return a->seed < b->seed; });
  CellSamples s;
  for (const RunRecord* r : hits) {
    s.u_pre.push_back(r->u_pre);
    s.u_post.push_back(r->u_post);
    s.u_pre_undiscounted.push_back(r->u_pre_undiscounted);
    s.u_post_undiscounted.push_back(r->u_post_undiscounted);
  }
  return s;
}

namespace detail {

inline ResilienceEstimate estimate(const std::vector<double>& pre, const std::vector<double>& post, double K) {
  if (post.empty()) {
    ResilienceEstimate e;
    e.K = K;
    e.c_k_mean = e.c_k_std = e.c_k_min = e.c_k_max = e.u_origin = std::nan("");
    e.undefined_normalization = true;
    return e;
  }
  return ck_in_expectation(sample_stats(pre).mean, post, K);
}

}  // namespace detail

/**
 * @brief Aggregates run records into the (protocol x K) grid.
 *
 * For each cell, u_origin is the mean pre-perturbation utility over seeds and
 * the samples are the per-seed post-perturbation utilities. The protocol
 * utility column pools the pre-phase utility of every record of the protocol
 * at the first K (the pre phase does not depend on K).
 */
inline ResilienceReport aggregate(const std::vector<RunRecord>& records, const std::vector<Protocol>& protocols,
                                  const std::vector<double>& Ks, const std::vector<std::uint64_t>& seeds) {
  ResilienceReport rep;
  rep.protocols = protocols;
  rep.K = Ks;
  rep.seeds = seeds;
  rep.expected_runs = protocols.size() * Ks.size() * seeds.size();
  for (const RunRecord& r : records) {
    if (rep.config_hash == 0) rep.config_hash = r.config_hash;
    if (rep.environment.empty()) rep.environment = r.environment;
    if (r.ok()) {
      ++rep.completed_runs;
      rep.shortfalls += r.trace.shortfall && r.K > 0.0;
    } else {
      rep.failures.push_back(protocol_label(r.protocol) + " K=" + Json(r.K).dump() + " seed=" +
                             std::to_string(r.seed) + ": " + r.error);
    }
  }
  std::sort(rep.failures.begin(), rep.failures.end());
  for (const Protocol& p : protocols) {
    std::vector<ResilienceEstimate> row, row_u;
    for (double K : Ks) {
      const CellSamples s = cell_samples(records, p, K);
      row.push_back(detail::estimate(s.u_pre, s.u_post, K));
      row_u.push_back(detail::estimate(s.u_pre_undiscounted, s.u_post_undiscounted, K));
    }
    rep.cells.push_back(std::move(row));
    rep.cells_undiscounted.push_back(std::move(row_u));
    const CellSamples first = cell_samples(records, p, Ks.front());
    rep.utility.push_back({sample_stats(first.u_pre), sample_stats(first.u_pre_undiscounted)});
  }
  return rep;
}

namespace detail {

inline Json number_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

inline Json estimate_to_json(const ResilienceEstimate& e) {
  return {{"K", e.K},
          {"mean", number_or_null(e.c_k_mean)},
          {"std", number_or_null(e.c_k_std)},
          {"min", number_or_null(e.c_k_min)},
          {"max", number_or_null(e.c_k_max)},
          {"samples", e.samples},
          {"u_origin", number_or_null(e.u_origin)},
          {"undefined_normalization", e.undefined_normalization}};
}

}  // namespace detail

inline Json report_to_json(const ResilienceReport& r) {
  Json j;
  j["format"] = "resil-report";
  j["version"] = kVersionStamp;
  j["config-hash"] = hex64(r.config_hash);
  j["environment"] = r.environment;
  j["K"] = r.K;
  j["seeds"] = r.seeds;
  j["complete"] = r.complete();
  j["expected-runs"] = r.expected_runs;
  j["completed-runs"] = r.completed_runs;
  j["shortfalls"] = r.shortfalls;
  j["failures"] = r.failures;
  Json rows = Json::array();
  for (std::size_t p = 0; p < r.protocols.size(); ++p) {
    Json row;
    row["protocol"] = protocol_to_json(r.protocols[p]);
    row["label"] = protocol_label(r.protocols[p]);
    Json ck = Json::array(), cku = Json::array();
    for (const auto& e : r.cells[p]) ck.push_back(detail::estimate_to_json(e));
    for (const auto& e : r.cells_undiscounted[p]) cku.push_back(detail::estimate_to_json(e));
    row["c_k"] = ck;
    row["c_k_undiscounted"] = cku;
    const ProtocolUtility& u = r.utility[p];
    row["utility"] = {{"mean", detail::number_or_null(u.discounted.mean)},
                      {"std", detail::number_or_null(u.discounted.std)},
                      {"samples", u.discounted.n}};
    row["utility_undiscounted"] = {{"mean", detail::number_or_null(u.undiscounted.mean)},
                                   {"std", detail::number_or_null(u.undiscounted.std)},
                                   {"samples", u.undiscounted.n}};
    rows.push_back(row);
  }
  j["rows"] = rows;
  return j;
}

/// Shortest decimal that round-trips; integral values print without a fraction.
inline std::string format_number(double v) {
  if (!std::isfinite(v)) return "";
  if (v == std::floor(v) && std::abs(v) < 1e15) return std::to_string(static_cast<long long>(v));
  return Json(v).dump();
}

/// Table with one row per protocol: C_K and its std per K, then U with std
/// (discounted and undiscounted).
inline std::string report_to_csv(const ResilienceReport& r) {
  std::string out = "protocol";
  for (double K : r.K) {
    const std::string k = format_number(K);
    out += ",C_K(K=" + k + "),C_K_std(K=" + k + ")";
  }
  out += ",U,U_std,U_undiscounted,U_undiscounted_std\n";
  for (std::size_t p = 0; p < r.protocols.size(); ++p) {
    out += protocol_label(r.protocols[p]);
    for (const auto& e : r.cells[p]) out += "," + format_number(e.c_k_mean) + "," + format_number(e.c_k_std);
    const ProtocolUtility& u = r.utility[p];
    out += "," + format_number(u.discounted.mean) + "," + format_number(u.discounted.std) + "," +
           format_number(u.undiscounted.mean) + "," + format_number(u.undiscounted.std) + "\n";
  }
  return out;
}

struct GridResult {
  std::vector<RunRecord> records;
  ResilienceReport report;
};

/**
 * @brief Executes every (protocol, K, seed) cell and aggregates.
 *
 * Perturbed games are drawn first, one per (seed, K), and shared across
 * protocols. Then each (protocol, seed) trains its pre phase once and forks
 * per K. Records come back in (protocol, K, seed) order.
 */
inline GridResult run_grid(const ExperimentConfig& c, const Environment& env, int parallelism) {
  c.validate();
  const std::size_t nk = c.K.size(), ns = c.seeds.size(), np = c.protocols.size();
  std::vector<std::optional<PerturbedGame>> games(nk * ns);
  std::vector<std::string> draw_errors(nk * ns);
  parallel_for(nk * ns, parallelism, [&](std::size_t i) {
    try {
      games[i] = draw_perturbation(env, c, c.seeds[i % ns], c.K[i / ns]);
    } catch (const std::exception& e) {
      draw_errors[i] = e.what();
    }
  });
  std::vector<std::vector<RunRecord>> per_job(np * ns);
  parallel_for(np * ns, parallelism, [&](std::size_t job) {
    const std::size_t p = job / ns, s = job % ns;
    std::vector<double> ks;
    std::vector<const PerturbedGame*> pg;
    std::vector<std::size_t> k_index;
    for (std::size_t k = 0; k < nk; ++k)
      if (games[k * ns + s]) {
        ks.push_back(c.K[k]);
        pg.push_back(&*games[k * ns + s]);
        k_index.push_back(k);
      }
    std::vector<RunRecord> got =
        ks.empty() ? std::vector<RunRecord>{} : run_cells(c, env, c.protocols[p], c.seeds[s], ks, &pg);
    std::vector<RunRecord> full(nk);
    for (std::size_t k = 0; k < nk; ++k) {
      full[k].config_hash = config_hash(c, env.game);
      full[k].seed = c.seeds[s];
      full[k].protocol = c.protocols[p];
      full[k].K = c.K[k];
      full[k].environment = env.name;
      full[k].t_pert = c.t_pert;
      full[k].window = c.window;
      full[k].error = "perturbation draw failed: " + draw_errors[k * ns + s];
    }
    for (std::size_t i = 0; i < got.size(); ++i) full[k_index[i]] = std::move(got[i]);
    per_job[job] = std::move(full);
  });
  GridResult out;
  for (std::size_t p = 0; p < np; ++p)
    for (std::size_t k = 0; k < nk; ++k)
      for (std::size_t s = 0; s < ns; ++s) out.records.push_back(per_job[p * ns + s][k]);
  out.report = aggregate(out.records, c.protocols, c.K, c.seeds);
  return out;
}

inline std::string record_file_name(const RunRecord& r) {
  return protocol_label(r.protocol) + "_K" + format_number(r.K) + "_seed" + std::to_string(r.seed) + ".json";
}

/// Writes records/, report.json, report.csv and timings.json under `dir`.
inline void write_grid(const GridResult& g, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "records");
  Json timings = Json::object();
  for (const RunRecord& r : g.records) {
    write_text_file((fs::path(dir) / "records" / record_file_name(r)).string(), canonical(record_to_json(r)) + "\n");
    timings[record_file_name(r)] = r.wall_seconds;
  }
  write_text_file((fs::path(dir) / "report.json").string(), canonical(report_to_json(g.report)) + "\n");
  write_text_file((fs::path(dir) / "report.csv").string(), report_to_csv(g.report));
  write_text_file((fs::path(dir) / "timings.json").string(), timings.dump(2) + "\n");
}

/// Loads every *.json record under `dir` (sorted by file name).
inline std::vector<RunRecord> load_records(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw ConfigError("'" + dir + "' is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<RunRecord> out;
  for (const fs::path& f : files) {
    const Json j = read_json_file(f.string());
    if (j.value("format", "") == "resil-run") out.push_back(record_from_json(j));
  }
  if (out.empty()) throw ConfigError("no run records in '" + dir + "'");
  return out;
}

/// Rebuilds the report from records alone; grid axes come from the records.
inline ResilienceReport report_from_records(const std::vector<RunRecord>& records) {
  std::vector<Protocol> protocols;
  std::vector<double> Ks;
  std::vector<std::uint64_t> seeds;
  for (const RunRecord& r : records) {
    if (std::none_of(protocols.begin(), protocols.end(),
                     [&](const Protocol& p) { return same_protocol(p, r.protocol); }))
      protocols.push_back(r.protocol);
    if (std::find(Ks.begin(), Ks.end(), r.K) == Ks.end()) Ks.push_back(r.K);
    if (std::find(seeds.begin(), seeds.end(), r.seed) == seeds.end()) seeds.push_back(r.seed);
  }
  std::stable_sort(protocols.begin(), protocols.end(),
                   [](const Protocol& a, const Protocol& b) { return static_cast<int>(a.kind) < static_cast<int>(b.kind); });
  std::sort(Ks.begin(), Ks.end());
  std::sort(seeds.begin(), seeds.end());
  return aggregate(records, protocols, Ks, seeds);
}

}  // namespace resil
