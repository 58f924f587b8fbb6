#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "resil/resil.hpp"

using namespace resil;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitPartial = 3;

TabularMarkovGame load_game(const std::string& path) {
  if (std::filesystem::path(path).extension() == ".json") return game_from_json(read_json_file(path));
  return build_game(load_grid_spec(path));
}

/// Accepts a bare trace or a run record that embeds one.
PerturbationTrace load_trace(const std::string& path) {
  const Json j = read_json_file(path);
  if (j.value("format", "") == "resil-run") {
    if (!j.contains("trace")) throw ConfigError("run record '" + path + "' has no trace");
    return trace_from_json(j.at("trace"));
  }
  return trace_from_json(j);
}

int cmd_run(const std::string& config_path, int parallelism, const std::string& output) {
  ExperimentConfig c = load_config(config_path);
  if (!output.empty()) c.output = output;
  if (parallelism > 0) c.parallelism = parallelism;
  const Environment env = Environment::load(c.environment, c.horizon);
  std::cerr << "running " << c.protocols.size() * c.K.size() * c.seeds.size() << " cells on " << env.name << " ("
            << env.game.num_states() << " states), parallelism " << c.parallelism << "\n";
  const GridResult g = run_grid(c, env, c.parallelism);
  write_grid(g, c.output);
  emit_plots(g.records, (std::filesystem::path(c.output) / "plots").string());
  std::cout << report_to_csv(g.report);
  if (!g.report.complete()) {
    for (const std::string& f : g.report.failures) std::cerr << "failed: " << f << "\n";
    return kExitPartial;
  }
  return 0;
}

int cmd_distance(const std::string& origin, const std::string& other, double c, double tol, bool matrix) {
  const TabularMarkovGame a = load_game(origin), b = load_game(other);
  MetricOptions opt;
  opt.c = c;
  opt.tol = tol;
  if (matrix) {
    const DistanceMatrix d = state_distance_matrix(a, b, opt);
    for (std::uint32_t s = 0; s < a.num_states(); ++s) {
      for (std::uint32_t t = 0; t < b.num_states(); ++t) std::cout << (t ? "," : "") << d.at(s, t);
      std::cout << "\n";
    }
    return 0;
  }
  std::printf("%.12g\n", mdp_distance(a, b, opt));
  return 0;
}

int cmd_perturb(const std::string& config_path, std::optional<double> K, std::optional<std::uint64_t> seed,
                const std::string& replay_path, const std::string& output) {
  const ExperimentConfig c = load_config(config_path);
  const Environment env = Environment::load(c.environment, c.horizon);
  PerturbedGame pg;
  if (!replay_path.empty()) {
    pg.trace = load_trace(replay_path);
    pg.game = replay(env.game, pg.trace);
  } else {
    double k = 0.0;
    for (double v : c.K) k = std::max(k, v);
    pg = draw_perturbation(env, c, seed.value_or(c.seeds.front()), K.value_or(k));
  }
  const double delta = mdp_distance(env.game, pg.game, c.metric);
  if (!output.empty()) {
    std::filesystem::create_directories(output);
    write_text_file((std::filesystem::path(output) / "trace.json").string(), canonical(trace_to_json(pg.trace)) + "\n");
    write_text_file((std::filesystem::path(output) / "game.json").string(), canonical(game_to_json(pg.game)) + "\n");
  }
  Json summary{{"delta", delta},
               {"bound", pg.trace.bound},
               {"magnitude", pg.trace.magnitude},
               {"steps", pg.trace.steps.size()},
               {"atomic", pg.trace.atomic_count()},
               {"shortfall", pg.trace.shortfall},
               {"game-hash", hex64(pg.game.content_hash())}};
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_report(const std::string& dir, const std::string& output) {
  const std::vector<RunRecord> records = load_records(dir);
  const ResilienceReport r = report_from_records(records);
  if (!output.empty()) {
    std::filesystem::create_directories(output);
    write_text_file((std::filesystem::path(output) / "report.json").string(), canonical(report_to_json(r)) + "\n");
    write_text_file((std::filesystem::path(output) / "report.csv").string(), report_to_csv(r));
  }
  std::cout << report_to_csv(r);
  return r.complete() ? 0 : kExitPartial;
}

int cmd_plot(const std::string& dir, const std::string& output) {
  const std::vector<RunRecord> records = load_records(dir);
  for (const std::string& f : emit_plots(records, output)) std::cout << f << "\n";
  return 0;
}

int cmd_export(const std::string& env_path, const std::string& output) {
  const std::string text = canonical(game_to_json(load_game(env_path))) + "\n";
  if (output.empty())
    std::cout << text;
  else
    write_text_file(output, text);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Resilience benchmark for multi-agent learners under bounded perturbations"};
  app.require_subcommand(1);

  std::string config, output, origin, other, dir, replay_path, env_path;
  int parallelism = 0;
  double c = 0.5, tol = 1e-6;
  bool matrix = false;
  std::optional<double> K;
  std::optional<std::uint64_t> seed;

  auto* run = app.add_subcommand("run", "Run every (protocol, K, seed) cell of an experiment config");
  run->add_option("config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("-j,--parallelism", parallelism, "Worker threads (overrides the config)");
  run->add_option("-o,--output", output, "Output directory (overrides the config)");

  auto* distance = app.add_subcommand("distance", "Distance between two games (.env spec or .json model)");
  distance->add_option("--origin", origin, "Origin game")->required()->check(CLI::ExistingFile);
  distance->add_option("--other", other, "Other game")->required()->check(CLI::ExistingFile);
  distance->add_option("--c", c, "Transport weight in [0, 1)");
  distance->add_option("--tol", tol, "Fixed-point tolerance");
  distance->add_flag("--matrix", matrix, "Print the full state distance matrix");

  auto* perturb = app.add_subcommand("perturb", "Sample a perturbed game, or replay a stored trace");
  perturb->add_option("config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  perturb->add_option("--K", K, "Bound (default: largest K in the config)");
  perturb->add_option("--seed", seed, "Seed (default: first seed in the config)");
  perturb->add_option("--replay", replay_path, "Trace or run record to replay")->check(CLI::ExistingFile);
  perturb->add_option("-o,--output", output, "Directory for trace.json and game.json");

  auto* report = app.add_subcommand("report", "Aggregate a directory of run records");
  report->add_option("records", dir, "Directory of run records")->required();
  report->add_option("-o,--output", output, "Directory for report.json and report.csv");

  auto* plot = app.add_subcommand("plot", "Learning-curve SVG and CSV per (environment, K)");
  plot->add_option("records", dir, "Directory of run records")->required();
  plot->add_option("-o,--output", output, "Output directory")->required();

  auto* exp = app.add_subcommand("export", "Write the JSON model of an environment spec");
  exp->add_option("env", env_path, "Environment spec")->required()->check(CLI::ExistingFile);
  exp->add_option("-o,--output", output, "Output file (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*run) return cmd_run(config, parallelism, output);
    if (*distance) return cmd_distance(origin, other, c, tol, matrix);
    if (*perturb) return cmd_perturb(config, K, seed, replay_path, output);
    if (*report) return cmd_report(dir, output);
    if (*plot) return cmd_plot(dir, output);
    if (*exp) return cmd_export(env_path, output);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
