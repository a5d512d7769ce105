// cwdlab: command-line front end for the cautious weight decay laboratory.
//
// Exit codes: 0 success, 2 configuration error, 3 numerical divergence.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cwd/continuous.hpp"
#include "cwd/harness.hpp"

namespace fs = std::filesystem;
using namespace cwd;

namespace {

constexpr int kOk = 0;
constexpr int kConfig = 2;
constexpr int kDiverged = 3;

struct Globals {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> stride;
  std::optional<std::string> out;
  bool emit_lyapunov = false;

  ConfigOverrides overrides() const {
    ConfigOverrides o;
    o.seed = seed;
    o.stride = stride;
    if (out) o.out = fs::path(*out);
    o.emit_lyapunov = emit_lyapunov;
    return o;
  }
};

void write_json(const nlohmann::json& j, const fs::path& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << j.dump(2) << '\n';
}

fs::path ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw std::runtime_error("cannot create " + p.string() + ": " + ec.message());
  return p;
}

int cmd_run(const std::string& config, const Globals& g) {
  ExperimentConfig cfg = load_config(config);
  g.overrides().apply(cfg);
  if (cfg.out.empty()) cfg.out = "runs" / fs::path(config).stem();
  const RunResult r = run(cfg);
  write_run(r, cfg.out);
  std::cout << summary_json(r.summary).dump() << '\n';
  return r.summary.diverged ? kDiverged : kOk;
}

int cmd_sweep(const std::string& dir, const Globals& g, unsigned threads) {
  if (!fs::is_directory(dir)) throw ConfigError(dir + " is not a directory");
  std::vector<fs::path> configs;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".ini") configs.push_back(e.path());
  }
  std::sort(configs.begin(), configs.end());
  if (configs.empty()) throw ConfigError("no .ini configs in " + dir);
  const fs::path root = ensure_dir(g.out ? fs::path(*g.out) : fs::path("sweep"));
  ConfigOverrides o = g.overrides();
  o.out.reset();
  const auto entries = sweep(configs, root, o, threads);
  std::ofstream table(root / "sweep.csv");
  table << "config,exit_code,final_loss,final_grad_norm,mean_mask_ratio,wall_time_s,error\n";
  int worst = kOk;
  for (const SweepEntry& e : entries) {
    table << e.config.filename().string() << ',' << e.exit_code;
    if (e.summary) {
      table << ',' << e.summary->final_loss << ',' << e.summary->final_grad_norm << ',' << e.summary->mean_mask_ratio
            << ',' << e.summary->wall_time_s << ',';
    } else {
      table << ",,,,," << '"' << e.error << '"';
    }
    table << '\n';
    if (e.exit_code != kOk) std::cerr << e.config.string() << ": exit " << e.exit_code << " " << e.error << '\n';
    worst = std::max(worst, e.exit_code);
  }
  std::cout << "sweep: " << entries.size() << " runs, table at " << (root / "sweep.csv").string() << '\n';
  return worst;
}

int cmd_ode(const std::string& config, const Globals& g) {
  FlowRunConfig fc = load_flow_config(config);
  if (g.stride) fc.flow.stride = *g.stride;
  if (g.seed) fc.seed = *g.seed;
  const Objective obj = objective_by_name(fc.objective);
  ParamVector v0 = fc.v0;
  if (fc.v0_from_gradient) v0 = elementwise(ElementOp::mul, obj.gradient(fc.x0), obj.gradient(fc.x0));
  const Trajectory traj = integrate(fc.flow, obj, fc.x0, fc.m0, v0);
  const fs::path out = ensure_dir(g.out ? fs::path(*g.out) : (fc.out.empty() ? "ode" / fs::path(config).stem() : fc.out));
  const auto rows = flow_rows(traj, obj, fc.flow, g.emit_lyapunov);
  {
    std::ofstream csv(out / "trajectory.csv");
    if (!csv) throw std::runtime_error("cannot write trajectory");
    write_trajectory_csv(csv, rows, fc.seed, "objective=" + fc.objective + " flow=" + to_string(fc.flow.family()));
  }
  nlohmann::json j{{"objective", fc.objective},
                   {"family", to_string(fc.flow.family())},
                   {"seed", fc.seed},
                   {"samples", rows.size()},
                   {"diverged", traj.diverged},
                   {"final_loss", rows.back().loss},
                   {"final_grad_norm", rows.back().grad_norm}};
  if (g.emit_lyapunov) {
    const MonitorReport rep = monitor(traj, obj, fc.flow.params);
    j["lyapunov"] = {{"max_increment", rep.max_increment},
                     {"tolerance", rep.tolerance},
                     {"violations", rep.violations},
                     {"monotone", rep.monotone}};
  }
  write_json(j, out / "summary.json");
  std::cout << j.dump() << '\n';
  return traj.diverged ? kDiverged : kOk;
}

int cmd_rate(const std::string& config, const Globals& g) {
  ExperimentConfig cfg = load_config(config);
  g.overrides().apply(cfg);
  const Objective obj = objective_by_name(cfg.objective);
  const RateReport rep = rate_experiment(obj, cfg.optimizer, rate_options(cfg));
  nlohmann::json j = rate_json(rep);
  j["objective"] = cfg.objective;
  j["seed"] = cfg.seed;
  if (g.out) write_json(j, ensure_dir(*g.out) / "rate.json");
  std::cout << j.dump(2) << '\n';
  return kOk;
}

int cmd_ablate(const std::string& config, const Globals& g) {
  ExperimentConfig cfg = load_config(config);
  g.overrides().apply(cfg);
  const AblationTable t = ablation_suite(cfg.optimizer, ablation_options(cfg));
  const fs::path out = ensure_dir(g.out ? fs::path(*g.out) : fs::path("ablation"));
  {
    std::ofstream csv(out / "ablation.csv");
    write_ablation_csv(csv, t);
  }
  write_ablation_csv(std::cout, t);
  std::cout << "cautious <= decoupled in " << t.wins(DecayKind::Cautious, DecayKind::Decoupled) << "/" << t.seeds()
            << " seeds (seed " << cfg.seed << ")\n";
  return kOk;
}

int cmd_fig3(double lambda, const Globals& g, int inits, std::int64_t steps) {
  Fig3Options o;
  o.lambda = lambda;
  o.inits = inits;
  o.steps = steps;
  if (g.seed) o.seed = *g.seed;
  if (g.stride) o.stride = *g.stride;
  o.out = ensure_dir(g.out ? fs::path(*g.out) : fs::path("fig3"));
  const auto runs = figure3_repro(o);
  nlohmann::json j = fig3_json(runs);
  write_json(j, o.out / "fig3.json");
  for (const Fig3Run& r : runs) {
    std::cout << r.objective << " " << to_string(r.variant) << " init " << r.init_index << ": x=(" << r.final_x[0]
              << ", " << r.final_x[1] << ") |grad|=" << r.final_grad_inf << " fixed_point=" << r.fixed_point.passed
              << " pareto=" << (r.pareto.inconclusive ? "inconclusive" : (r.pareto.locally_pareto ? "yes" : "no"))
              << '\n';
  }
  bool diverged = false;
  for (const Fig3Run& r : runs) diverged |= r.diverged;
  return diverged ? kDiverged : kOk;
}

std::string objective_from_csv(const fs::path& csv) {
  std::ifstream in(csv);
  std::string line;
  while (std::getline(in, line) && !line.empty() && line[0] == '#') {
    const auto pos = line.find("objective=");
    if (pos != std::string::npos) {
      const auto end = line.find(' ', pos);
      return line.substr(pos + 10, end == std::string::npos ? std::string::npos : end - pos - 10);
    }
  }
  throw ConfigError(csv.string() + ": no objective recorded; pass --objective");
}

int cmd_pareto(const std::string& csv, const Globals& g, const std::string& objective_flag, double delta, int probes) {
  const auto rows = read_trajectory_csv(csv);
  const Objective obj = objective_by_name(objective_flag.empty() ? objective_from_csv(csv) : objective_flag);
  ParetoOptions po;
  po.delta = delta;
  po.n_probes = probes;
  if (g.seed) po.seed = *g.seed;
  const ParetoVerdict v = pareto_check(rows.back().x, obj, po);
  const nlohmann::json j = pareto_json(v);
  if (g.out) write_json(j, *g.out);
  std::cout << j.dump(2) << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cwdlab: cautious weight decay experiments"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Override the run seed");
  app.add_option("--out", g.out, "Output file or directory");
  app.add_option("--stride", g.stride, "Log every n-th step")->check(CLI::PositiveNumber);
  app.add_flag("--emit-lyapunov", g.emit_lyapunov, "Fill the H column");

  std::string path;
  unsigned threads = 0;
  double lambda = 0.5, delta = 0.1;
  int inits = 5, probes = 200;
  std::int64_t steps = 50000;
  std::string objective;

  auto* run_cmd = app.add_subcommand("run", "Run one config");
  run_cmd->add_option("config", path)->required();
  auto* sweep_cmd = app.add_subcommand("sweep", "Run every .ini in a directory in parallel");
  sweep_cmd->add_option("config-dir", path)->required();
  sweep_cmd->add_option("--threads", threads, "Worker count (0 = all cores)");
  auto* ode_cmd = app.add_subcommand("ode", "Integrate a continuous-time flow");
  ode_cmd->add_option("config", path)->required();
  auto* rate_cmd = app.add_subcommand("rate", "Stationarity rate experiment");
  rate_cmd->add_option("config", path)->required();
  auto* ablate_cmd = app.add_subcommand("ablate", "Decay-mask ablation");
  ablate_cmd->add_option("config", path)->required();
  auto* fig3_cmd = app.add_subcommand("fig3", "Adam / AdamW / Adam+CWD on the toy objectives");
  fig3_cmd->add_option("lambda", lambda)->required();
  fig3_cmd->add_option("--inits", inits, "Random inits per objective");
  fig3_cmd->add_option("--steps", steps, "Steps per run");
  auto* pareto_cmd = app.add_subcommand("pareto", "Local Pareto check of a trajectory's last point");
  pareto_cmd->add_option("trajectory", path)->required();
  pareto_cmd->add_option("--objective", objective, "Objective name (default: from the CSV header)");
  pareto_cmd->add_option("--delta", delta, "Probe radius");
  pareto_cmd->add_option("--probes", probes, "Probe count");

  for (auto* sub : {run_cmd, sweep_cmd, ode_cmd, rate_cmd, ablate_cmd, fig3_cmd, pareto_cmd}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    if (*run_cmd) return cmd_run(path, g);
    if (*sweep_cmd) return cmd_sweep(path, g, threads);
    if (*ode_cmd) return cmd_ode(path, g);
    if (*rate_cmd) return cmd_rate(path, g);
    if (*ablate_cmd) return cmd_ablate(path, g);
    if (*fig3_cmd) return cmd_fig3(lambda, g, inits, steps);
    if (*pareto_cmd) return cmd_pareto(path, g, objective, delta, probes);
  } catch (const NumericalError& e) {
    std::cerr << "numerical divergence: " << e.what() << '\n';
    return kDiverged;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kOk;
}
