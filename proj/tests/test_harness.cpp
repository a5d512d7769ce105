#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "cwd/harness.hpp"

using namespace cwd;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig parse(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

const char* kBasic = R"(
[objective]
name = toy_parabola

[optimizer]
family = adam
eta = 0.01
schedule = cosine
horizon = 5000
lambda = 0.1
decay = cautious

[run]
steps = 5000
x0_lo = 0
x0_hi = 6
seed = 7
stride = 7
sigma = 0
)";

Objective rate_quadratic() { return quadratic_manifold(DenseMatrix(2, 2, {2.0, 0.5, 0.5, 1.0}), {1.0, -1.0}); }

}  // namespace

TEST_CASE("config parsing") {
  const ExperimentConfig cfg = parse(kBasic);
  CHECK(cfg.objective == "toy_parabola");
  CHECK(cfg.optimizer.family == Family::Adam);
  CHECK(cfg.optimizer.eta.kind == ScheduleKind::cosine);
  CHECK(cfg.optimizer.lambda == 0.1);
  CHECK(cfg.steps == 5000);
  CHECK(cfg.stride == 7);
  CHECK(cfg.seed == 7);
  CHECK_FALSE(cfg.x0.point.has_value());
  CHECK(cfg.x0.hi == 6.0);

  CHECK(parse("[run]\nx0 = 1.5, -2\n").x0.point == ParamVector{1.5, -2.0});
  CHECK_THROWS_AS(parse("[run]\nsteps = 0\n").validate(2), ConfigError);
  CHECK_THROWS_AS(parse("[run]\nstride = 0\n"), ConfigError);
  CHECK_THROWS_AS(parse("[run]\nstepz = 10\n"), ConfigError);
  CHECK_THROWS_AS(parse("[runner]\nsteps = 10\n"), ConfigError);
  CHECK_THROWS_AS(parse("[optimizer]\nfamily = adagrad\n"), ConfigError);
  CHECK_THROWS_AS(parse("[run]\nsteps = ten\n"), ConfigError);
  CHECK_THROWS_AS(parse("[run]\nx0 = 1, 2, 3\n").validate(2), ConfigError);
  CHECK_THROWS_AS(parse("[optimizer]\nfamily = adam\nbeta1 = 0.999\nbeta2 = 0.9\n").validate(2), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/run.ini"), ConfigError);

  ExperimentConfig over = cfg;
  ConfigOverrides o;
  o.seed = 99;
  o.stride = 3;
  o.emit_lyapunov = true;
  o.apply(over);
  CHECK(over.seed == 99);
  CHECK(over.stride == 3);
  CHECK(over.emit_lyapunov);
}

TEST_CASE("zero steps are rejected by run") {
  ExperimentConfig cfg = parse(kBasic);
  cfg.steps = 0;
  CHECK_THROWS_AS(run(cfg), ConfigError);
}

TEST_CASE("runs are deterministic and byte-identical on disk") {
  TempDir tmp("cwd_harness_det");
  ExperimentConfig cfg = parse(kBasic);
  cfg.steps = 500;
  cfg.sigma = 0.3;
  cfg.emit_lyapunov = true;
  const RunResult a = run(cfg);
  const RunResult b = run(cfg);
  write_run(a, tmp.path / "a");
  write_run(b, tmp.path / "b");
  const std::string ca = slurp(tmp.path / "a" / "trajectory.csv");
  CHECK(ca == slurp(tmp.path / "b" / "trajectory.csv"));
  CHECK(ca.rfind("# seed=7", 0) == 0);

  cfg.seed = 8;
  write_run(run(cfg), tmp.path / "c");
  CHECK(ca != slurp(tmp.path / "c" / "trajectory.csv"));
}

TEST_CASE("row count is ceil(T / stride) + 1") {
  ExperimentConfig cfg = parse(kBasic);
  for (std::int64_t steps : {1, 6, 7, 8, 100}) {
    for (std::size_t stride : {1u, 3u, 7u}) {
      cfg.steps = steps;
      cfg.stride = stride;
      const RunResult r = run(cfg);
      const auto expected = static_cast<std::size_t>((steps + static_cast<std::int64_t>(stride) - 1) /
                                                     static_cast<std::int64_t>(stride)) + 1;
      CHECK(r.rows.size() == expected);
      CHECK(r.rows.front().step == 0);
      CHECK(r.rows.back().step == steps);
      CHECK(std::isnan(r.rows.front().mask_ratio));
      CHECK(r.ratio_per_step.size() == static_cast<std::size_t>(steps));
    }
  }
}

TEST_CASE("summary is recomputable from the written CSV") {
  TempDir tmp("cwd_harness_summary");
  ExperimentConfig cfg = parse(kBasic);
  cfg.steps = 300;
  const RunResult r = run(cfg);
  write_run(r, tmp.path);
  const auto rows = read_trajectory_csv(tmp.path / "trajectory.csv");
  REQUIRE(rows.size() == r.rows.size());
  const auto summary = nlohmann::json::parse(slurp(tmp.path / "summary.json"));
  CHECK(summary.at("seed").get<std::uint64_t>() == 7);
  CHECK(summary_matches_rows(summary, rows));
  auto tampered = summary;
  tampered["final_loss"] = summary.at("final_loss").get<double>() * 1.01 + 1e-3;
  CHECK_FALSE(summary_matches_rows(tampered, rows));
  CHECK_THROWS_AS(write_run(r, "/proc/cwd_not_writable"), ConfigError);
}

TEST_CASE("Adam with cautious decay converges on the parabola") {
  ExperimentConfig cfg = parse(kBasic);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    cfg.seed = seed;
    const RunResult r = run(cfg);
    CHECK(r.summary.final_grad_norm <= 1e-4);
    CHECK_FALSE(r.summary.diverged);
    CHECK(r.summary.completed_steps == 5000);
  }
}

TEST_CASE("divergence is flagged, not thrown") {
  ExperimentConfig cfg = parse(kBasic);
  cfg.optimizer = OptimizerSpec{};
  cfg.optimizer.family = Family::SGD;
  cfg.optimizer.eta = LearningRate::constant(1.0);
  cfg.x0.point = ParamVector{10.0, 10.0};
  cfg.steps = 200;
  const RunResult r = run(cfg);
  CHECK(r.summary.diverged);
  CHECK(r.summary.completed_steps < 200);
}

TEST_CASE("discrete Lyapunov column") {
  ExperimentConfig cfg = parse(kBasic);
  cfg.steps = 50;
  cfg.emit_lyapunov = true;
  const RunResult r = run(cfg);
  for (const auto& row : r.rows) CHECK(std::isfinite(row.H));
  cfg.emit_lyapunov = false;
  for (const auto& row : run(cfg).rows) CHECK(std::isnan(row.H));
}

TEST_CASE("stationarity measure") {
  CHECK(stationarity({3.0, 4.0}, {1.0, 1.0}, 0.0) == 25.0);
  CHECK(stationarity({3.0, -4.0}, {1.0, 1.0}, 2.0) == 25.0 + 6.0);
  CHECK(stationarity({0.0, 0.0}, {5.0, 5.0}, 2.0) == 0.0);
}

TEST_CASE("rate experiment on a noiseless quadratic") {
  OptimizerSpec spec;
  spec.family = Family::Adam;
  spec.lambda = 0.0;
  spec.decay = DecayMode::none();
  RateOptions opts;
  opts.sigma = 0.0;
  opts.x0 = InitSpec{std::nullopt, -3.0, 3.0};
  const RateReport rep = rate_experiment(rate_quadratic(), spec, opts);
  REQUIRE(rep.rows.size() == 3);
  for (const auto& row : rep.rows) {
    CHECK(row.S_avg >= 0.0);
    CHECK(row.eta == doctest::Approx(opts.c / std::sqrt(static_cast<double>(row.T))));
    CHECK(row.n_batch == static_cast<int>(std::ceil(static_cast<double>(row.T) / opts.c_prime)));
  }
  CHECK(rep.slope <= -0.45);
  CHECK(rep.slope_ci_low <= rep.slope);
  CHECK(rep.slope <= rep.slope_ci_high);
  CHECK(rep.R > 0.0);
  CHECK(rep.G > 0.0);

  RateOptions two = opts;
  two.horizons = {100, 1000};
  CHECK_THROWS_AS(rate_experiment(rate_quadratic(), spec, two), ConfigError);
  OptimizerSpec no_eps = spec;
  no_eps.epsilon = 0.0;
  CHECK_THROWS_AS(rate_experiment(rate_quadratic(), no_eps, opts), ConfigError);
}

TEST_CASE("fixed step size leaves a stationarity floor that shrinks with eta") {
  // Long noiseless runs; the floor is the average of S over the second half.
  const Objective q = rate_quadratic();
  auto floor_at = [&](double eta) {
    ExperimentConfig cfg;
    cfg.optimizer.family = Family::Adam;
    cfg.optimizer.lambda = 0.1;
    cfg.optimizer.eta = LearningRate::constant(eta);
    cfg.steps = 100000;
    cfg.x0.point = ParamVector{2.0, 2.0};
    const RunResult r = run(cfg, q);
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t k = r.rows.size() / 2; k + 1 < r.rows.size(); ++k, ++n) {
      acc += stationarity(q.gradient(r.rows[k].x), r.rows[k].x, 0.1);
    }
    return acc / static_cast<double>(n);
  };
  const double f4 = floor_at(0.04), f2 = floor_at(0.02), f1 = floor_at(0.01);
  CHECK(f4 > 0.0);
  // Halving eta at least halves the floor, with a factor-2 allowance.
  CHECK(f2 <= f4);
  CHECK(f1 <= f2);
  CHECK(f4 <= 0.04);
}

TEST_CASE("ablation table structure") {
  OptimizerSpec spec;
  spec.family = Family::Adam;
  spec.eta = LearningRate::cosine(1e-2, 0.0, 300);
  spec.lambda = 0.5;
  AblationOptions opts;
  opts.seeds = 3;
  opts.steps = 300;
  opts.sigma = 0.01;
  const AblationTable t = ablation_suite(spec, opts);
  CHECK(AblationTable::variants().size() == 5);
  CHECK(t.rows.size() == 2 * 3 * 5);
  CHECK(t.seeds() == 3);
  for (const auto& obj : opts.objectives) {
    for (int s = 0; s < 3; ++s) {
      const AblationRow& ref = t.at(obj, s, DecayKind::Cautious);
      CHECK(ref.ratio_schedule.size() == 300);
      CHECK(t.at(obj, s, DecayKind::RandomMask).ratio_schedule == ref.ratio_schedule);
      std::set<std::vector<double>> inits;
      for (DecayKind v : AblationTable::variants()) {
        const auto vals = t.at(obj, s, v).x0.values();
        inits.insert(std::vector<double>(vals.begin(), vals.end()));
      }
      CHECK(inits.size() == 1);
    }
  }
  std::ostringstream csv;
  write_ablation_csv(csv, t);
  std::size_t lines = 0;
  for (char c : csv.str()) lines += c == '\n';
  CHECK(lines >= 31);
  CHECK(t.wins(DecayKind::Cautious, DecayKind::Cautious) == 3);
  CHECK_THROWS(t.at("nope", 0, DecayKind::Cautious));
}

TEST_CASE("three-way comparison needs positive lambda") {
  Fig3Options opts;
  opts.lambda = 0.0;
  CHECK_THROWS_AS(figure3_repro(opts), ConfigError);
}

TEST_CASE("short three-way comparison produces one run per variant") {
  Fig3Options opts;
  opts.inits = 2;
  opts.steps = 200;
  opts.objectives = {"toy_parabola"};
  const auto runs = figure3_repro(opts);
  CHECK(runs.size() == 2 * 3);
  const auto j = fig3_json(runs);
  REQUIRE(j.is_array());
  CHECK(j.size() == runs.size());
}

TEST_CASE("sweep runs configs in parallel and reports failures") {
  TempDir tmp("cwd_harness_sweep");
  const fs::path cfg_dir = tmp.path / "configs";
  fs::create_directories(cfg_dir);
  std::vector<fs::path> configs;
  for (int k = 0; k < 4; ++k) {
    const fs::path p = cfg_dir / ("run" + std::to_string(k) + ".ini");
    std::ofstream(p) << "[optimizer]\nfamily = sgd\neta = 0.01\nlambda = 0.1\n[run]\nsteps = 100\nx0 = 1, 2\nseed = "
                     << k << "\n";
    configs.push_back(p);
  }
  const fs::path bad = cfg_dir / "bad.ini";
  std::ofstream(bad) << "[run]\nsteps = -5\n";
  configs.push_back(bad);
  const fs::path boom = cfg_dir / "boom.ini";
  std::ofstream(boom) << "[optimizer]\nfamily = sgd\neta = 1\n[run]\nsteps = 500\nx0 = 10, 10\n";
  configs.push_back(boom);

  const auto entries = sweep(configs, tmp.path / "out", ConfigOverrides{}, 3);
  REQUIRE(entries.size() == configs.size());
  for (int k = 0; k < 4; ++k) {
    CHECK(entries[k].exit_code == 0);
    REQUIRE(entries[k].summary.has_value());
    CHECK(entries[k].summary->seed == static_cast<std::uint64_t>(k));
    CHECK(fs::exists(tmp.path / "out" / ("run" + std::to_string(k)) / "trajectory.csv"));
  }
  CHECK(entries[4].exit_code == 2);
  CHECK_FALSE(entries[4].error.empty());
  CHECK(entries[5].exit_code == 3);

  // Same result single-threaded.
  const auto serial = sweep(configs, tmp.path / "out_serial", ConfigOverrides{}, 1);
  CHECK(slurp(tmp.path / "out" / "run2" / "trajectory.csv") == slurp(tmp.path / "out_serial" / "run2" / "trajectory.csv"));
}

TEST_CASE("flow configs") {
  TempDir tmp("cwd_harness_flow");
  const fs::path p = tmp.path / "flow.ini";
  std::ofstream(p) << "[objective]\nname = toy_parabola\n[flow]\nfamily = adam\nalpha = 1\ngamma = 1\nlambda = 0.5\n"
                      "h = 0.001\nhorizon = 1\nt0 = 0.01\nstride = 100\nx0 = 5, 5\nv0 = grad2\n";
  const FlowRunConfig fc = load_flow_config(p);
  CHECK(fc.flow.family() == FlowFamily::Adam);
  CHECK(fc.v0_from_gradient);
  CHECK(fc.flow.stride == 100);
  const Objective obj = objective_by_name(fc.objective);
  const Trajectory traj = integrate(fc.flow, obj, fc.x0);
  const auto rows = flow_rows(traj, obj, fc.flow, true);
  CHECK(rows.size() == 11);
  for (const auto& r : rows) CHECK(std::isfinite(r.H));

  std::ofstream(p) << "[flow]\nfamily = adam\nbogus = 1\n";
  CHECK_THROWS_AS(load_flow_config(p), ConfigError);
}

TEST_CASE("pareto verdict labels") {
  const Objective f = toy_parabola();
  CHECK(pareto_json(pareto_check({3.0, 3.0}, f))["verdict"] == "pareto");
  CHECK(pareto_json(pareto_check({5.0, 7.0}, f))["verdict"] == "dominated");
  const auto far = pareto_json(pareto_check({2.18, 3.65}, f));
  CHECK(far["verdict"] == "off_manifold");
  CHECK(far["on_manifold"] == false);
}
