#pragma once

// Experiment plumbing: INI configs, discrete runs with CSV/JSON output,
// parallel sweeps, the stationarity-rate experiment, the decay ablation and
// the three-way Adam / AdamW / Adam+CWD comparison on the toy objectives.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "cwd/continuous.hpp"
#include "cwd/lyapunov.hpp"
#include "cwd/objectives.hpp"
#include "cwd/optimizers.hpp"

namespace cwd {

/// Invalid or inconsistent configuration (CLI exit code 2).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Initial point: explicit, or uniform in [lo, hi]^d from the "init" stream.
struct InitSpec {
  std::optional<ParamVector> point;
  double lo = -1.0;
  double hi = 1.0;

  ParamVector draw(std::size_t dim, std::uint64_t seed) const;
};

struct ExperimentConfig {
  std::string objective = "toy_parabola";
  OptimizerSpec optimizer{};
  InitSpec x0{};
  std::int64_t steps = 1000;
  double sigma = 0.0;
  int n_batch = 1;
  std::size_t stride = 1;
  std::uint64_t seed = 0;
  bool emit_lyapunov = false;
  std::filesystem::path out;  // empty: nothing written
  // Raw [rate] and [ablation] sections, read by rate_options / ablation_options.
  std::map<std::string, std::string> rate_section;
  std::map<std::string, std::string> ablation_section;

  /// Throws ConfigError.
  void validate(std::size_t dim) const;
};

/// Command-line overrides applied on top of a loaded config.
struct ConfigOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> stride;
  std::optional<std::filesystem::path> out;
  bool emit_lyapunov = false;

  void apply(ExperimentConfig& cfg) const;
};

/// Sections [objective] (name), [optimizer] (see spec_from_key_values) and
/// [run] (steps, seed, stride, sigma, n_batch, x0 | x0_lo + x0_hi, out,
/// emit_lyapunov). Relative paths resolve against `base_dir`.
ExperimentConfig parse_config(std::istream& in, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);

struct TrajectoryRow {
  std::int64_t step = 0;
  double time = 0.0;  // sum of learning rates so far
  ParamVector x;
  ParamVector m;
  double loss = 0.0;
  double grad_norm = 0.0;
  double H = 0.0;           // NaN unless Lyapunov output is requested and defined
  double mask_ratio = 0.0;  // NaN on the initial row
};

struct RunSummary {
  std::string objective;
  std::string family;
  std::string decay;
  std::uint64_t seed = 0;
  std::int64_t steps = 0;
  std::int64_t completed_steps = 0;
  std::size_t stride = 1;
  std::size_t rows = 0;
  double final_loss = 0.0;
  double final_grad_norm = 0.0;
  double mean_mask_ratio = 0.0;  // over logged rows after the initial one
  double wall_time_s = 0.0;
  bool diverged = false;
  ParamVector final_x;
};

struct RunResult {
  std::vector<TrajectoryRow> rows;
  RunSummary summary;
  std::vector<double> ratio_per_step;  // inclusive cautious-mask ratio, one per step
};

/// Discrete run. Deterministic given cfg.seed; stops early and sets
/// summary.diverged when some |x_i| leaves the divergence box.
RunResult run(const ExperimentConfig& cfg, const Objective& obj);
RunResult run(const ExperimentConfig& cfg);

/// Lyapunov value of a discrete optimizer state under the matching flow
/// coefficients (Adam: alpha = (1-beta1)/eta, gamma = (1-beta2)/eta, t = eta step;
/// SGDM: beta = (1-beta)/eta; Lion: m -> -m, alpha = gamma = (1-beta2)/eta).
/// NaN for Muon, trace-norm Lion-K, or coefficient sets outside the flow's domain.
double discrete_lyapunov(const OptimizerSpec& spec, const Objective& obj, const ParamVector& x,
                         const OptState& state, double eta);

void write_trajectory_csv(std::ostream& out, const std::vector<TrajectoryRow>& rows, std::uint64_t seed,
                          const std::string& label);
std::vector<TrajectoryRow> read_trajectory_csv(const std::filesystem::path& path);
nlohmann::json summary_json(const RunSummary& s);
/// Recomputes the summary fields derivable from the rows and compares.
bool summary_matches_rows(const nlohmann::json& summary, const std::vector<TrajectoryRow>& rows, double rel_tol = 1e-12);
/// Writes trajectory.csv and summary.json under dir. Throws ConfigError
/// if the directory cannot be written.
void write_run(const RunResult& r, const std::filesystem::path& dir);

/// Integrates the [flow] section of a config:
/// family, alpha, beta, gamma, lambda, epsilon, k, decay, integrator, h,
/// horizon, t0, stride, x0, m0, v0 (v0 = grad2 starts at grad f(x0)^2).
struct FlowRunConfig {
  std::string objective = "toy_parabola";
  FlowSpec flow{};
  ParamVector x0;
  ParamVector m0;
  ParamVector v0;
  bool v0_from_gradient = false;
  std::uint64_t seed = 0;
  std::filesystem::path out;
};
FlowRunConfig load_flow_config(const std::filesystem::path& path);
std::vector<TrajectoryRow> flow_rows(const Trajectory& traj, const Objective& obj, const FlowSpec& flow,
                                     bool emit_lyapunov);

struct SweepEntry {
  std::filesystem::path config;
  std::optional<RunSummary> summary;
  std::string error;
  int exit_code = 0;  // 0 ok, 2 config error, 3 divergence
};

/// Runs every config on a worker pool. Each run writes to out_root/<stem>/.
std::vector<SweepEntry> sweep(const std::vector<std::filesystem::path>& configs, const std::filesystem::path& out_root,
                              const ConfigOverrides& overrides, unsigned threads = 0);

/// ||g||^2 + lambda ||(g x)^+||_1
double stationarity(const ParamVector& g, const ParamVector& x, double lambda);

struct RateOptions {
  std::vector<std::int64_t> horizons{100, 1000, 10000};
  int seeds = 10;
  double c = 0.5;         // eta = c / sqrt(T)
  double c_prime = 10.0;  // n_batch = ceil(T / c')
  double sigma = 1.0;
  InitSpec x0{};
  std::uint64_t seed = 0;
  unsigned threads = 0;
};

struct RateRow {
  std::int64_t T = 0;
  double eta = 0.0;
  int n_batch = 1;
  double S_avg = 0.0;
  double S_stderr = 0.0;
};

struct RateReport {
  std::vector<RateRow> rows;
  double slope = 0.0;
  double intercept = 0.0;
  double slope_ci_low = 0.0;   // 95%
  double slope_ci_high = 0.0;
  double R = 0.0;  // max ||x_t||_inf over all runs
  double G = 0.0;  // max ||grad f(x_t)||_inf over all runs
  double L = 0.0;  // smoothness estimate on the iterate box
};

/// Rate check. For each T sets eta = c/sqrt(T) and
/// n_batch = ceil(T/c'), averages S over seeds, fits log S_avg against log T.
/// Throws ConfigError for fewer than 3 horizons or Adam with epsilon <= 0 or
/// beta1 > beta2.
RateReport rate_experiment(const Objective& obj, const OptimizerSpec& spec, const RateOptions& opts);
nlohmann::json rate_json(const RateReport& r);
/// [rate] keys: horizons (comma list), seeds, c, c_prime, sigma, threads;
/// x0 / seed come from [run].
RateOptions rate_options(const ExperimentConfig& cfg);

struct AblationOptions {
  std::vector<std::string> objectives{"toy_hyperbola", "toy_parabola"};
  int seeds = 10;
  std::int64_t steps = 4000;
  double sigma = 0.0;
  int n_batch = 1;
  InitSpec x0{std::nullopt, 0.0, 6.0};
  std::uint64_t seed = 0;
  unsigned threads = 0;
};

struct AblationRow {
  std::string objective;
  std::string family;
  DecayKind variant = DecayKind::Cautious;
  int seed_index = 0;
  std::uint64_t seed = 0;
  ParamVector x0;
  double final_loss = 0.0;
  double final_grad_norm = 0.0;
  double mean_mask_ratio = 0.0;
  std::vector<double> ratio_schedule;  // reference r_t (Cautious) or the copied schedule (RandomMask)
};

struct AblationTable {
  std::vector<AblationRow> rows;

  static const std::vector<DecayKind>& variants();
  const AblationRow& at(const std::string& objective, int seed_index, DecayKind variant) const;
  /// Seeds whose final loss summed over the objectives is no larger for
  /// `a` than for `b`.
  int wins(DecayKind a, DecayKind b) const;
  int seeds() const;
};

/// Runs the five decay variants from identical inits and noise. The Cautious
/// run goes first; its recorded mask ratios become the RandomMask schedule.
AblationTable ablation_suite(const OptimizerSpec& base_spec, const AblationOptions& opts);
/// [ablation] keys: objectives (comma list), seeds, steps, sigma, n_batch,
/// threads; x0 box and seed come from [run].
AblationOptions ablation_options(const ExperimentConfig& cfg);
void write_ablation_csv(std::ostream& out, const AblationTable& t);

struct Fig3Options {
  double lambda = 0.5;
  std::vector<Family> families{Family::Adam};
  std::vector<std::string> objectives{"toy_hyperbola", "toy_parabola"};
  int inits = 5;
  std::int64_t steps = 50000;
  double eta = 1e-2;
  double eta_min = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  InitSpec x0{std::nullopt, 0.0, 6.0};
  std::uint64_t seed = 0;
  std::size_t stride = 100;
  std::filesystem::path out;  // one CSV per run when set
  ParetoOptions pareto{};
};

struct Fig3Run {
  std::string objective;
  std::string family;
  DecayKind variant = DecayKind::None;
  int init_index = 0;
  ParamVector x0;
  ParamVector final_x;
  double final_loss = 0.0;
  double final_grad_inf = 0.0;
  bool diverged = false;
  FixedPointReport fixed_point;
  ParetoVerdict pareto;
};

/// Adam (no decay), AdamW (decoupled) and Adam+CWD from identical inits with
/// shared (eta, beta1, beta2, epsilon), with fixed-point and Pareto verdicts.
/// Throws ConfigError when lambda <= 0.
std::vector<Fig3Run> figure3_repro(const Fig3Options& opts);
nlohmann::json fig3_json(const std::vector<Fig3Run>& runs);

nlohmann::json pareto_json(const ParetoVerdict& v);

}  // namespace cwd
