#include "cwd/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include <boost/math/distributions/students_t.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "cwd/random.hpp"

namespace cwd {

namespace pt = boost::property_tree;

namespace {

constexpr double kDivergenceBox = 1e6;
const double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

ParamVector parse_vector(const std::string& text, const std::string& what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    cell = trim(cell);
    if (cell.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stod(cell, &used));
      if (used != cell.size()) throw std::invalid_argument(cell);
    } catch (const std::exception&) {
      throw ConfigError(what + ": not a number '" + cell + "'");
    }
  }
  return ParamVector(std::move(out));
}

double parse_double(const std::string& text, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(trim(text), &used);
    if (used != trim(text).size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(what + ": not a number '" + text + "'");
  }
}

std::int64_t parse_int(const std::string& text, const std::string& what) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(trim(text), &used);
    if (used != trim(text).size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(what + ": not an integer '" + text + "'");
  }
}

bool parse_bool(const std::string& text, const std::string& what) {
  const std::string t = trim(text);
  if (t == "1" || t == "true" || t == "yes" || t == "on") return true;
  if (t == "0" || t == "false" || t == "no" || t == "off") return false;
  throw ConfigError(what + ": not a boolean '" + text + "'");
}

std::map<std::string, std::string> section(const pt::ptree& tree, const std::string& name) {
  std::map<std::string, std::string> kv;
  if (auto child = tree.get_child_optional(name)) {
    for (const auto& [key, node] : *child) kv[key] = trim(node.data());
  }
  return kv;
}

void reject_unknown(const std::map<std::string, std::string>& kv, std::initializer_list<const char*> known,
                    const std::string& where) {
  for (const auto& [key, _] : kv) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
      throw ConfigError("unknown key '" + key + "' in [" + where + "]");
    }
  }
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  if (path.is_relative() && !base.empty()) return base / path;
  return path;
}

pt::ptree read_ini(std::istream& in) {
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  return tree;
}

pt::ptree read_ini_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  return read_ini(in);
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<double> to_std(const ParamVector& v) { return {v.begin(), v.end()}; }

double inclusive_gate_ratio(FlowFamily fam, const ParamVector& gate, const ParamVector& x) {
  if (x.dim() == 0) return kNaN;
  std::size_t on = 0;
  for (std::size_t i = 0; i < x.dim(); ++i) {
    const double p = gate[i] * x[i];
    on += fam == FlowFamily::LionK ? (p <= 0.0) : (p >= 0.0);
  }
  return static_cast<double>(on) / static_cast<double>(x.dim());
}

bool outside_box(const ParamVector& x) {
  for (double v : x) {
    if (!std::isfinite(v) || std::abs(v) > kDivergenceBox) return true;
  }
  return false;
}

unsigned worker_count(unsigned requested, std::size_t jobs) {
  unsigned n = requested ? requested : std::max(1u, std::thread::hardware_concurrency());
  return static_cast<unsigned>(std::min<std::size_t>(n, std::max<std::size_t>(jobs, 1)));
}

// Runs job(i) for i in [0, n) on a pool; the first exception is rethrown.
template <class Job>
void parallel_for(std::size_t n, unsigned threads, Job job) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        job(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    for (unsigned k = 0; k < worker_count(threads, n); ++k) pool.emplace_back(worker);
  }
  if (error) std::rethrow_exception(error);
}

}  // namespace

ParamVector InitSpec::draw(std::size_t dim, std::uint64_t seed) const {
  if (point) {
    if (point->dim() != dim) throw ConfigError("x0 has dimension " + std::to_string(point->dim()) + ", objective " + std::to_string(dim));
    return *point;
  }
  std::mt19937_64 rng = named_stream(seed, "init");
  std::uniform_real_distribution<double> u(lo, hi);
  ParamVector x(dim, 0.0);
  for (std::size_t i = 0; i < dim; ++i) x[i] = u(rng);
  return x;
}

void ExperimentConfig::validate(std::size_t dim) const {
  if (steps < 1) throw ConfigError("steps must be >= 1");
  if (stride < 1) throw ConfigError("stride must be >= 1");
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ConfigError("sigma must be finite and >= 0");
  if (n_batch < 1) throw ConfigError("n_batch must be >= 1");
  if (!x0.point && !(x0.lo < x0.hi)) throw ConfigError("x0 box needs x0_lo < x0_hi");
  if (x0.point && x0.point->dim() != dim) throw ConfigError("x0 does not match the objective dimension");
  try {
    optimizer.validate(dim);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (optimizer.decay.kind == DecayKind::RandomMask &&
      static_cast<std::int64_t>(optimizer.decay.ratio_schedule.size()) < steps) {
    throw ConfigError("random mask schedule is shorter than the run");
  }
}

void ConfigOverrides::apply(ExperimentConfig& cfg) const {
  if (seed) cfg.seed = *seed;
  if (stride) cfg.stride = *stride;
  if (out) cfg.out = *out;
  if (emit_lyapunov) cfg.emit_lyapunov = true;
}

ExperimentConfig parse_config(std::istream& in, const std::filesystem::path& base_dir) {
  const pt::ptree tree = read_ini(in);
  for (const auto& [name, _] : tree) {
    if (name != "objective" && name != "optimizer" && name != "run" && name != "rate" && name != "ablation") {
      throw ConfigError("unknown section [" + name + "]");
    }
  }
  ExperimentConfig cfg;
  auto obj = section(tree, "objective");
  reject_unknown(obj, {"name"}, "objective");
  if (obj.contains("name")) {
    cfg.objective = obj["name"];
    if (cfg.objective.rfind("quadratic:", 0) == 0) {
      cfg.objective = "quadratic:" + resolve(base_dir, cfg.objective.substr(10)).string();
    }
  }
  auto opt = section(tree, "optimizer");
  if (opt.contains("ratio_schedule")) opt["ratio_schedule"] = resolve(base_dir, opt["ratio_schedule"]).string();
  try {
    cfg.optimizer = spec_from_key_values(opt);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  auto r = section(tree, "run");
  reject_unknown(r, {"steps", "seed", "stride", "sigma", "n_batch", "x0", "x0_lo", "x0_hi", "out", "emit_lyapunov"},
                 "run");
  if (r.contains("steps")) cfg.steps = parse_int(r["steps"], "steps");
  if (r.contains("seed")) cfg.seed = static_cast<std::uint64_t>(parse_int(r["seed"], "seed"));
  if (r.contains("stride")) {
    const auto s = parse_int(r["stride"], "stride");
    if (s < 1) throw ConfigError("stride must be >= 1");
    cfg.stride = static_cast<std::size_t>(s);
  }
  if (r.contains("sigma")) cfg.sigma = parse_double(r["sigma"], "sigma");
  if (r.contains("n_batch")) cfg.n_batch = static_cast<int>(parse_int(r["n_batch"], "n_batch"));
  if (r.contains("x0")) cfg.x0.point = parse_vector(r["x0"], "x0");
  if (r.contains("x0_lo")) cfg.x0.lo = parse_double(r["x0_lo"], "x0_lo");
  if (r.contains("x0_hi")) cfg.x0.hi = parse_double(r["x0_hi"], "x0_hi");
  if (r.contains("out")) cfg.out = resolve(base_dir, r["out"]);
  if (r.contains("emit_lyapunov")) cfg.emit_lyapunov = parse_bool(r["emit_lyapunov"], "emit_lyapunov");
  if (cfg.steps < 1) throw ConfigError("steps must be >= 1");
  cfg.rate_section = section(tree, "rate");
  reject_unknown(cfg.rate_section, {"horizons", "seeds", "c", "c_prime", "sigma", "threads"}, "rate");
  cfg.ablation_section = section(tree, "ablation");
  reject_unknown(cfg.ablation_section, {"objectives", "seeds", "steps", "sigma", "n_batch", "threads"}, "ablation");
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  return parse_config(in, path.parent_path());
}

double discrete_lyapunov(const OptimizerSpec& spec, const Objective& obj, const ParamVector& x,
                         const OptState& state, double eta) {
  if (!(eta > 0.0)) return kNaN;
  const double f = obj.value(x);
  const double lambda = spec.decay.kind == DecayKind::None ? 0.0 : spec.lambda;
  switch (spec.family) {
    case Family::SGD:
      return lyapunov_sgd(f);
    case Family::SGDM:
      return lyapunov_sgdm(f, state.m, x, (1.0 - spec.beta) / eta, lambda);
    case Family::Lion: {
      const double a = (1.0 - spec.beta2) / eta;
      return lyapunov_lionk(f, elementwise(ElementOp::mul, state.m, -1.0), x, a, lambda, ConvexMap::l1);
    }
    case Family::LionK: {
      const double a = (1.0 - spec.beta2) / eta;
      return lyapunov_lionk(f, state.m, x, a, lambda, spec.k_map, spec.shape);
    }
    case Family::Adam: {
      LyapunovSpec ls;
      ls.family = FlowFamily::Adam;
      ls.alpha = (1.0 - spec.beta1) / eta;
      ls.gamma = (1.0 - spec.beta2) / eta;
      ls.lambda = lambda;
      ls.epsilon = spec.epsilon;
      if (!(ls.gamma > 0.0 && ls.gamma <= 4.0 * ls.alpha && ls.epsilon > 0.0)) return kNaN;
      // state.t is the index of the next step; the state holds t-1 updates.
      const double t = eta * static_cast<double>(std::max<std::int64_t>(state.t - 1, 0));
      if (!(t > 0.0)) {
        // Before the first update m = 0, and H tends to alpha f as t -> 0.
        return norms(state.m).linf == 0.0 ? ls.alpha * f : kNaN;
      }
      return lyapunov_adam(f, state.m, state.v, x, t, ls);
    }
    case Family::Muon:
      return kNaN;
  }
  return kNaN;
}

RunResult run(const ExperimentConfig& cfg, const Objective& obj) {
  const auto start = std::chrono::steady_clock::now();
  const std::size_t d = obj.dim();
  cfg.validate(d);
  const OptimizerSpec& spec = cfg.optimizer;

  ParamVector x = cfg.x0.draw(d, cfg.seed);
  OptState st(d, cfg.seed);
  StochasticGradientSource noise(obj, cfg.sigma, cfg.n_batch, derive_seed(cfg.seed, "noise"));

  RunResult res;
  double time = 0.0;
  auto log_row = [&](std::int64_t step, double ratio, double eta_for_h) {
    TrajectoryRow row;
    row.step = step;
    row.time = time;
    row.x = x;
    row.m = st.m;
    row.loss = obj.value(x);
    row.grad_norm = norms(obj.gradient(x)).l2;
    row.H = cfg.emit_lyapunov ? discrete_lyapunov(spec, obj, x, st, eta_for_h) : kNaN;
    row.mask_ratio = ratio;
    res.rows.push_back(std::move(row));
  };
  log_row(0, kNaN, spec.eta(1));

  bool diverged = false;
  std::int64_t done = 0;
  for (std::int64_t t = 1; t <= cfg.steps; ++t) {
    const ParamVector g = cfg.sigma > 0.0 ? noise.sample(x) : obj.gradient(x);
    const double eta = spec.eta(st.t);
    try {
      x = step(spec, st, x, g);
    } catch (const NumericalError&) {
      diverged = true;
    }
    time += eta;
    done = t;
    const double ratio = st.last_ratio.inclusive;
    res.ratio_per_step.push_back(ratio);
    if (diverged || outside_box(x)) {
      diverged = true;
      log_row(t, ratio, eta);
      break;
    }
    if (t % static_cast<std::int64_t>(cfg.stride) == 0 || t == cfg.steps) log_row(t, ratio, eta);
  }

  RunSummary& s = res.summary;
  s.objective = cfg.objective;
  s.family = to_string(spec.family);
  s.decay = to_string(spec.decay.kind);
  s.seed = cfg.seed;
  s.steps = cfg.steps;
  s.completed_steps = done;
  s.stride = cfg.stride;
  s.rows = res.rows.size();
  s.final_loss = res.rows.back().loss;
  s.final_grad_norm = res.rows.back().grad_norm;
  double acc = 0.0;
  for (std::size_t k = 1; k < res.rows.size(); ++k) acc += res.rows[k].mask_ratio;
  s.mean_mask_ratio = res.rows.size() > 1 ? acc / static_cast<double>(res.rows.size() - 1) : kNaN;
  s.diverged = diverged;
  s.final_x = x;
  s.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

RunResult run(const ExperimentConfig& cfg) {
  Objective obj = [&] {
    try {
      return objective_by_name(cfg.objective);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }();
  return run(cfg, obj);
}

void write_trajectory_csv(std::ostream& out, const std::vector<TrajectoryRow>& rows, std::uint64_t seed,
                          const std::string& label) {
  if (rows.empty()) throw std::invalid_argument("write_trajectory_csv: no rows");
  const std::size_t d = rows.front().x.dim();
  out << "# seed=" << seed << ' ' << label << '\n';
  out << "step,time";
  for (std::size_t i = 0; i < d; ++i) out << ",x_" << i;
  for (std::size_t i = 0; i < d; ++i) out << ",m_" << i;
  out << ",loss,grad_norm,H,mask_ratio\n";
  for (const TrajectoryRow& r : rows) {
    out << r.step << ',' << fmt(r.time);
    for (double v : r.x) out << ',' << fmt(v);
    for (std::size_t i = 0; i < d; ++i) out << ',' << fmt(r.m.empty() ? 0.0 : r.m[i]);
    out << ',' << fmt(r.loss) << ',' << fmt(r.grad_norm) << ',' << fmt(r.H) << ',' << fmt(r.mask_ratio) << '\n';
  }
}

std::vector<TrajectoryRow> read_trajectory_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open trajectory " + path.string());
  std::string line;
  std::vector<std::string> header;
  std::vector<TrajectoryRow> rows;
  std::size_t d = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (header.empty()) {
      header = cells;
      if (header.size() < 6 || header[0] != "step" || header[1] != "time" || header.back() != "mask_ratio") {
        throw ConfigError(path.string() + ": unexpected header");
      }
      d = (header.size() - 6) / 2;
      continue;
    }
    if (cells.size() != header.size()) throw ConfigError(path.string() + ": ragged row");
    TrajectoryRow r;
    r.step = std::stoll(cells[0]);
    r.time = std::stod(cells[1]);
    r.x = ParamVector(d, 0.0);
    r.m = ParamVector(d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
      r.x[i] = std::stod(cells[2 + i]);
      r.m[i] = std::stod(cells[2 + d + i]);
    }
    r.loss = std::stod(cells[2 + 2 * d]);
    r.grad_norm = std::stod(cells[3 + 2 * d]);
    r.H = std::stod(cells[4 + 2 * d]);
    r.mask_ratio = std::stod(cells[5 + 2 * d]);
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw ConfigError(path.string() + ": no rows");
  return rows;
}

nlohmann::json summary_json(const RunSummary& s) {
  nlohmann::json j;
  j["objective"] = s.objective;
  j["family"] = s.family;
  j["decay"] = s.decay;
  j["seed"] = s.seed;
  j["steps"] = s.steps;
  j["completed_steps"] = s.completed_steps;
  j["stride"] = s.stride;
  j["rows"] = s.rows;
  j["final_loss"] = s.final_loss;
  j["final_grad_norm"] = s.final_grad_norm;
  j["mean_mask_ratio"] = std::isfinite(s.mean_mask_ratio) ? nlohmann::json(s.mean_mask_ratio) : nlohmann::json();
  j["wall_time_s"] = s.wall_time_s;
  j["diverged"] = s.diverged;
  j["final_x"] = to_std(s.final_x);
  return j;
}

bool summary_matches_rows(const nlohmann::json& summary, const std::vector<TrajectoryRow>& rows, double rel_tol) {
  if (rows.empty()) return false;
  auto close = [rel_tol](double a, double b) { return std::abs(a - b) <= rel_tol * std::max({1.0, std::abs(a), std::abs(b)}); };
  const TrajectoryRow& last = rows.back();
  if (summary.at("rows").get<std::size_t>() != rows.size()) return false;
  if (summary.at("completed_steps").get<std::int64_t>() != last.step) return false;
  if (!close(summary.at("final_loss").get<double>(), last.loss)) return false;
  if (!close(summary.at("final_grad_norm").get<double>(), last.grad_norm)) return false;
  const auto fx = summary.at("final_x").get<std::vector<double>>();
  if (fx.size() != last.x.dim()) return false;
  for (std::size_t i = 0; i < fx.size(); ++i) {
    if (!close(fx[i], last.x[i])) return false;
  }
  if (rows.size() > 1) {
    double acc = 0.0;
    for (std::size_t k = 1; k < rows.size(); ++k) acc += rows[k].mask_ratio;
    if (!close(summary.at("mean_mask_ratio").get<double>(), acc / static_cast<double>(rows.size() - 1))) return false;
  }
  return true;
}

void write_run(const RunResult& r, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create output directory " + dir.string() + ": " + ec.message());
  {
    std::ofstream csv(dir / "trajectory.csv");
    if (!csv) throw ConfigError("cannot write " + (dir / "trajectory.csv").string());
    write_trajectory_csv(csv, r.rows, r.summary.seed,
                         "objective=" + r.summary.objective + " family=" + r.summary.family + " decay=" + r.summary.decay);
  }
  std::ofstream js(dir / "summary.json");
  if (!js) throw ConfigError("cannot write " + (dir / "summary.json").string());
  js << summary_json(r.summary).dump(2) << '\n';
}

FlowRunConfig load_flow_config(const std::filesystem::path& path) {
  const pt::ptree tree = read_ini_file(path);
  FlowRunConfig fc;
  auto obj = section(tree, "objective");
  reject_unknown(obj, {"name"}, "objective");
  if (obj.contains("name")) {
    fc.objective = obj["name"];
    if (fc.objective.rfind("quadratic:", 0) == 0) {
      fc.objective = "quadratic:" + resolve(path.parent_path(), fc.objective.substr(10)).string();
    }
  }
  auto f = section(tree, "flow");
  reject_unknown(f,
                 {"family", "alpha", "beta", "gamma", "lambda", "epsilon", "k", "rows", "cols", "decay", "integrator",
                  "h", "horizon", "t0", "stride", "x0", "m0", "v0", "seed", "out"},
                 "flow");
  try {
    LyapunovSpec& p = fc.flow.params;
    if (f.contains("family")) p.family = parse_flow_family(f["family"]);
    if (f.contains("alpha")) p.alpha = parse_double(f["alpha"], "alpha");
    if (f.contains("beta")) p.beta = parse_double(f["beta"], "beta");
    if (f.contains("gamma")) p.gamma = parse_double(f["gamma"], "gamma");
    if (f.contains("lambda")) p.lambda = parse_double(f["lambda"], "lambda");
    if (f.contains("epsilon")) p.epsilon = parse_double(f["epsilon"], "epsilon");
    if (f.contains("k")) p.k_map = parse_convex_map(f["k"]);
    if (f.contains("rows")) p.shape.rows = static_cast<std::size_t>(parse_int(f["rows"], "rows"));
    if (f.contains("cols")) p.shape.cols = static_cast<std::size_t>(parse_int(f["cols"], "cols"));
    if (f.contains("decay")) fc.flow.decay = parse_decay(f["decay"]);
    if (f.contains("integrator")) {
      if (f["integrator"] == "euler") {
        fc.flow.integrator = Integrator::euler;
      } else if (f["integrator"] == "rk4") {
        fc.flow.integrator = Integrator::rk4;
      } else {
        throw ConfigError("unknown integrator '" + f["integrator"] + "'");
      }
    }
    if (f.contains("h")) fc.flow.h = parse_double(f["h"], "h");
    if (f.contains("horizon")) fc.flow.horizon = parse_double(f["horizon"], "horizon");
    if (f.contains("t0")) fc.flow.t0 = parse_double(f["t0"], "t0");
    if (f.contains("stride")) {
      const auto s = parse_int(f["stride"], "stride");
      if (s < 1) throw ConfigError("stride must be >= 1");
      fc.flow.stride = static_cast<std::size_t>(s);
    }
    if (!f.contains("x0")) throw ConfigError("[flow] needs x0");
    fc.x0 = parse_vector(f["x0"], "x0");
    if (f.contains("m0")) fc.m0 = parse_vector(f["m0"], "m0");
    if (f.contains("v0")) {
      if (f["v0"] == "grad2") {
        fc.v0_from_gradient = true;
      } else {
        fc.v0 = parse_vector(f["v0"], "v0");
      }
    }
    if (f.contains("seed")) fc.seed = static_cast<std::uint64_t>(parse_int(f["seed"], "seed"));
    if (f.contains("out")) fc.out = resolve(path.parent_path(), f["out"]);
    fc.flow.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return fc;
}

std::vector<TrajectoryRow> flow_rows(const Trajectory& traj, const Objective& obj, const FlowSpec& flow,
                                     bool emit_lyapunov) {
  std::vector<TrajectoryRow> rows;
  rows.reserve(traj.samples.size());
  for (std::size_t k = 0; k < traj.samples.size(); ++k) {
    const FlowSample& s = traj.samples[k];
    TrajectoryRow r;
    r.step = static_cast<std::int64_t>(std::llround((s.t - flow.t0) / flow.h));
    r.time = s.t;
    r.x = s.x;
    r.m = s.m.empty() ? ParamVector(s.x.dim(), 0.0) : s.m;
    const ParamVector g = obj.gradient(s.x);
    r.loss = obj.value(s.x);
    r.grad_norm = norms(g).l2;
    r.H = emit_lyapunov ? lyapunov_value(flow.params, r.loss, s) : kNaN;
    r.mask_ratio = inclusive_gate_ratio(flow.family(), flow.family() == FlowFamily::SGD ? g : s.m, s.x);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<SweepEntry> sweep(const std::vector<std::filesystem::path>& configs, const std::filesystem::path& out_root,
                              const ConfigOverrides& overrides, unsigned threads) {
  std::vector<SweepEntry> entries(configs.size());
  parallel_for(configs.size(), threads, [&](std::size_t i) {
    SweepEntry& e = entries[i];
    e.config = configs[i];
    try {
      ExperimentConfig cfg = load_config(configs[i]);
      overrides.apply(cfg);
      cfg.out = out_root / configs[i].stem();
      RunResult r = run(cfg);
      write_run(r, cfg.out);
      e.exit_code = r.summary.diverged ? 3 : 0;
      e.summary = std::move(r.summary);
    } catch (const ConfigError& ex) {
      e.exit_code = 2;
      e.error = ex.what();
    } catch (const std::invalid_argument& ex) {
      e.exit_code = 2;
      e.error = ex.what();
    } catch (const NumericalError& ex) {
      e.exit_code = 3;
      e.error = ex.what();
    }
  });
  return entries;
}

double stationarity(const ParamVector& g, const ParamVector& x, double lambda) {
  require_same_dim(g, x, "stationarity");
  double s = 0.0;
  for (std::size_t i = 0; i < x.dim(); ++i) s += g[i] * g[i];
  if (lambda != 0.0) {
    double conflict = 0.0;
    for (std::size_t i = 0; i < x.dim(); ++i) conflict += positive_part(g[i] * x[i]);
    s += lambda * conflict;
  }
  return s;
}

RateReport rate_experiment(const Objective& obj, const OptimizerSpec& spec, const RateOptions& opts) {
  if (opts.horizons.size() < 3) throw ConfigError("rate_experiment needs at least 3 horizons");
  if (opts.seeds < 1) throw ConfigError("rate_experiment needs at least one seed");
  if (!(opts.c > 0.0) || !(opts.c_prime > 0.0)) throw ConfigError("rate_experiment needs c, c' > 0");
  if (spec.family == Family::Adam && (!(spec.epsilon > 0.0) || spec.beta1 > spec.beta2)) {
    throw ConfigError("rate_experiment needs epsilon > 0 and beta1 <= beta2");
  }
  const std::size_t nT = opts.horizons.size();
  const std::size_t nS = static_cast<std::size_t>(opts.seeds);
  std::vector<double> s_avg(nT * nS, 0.0), r_max(nT * nS, 0.0), g_max(nT * nS, 0.0);
  const std::size_t d = obj.dim();

  parallel_for(nT * nS, opts.threads, [&](std::size_t job) {
    const std::size_t ti = job / nS, si = job % nS;
    const std::int64_t T = opts.horizons[ti];
    if (T < 1) throw ConfigError("horizons must be >= 1");
    const std::uint64_t seed = opts.seed + si;
    OptimizerSpec sp = spec;
    sp.eta = LearningRate::constant(opts.c / std::sqrt(static_cast<double>(T)));
    const int n_batch = static_cast<int>(std::ceil(static_cast<double>(T) / opts.c_prime));
    sp.validate(d);
    ParamVector x = opts.x0.draw(d, seed);
    OptState st(d, seed);
    StochasticGradientSource noise(obj, opts.sigma, n_batch, derive_seed(seed, "noise"));
    double acc = 0.0, R = 0.0, G = 0.0;
    for (std::int64_t t = 0; t < T; ++t) {
      const ParamVector g_true = obj.gradient(x);
      acc += stationarity(g_true, x, sp.lambda);
      R = std::max(R, norms(x).linf);
      G = std::max(G, norms(g_true).linf);
      const ParamVector g = opts.sigma > 0.0 ? noise.sample(x) : g_true;
      x = step(sp, st, x, g);
      if (outside_box(x)) throw NumericalError("rate_experiment: iterate left the divergence box", 0);
    }
    s_avg[job] = acc / static_cast<double>(T);
    r_max[job] = R;
    g_max[job] = G;
  });

  RateReport rep;
  std::vector<double> lx, ly;
  for (std::size_t ti = 0; ti < nT; ++ti) {
    RateRow row;
    row.T = opts.horizons[ti];
    row.eta = opts.c / std::sqrt(static_cast<double>(row.T));
    row.n_batch = static_cast<int>(std::ceil(static_cast<double>(row.T) / opts.c_prime));
    double mean = 0.0;
    for (std::size_t si = 0; si < nS; ++si) mean += s_avg[ti * nS + si];
    mean /= static_cast<double>(nS);
    double var = 0.0;
    for (std::size_t si = 0; si < nS; ++si) var += (s_avg[ti * nS + si] - mean) * (s_avg[ti * nS + si] - mean);
    row.S_avg = mean;
    row.S_stderr = nS > 1 ? std::sqrt(var / static_cast<double>(nS - 1) / static_cast<double>(nS)) : 0.0;
    if (!(mean > 0.0)) throw NumericalError("rate_experiment: S_avg is not positive, cannot fit a log slope", ti);
    lx.push_back(std::log(static_cast<double>(row.T)));
    ly.push_back(std::log(mean));
    rep.rows.push_back(row);
  }
  for (std::size_t k = 0; k < nT * nS; ++k) {
    rep.R = std::max(rep.R, r_max[k]);
    rep.G = std::max(rep.G, g_max[k]);
  }

  const double n = static_cast<double>(nT);
  const double mx = std::accumulate(lx.begin(), lx.end(), 0.0) / n;
  const double my = std::accumulate(ly.begin(), ly.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t k = 0; k < nT; ++k) {
    sxx += (lx[k] - mx) * (lx[k] - mx);
    sxy += (lx[k] - mx) * (ly[k] - my);
  }
  if (!(sxx > 0.0)) throw ConfigError("rate_experiment: horizons must be distinct");
  rep.slope = sxy / sxx;
  rep.intercept = my - rep.slope * mx;
  double ssr = 0.0;
  for (std::size_t k = 0; k < nT; ++k) {
    const double r = ly[k] - (rep.intercept + rep.slope * lx[k]);
    ssr += r * r;
  }
  const double se = std::sqrt(ssr / (n - 2.0) / sxx);
  const boost::math::students_t dist(n - 2.0);
  const double q = boost::math::quantile(boost::math::complement(dist, 0.025));
  rep.slope_ci_low = rep.slope - q * se;
  rep.slope_ci_high = rep.slope + q * se;
  const double box = std::max(rep.R, 1e-3);
  rep.L = estimate_smoothness(obj, -box, box, 2000, opts.seed);
  return rep;
}

nlohmann::json rate_json(const RateReport& r) {
  nlohmann::json j;
  j["rows"] = nlohmann::json::array();
  for (const RateRow& row : r.rows) {
    j["rows"].push_back({{"T", row.T}, {"eta", row.eta}, {"n_batch", row.n_batch}, {"S_avg", row.S_avg},
                         {"S_stderr", row.S_stderr}});
  }
  j["slope"] = r.slope;
  j["intercept"] = r.intercept;
  j["slope_ci95"] = {r.slope_ci_low, r.slope_ci_high};
  j["R"] = r.R;
  j["G"] = r.G;
  j["L"] = r.L;
  return j;
}

RateOptions rate_options(const ExperimentConfig& cfg) {
  RateOptions o;
  auto kv = cfg.rate_section;
  if (kv.contains("horizons")) {
    o.horizons.clear();
    for (double v : parse_vector(kv["horizons"], "horizons")) {
      if (v < 1 || v != std::floor(v)) throw ConfigError("horizons must be positive integers");
      o.horizons.push_back(static_cast<std::int64_t>(v));
    }
  }
  if (kv.contains("seeds")) o.seeds = static_cast<int>(parse_int(kv["seeds"], "seeds"));
  if (kv.contains("c")) o.c = parse_double(kv["c"], "c");
  if (kv.contains("c_prime")) o.c_prime = parse_double(kv["c_prime"], "c_prime");
  if (kv.contains("sigma")) o.sigma = parse_double(kv["sigma"], "sigma");
  if (kv.contains("threads")) o.threads = static_cast<unsigned>(parse_int(kv["threads"], "threads"));
  o.x0 = cfg.x0;
  o.seed = cfg.seed;
  return o;
}

AblationOptions ablation_options(const ExperimentConfig& cfg) {
  AblationOptions o;
  auto kv = cfg.ablation_section;
  if (kv.contains("objectives")) {
    o.objectives.clear();
    std::stringstream ss(kv["objectives"]);
    std::string name;
    while (std::getline(ss, name, ',')) {
      if (!trim(name).empty()) o.objectives.push_back(trim(name));
    }
  }
  if (kv.contains("seeds")) o.seeds = static_cast<int>(parse_int(kv["seeds"], "seeds"));
  o.steps = kv.contains("steps") ? parse_int(kv["steps"], "steps") : cfg.steps;
  o.sigma = kv.contains("sigma") ? parse_double(kv["sigma"], "sigma") : cfg.sigma;
  o.n_batch = kv.contains("n_batch") ? static_cast<int>(parse_int(kv["n_batch"], "n_batch")) : cfg.n_batch;
  if (kv.contains("threads")) o.threads = static_cast<unsigned>(parse_int(kv["threads"], "threads"));
  o.x0 = cfg.x0;
  o.seed = cfg.seed;
  return o;
}

const std::vector<DecayKind>& AblationTable::variants() {
  static const std::vector<DecayKind> v{DecayKind::Decoupled, DecayKind::Cautious, DecayKind::RandomMask,
                                        DecayKind::CautiousGradientMask, DecayKind::None};
  return v;
}

const AblationRow& AblationTable::at(const std::string& objective, int seed_index, DecayKind variant) const {
  for (const AblationRow& r : rows) {
    if (r.objective == objective && r.seed_index == seed_index && r.variant == variant) return r;
  }
  throw std::out_of_range("ablation row not found: " + objective + " " + to_string(variant));
}

int AblationTable::seeds() const {
  int n = 0;
  for (const AblationRow& r : rows) n = std::max(n, r.seed_index + 1);
  return n;
}

int AblationTable::wins(DecayKind a, DecayKind b) const {
  std::map<int, std::pair<double, double>> sums;
  for (const AblationRow& r : rows) {
    if (r.variant == a) sums[r.seed_index].first += r.final_loss;
    if (r.variant == b) sums[r.seed_index].second += r.final_loss;
  }
  int n = 0;
  for (const auto& [_, s] : sums) n += s.first <= s.second;
  return n;
}

AblationTable ablation_suite(const OptimizerSpec& base_spec, const AblationOptions& opts) {
  if (base_spec.decay.kind != DecayKind::Cautious) throw ConfigError("ablation_suite: base spec must use cautious decay");
  if (opts.seeds < 1 || opts.objectives.empty()) throw ConfigError("ablation_suite: need seeds and objectives");
  const std::size_t nO = opts.objectives.size();
  const std::size_t nS = static_cast<std::size_t>(opts.seeds);
  std::vector<std::vector<AblationRow>> blocks(nO * nS);

  parallel_for(nO * nS, opts.threads, [&](std::size_t job) {
    const std::size_t si = job / nO, oi = job % nO;
    const Objective obj = objective_by_name(opts.objectives[oi]);
    ExperimentConfig cfg;
    cfg.objective = opts.objectives[oi];
    cfg.steps = opts.steps;
    cfg.sigma = opts.sigma;
    cfg.n_batch = opts.n_batch;
    cfg.seed = opts.seed + si;
    cfg.stride = static_cast<std::size_t>(std::max<std::int64_t>(opts.steps, 1));
    cfg.x0.point = opts.x0.draw(obj.dim(), cfg.seed);

    auto make_row = [&](DecayKind kind, const RunResult& r, std::vector<double> schedule) {
      AblationRow row;
      row.objective = opts.objectives[oi];
      row.family = to_string(base_spec.family);
      row.variant = kind;
      row.seed_index = static_cast<int>(si);
      row.seed = cfg.seed;
      row.x0 = *cfg.x0.point;
      row.final_loss = r.summary.final_loss;
      row.final_grad_norm = r.summary.final_grad_norm;
      double acc = 0.0;
      for (double v : r.ratio_per_step) acc += v;
      row.mean_mask_ratio = r.ratio_per_step.empty() ? kNaN : acc / static_cast<double>(r.ratio_per_step.size());
      row.ratio_schedule = std::move(schedule);
      return row;
    };

    cfg.optimizer = base_spec;
    const RunResult reference = run(cfg, obj);
    const std::vector<double> schedule = reference.ratio_per_step;
    std::vector<AblationRow> out;
    for (DecayKind kind : AblationTable::variants()) {
      if (kind == DecayKind::Cautious) {
        out.push_back(make_row(kind, reference, schedule));
        continue;
      }
      cfg.optimizer = base_spec;
      cfg.optimizer.decay = kind == DecayKind::RandomMask ? DecayMode::random(schedule) : DecayMode{kind, {}};
      const RunResult r = run(cfg, obj);
      out.push_back(make_row(kind, r, kind == DecayKind::RandomMask ? cfg.optimizer.decay.ratio_schedule
                                                                    : std::vector<double>{}));
    }
    blocks[job] = std::move(out);
  });

  AblationTable table;
  for (auto& b : blocks) {
    for (auto& r : b) table.rows.push_back(std::move(r));
  }
  return table;
}

void write_ablation_csv(std::ostream& out, const AblationTable& t) {
  out << "objective,family,variant,seed,final_loss,final_grad_norm,mean_mask_ratio\n";
  for (const AblationRow& r : t.rows) {
    out << r.objective << ',' << r.family << ',' << to_string(r.variant) << ',' << r.seed << ',' << fmt(r.final_loss)
        << ',' << fmt(r.final_grad_norm) << ',' << fmt(r.mean_mask_ratio) << '\n';
  }
}

nlohmann::json pareto_json(const ParetoVerdict& v) {
  nlohmann::json j;
  j["point"] = to_std(v.point);
  j["on_manifold"] = v.on_manifold;
  if (!v.on_manifold) {
    j["verdict"] = "off_manifold";
  } else {
    j["verdict"] = v.inconclusive ? "inconclusive" : (v.locally_pareto ? "pareto" : "dominated");
  }
  j["locally_pareto"] = v.locally_pareto;
  j["witness"] = v.witness ? nlohmann::json(to_std(*v.witness)) : nlohmann::json();
  j["probes_used"] = v.probes_used;
  j["probes_discarded"] = v.probes_discarded;
  return j;
}

std::vector<Fig3Run> figure3_repro(const Fig3Options& opts) {
  if (!(opts.lambda > 0.0)) throw ConfigError("figure3_repro needs lambda > 0");
  if (opts.inits < 1 || opts.steps < 1) throw ConfigError("figure3_repro needs inits >= 1 and steps >= 1");
  struct Job {
    std::string objective;
    Family family;
    int init;
  };
  std::vector<Job> jobs;
  for (const auto& o : opts.objectives) {
    for (Family f : opts.families) {
      for (int i = 0; i < opts.inits; ++i) jobs.push_back({o, f, i});
    }
  }
  const std::vector<DecayKind> variants{DecayKind::None, DecayKind::Decoupled, DecayKind::Cautious};
  std::vector<Fig3Run> runs(jobs.size() * variants.size());
  if (!opts.out.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(opts.out, ec);
    if (ec) throw std::runtime_error("cannot create " + opts.out.string());
  }

  parallel_for(runs.size(), 0, [&](std::size_t k) {
    const Job& job = jobs[k / variants.size()];
    const DecayKind variant = variants[k % variants.size()];
    const Objective obj = objective_by_name(job.objective);
    ExperimentConfig cfg;
    cfg.objective = job.objective;
    cfg.steps = opts.steps;
    cfg.stride = opts.stride;
    cfg.seed = opts.seed + static_cast<std::uint64_t>(job.init);
    cfg.x0.point = opts.x0.draw(obj.dim(), cfg.seed);
    OptimizerSpec& sp = cfg.optimizer;
    sp.family = job.family;
    sp.eta = LearningRate::cosine(opts.eta, opts.eta_min, opts.steps);
    sp.beta1 = opts.beta1;
    sp.beta2 = opts.beta2;
    sp.epsilon = opts.epsilon;
    sp.lambda = variant == DecayKind::None ? 0.0 : opts.lambda;
    sp.decay = DecayMode{variant, {}};
    const RunResult r = run(cfg, obj);

    Fig3Run& out = runs[k];
    out.objective = job.objective;
    out.family = to_string(job.family);
    out.variant = variant;
    out.init_index = job.init;
    out.x0 = *cfg.x0.point;
    out.final_x = r.summary.final_x;
    out.final_loss = r.summary.final_loss;
    out.final_grad_inf = norms(obj.gradient(out.final_x)).linf;
    out.diverged = r.summary.diverged;
    out.fixed_point = fixed_point_check(out.final_x, sp, obj);
    ParetoOptions po = opts.pareto;
    po.seed = derive_seed(cfg.seed, "pareto");
    out.pareto = pareto_check(out.final_x, obj, po);
    if (!opts.out.empty()) {
      const auto file = opts.out / (job.objective + "_" + out.family + "_" + to_string(variant) + "_" +
                                    std::to_string(job.init) + ".csv");
      std::ofstream csv(file);
      if (!csv) throw std::runtime_error("cannot write " + file.string());
      write_trajectory_csv(csv, r.rows, cfg.seed, "objective=" + job.objective + " decay=" + to_string(variant));
    }
  });
  return runs;
}

nlohmann::json fig3_json(const std::vector<Fig3Run>& runs) {
  nlohmann::json arr = nlohmann::json::array();
  for (const Fig3Run& r : runs) {
    nlohmann::json j;
    j["objective"] = r.objective;
    j["family"] = r.family;
    j["variant"] = to_string(r.variant);
    j["init"] = r.init_index;
    j["x0"] = to_std(r.x0);
    j["final_x"] = to_std(r.final_x);
    j["final_loss"] = r.final_loss;
    j["final_grad_inf"] = r.final_grad_inf;
    j["diverged"] = r.diverged;
    j["fixed_point"] = {{"grad_inf", r.fixed_point.grad_inf},   {"x_inf", r.fixed_point.x_inf},
                        {"box_bound", r.fixed_point.box_bound}, {"kkt_residual", r.fixed_point.kkt_residual},
                        {"stationary", r.fixed_point.stationary}, {"inside_box", r.fixed_point.inside_box},
                        {"passed", r.fixed_point.passed}};
    j["pareto"] = pareto_json(r.pareto);
    arr.push_back(std::move(j));
  }
  return arr;
}

}  // namespace cwd
