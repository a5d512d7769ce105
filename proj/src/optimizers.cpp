#include "cwd/optimizers.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "cwd/random.hpp"

namespace cwd {

double LearningRate::operator()(std::int64_t t) const {
  switch (kind) {
    case ScheduleKind::constant:
      return base;
    case ScheduleKind::cosine: {
      const double frac = std::clamp(static_cast<double>(t - 1) / static_cast<double>(std::max<std::int64_t>(horizon, 1)),
                                     0.0, 1.0);
      return final_value + 0.5 * (base - final_value) * (1.0 + std::cos(std::numbers::pi * frac));
    }
    case ScheduleKind::inverse_sqrt:
      return base / std::sqrt(static_cast<double>(std::max<std::int64_t>(t, 1)));
    case ScheduleKind::custom:
      if (!callback) throw std::invalid_argument("custom learning rate without a callback");
      return callback(t);
  }
  return base;
}

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

bool in_unit_interval(double b) { return b >= 0.0 && b < 1.0; }

}  // namespace

void OptimizerSpec::validate(std::size_t dim) const {
  require(dim >= 1, "optimizer: parameter dimension must be positive");
  require(std::isfinite(lambda) && lambda >= 0.0, "optimizer: lambda must be >= 0");
  require(std::isfinite(epsilon) && epsilon >= 0.0, "optimizer: epsilon must be >= 0");
  require(eta.kind == ScheduleKind::custom || (std::isfinite(eta.base) && eta.base > 0.0),
          "optimizer: learning rate must be positive");
  require(eta.kind != ScheduleKind::cosine || (eta.final_value >= 0.0 && eta.horizon >= 1),
          "optimizer: cosine schedule needs final >= 0 and horizon >= 1");
  switch (family) {
    case Family::SGD:
      break;
    case Family::SGDM:
      require(in_unit_interval(beta), "SGDM: beta must lie in [0, 1)");
      break;
    case Family::Adam:
      require(beta1 >= 0.0 && beta1 <= beta2 && beta2 < 1.0, "Adam: need 0 <= beta1 <= beta2 < 1");
      break;
    case Family::Lion:
    case Family::LionK:
      require(in_unit_interval(beta1) && in_unit_interval(beta2), "Lion: beta1, beta2 must lie in [0, 1)");
      break;
    case Family::Muon:
      require(in_unit_interval(beta), "Muon: beta must lie in [0, 1)");
      break;
  }
  const bool needs_shape = family == Family::Muon || (family == Family::LionK && k_map == ConvexMap::trace);
  if (needs_shape) {
    require(shape.rows >= 1 && shape.cols >= 1 && shape.size() == dim,
            "optimizer: matrix shape " + std::to_string(shape.rows) + "x" + std::to_string(shape.cols) +
                " does not match dim " + std::to_string(dim));
  }
  if (decay.kind == DecayKind::RandomMask) {
    require(!decay.ratio_schedule.empty(), "RandomMask: a ratio schedule is required");
    for (double r : decay.ratio_schedule) require(r >= 0.0 && r <= 1.0, "RandomMask: ratios must lie in [0, 1]");
  }
}

OptState::OptState(std::size_t dim, std::uint64_t mask_seed)
    : m(dim, 0.0), v(dim, 0.0), last_mask(dim, 0.0), last_update(dim, 0.0), mask_rng(named_stream(mask_seed, "mask")) {}

ParamVector cwd_mask(const ParamVector& u, const ParamVector& x) {
  require_same_dim(u, x, "cwd_mask");
  ParamVector mask(u.dim());
  for (std::size_t i = 0; i < u.dim(); ++i) mask[i] = (u[i] * x[i] >= 0.0) ? 1.0 : 0.0;
  return mask;
}

ParamVector apply_ablation_mask(const DecayMode& mode, const ParamVector& u, const ParamVector& g,
                                const ParamVector& x, std::mt19937_64& rng, std::int64_t t) {
  switch (mode.kind) {
    case DecayKind::None:
      return ParamVector(x.dim(), 0.0);
    case DecayKind::Decoupled:
      return ParamVector(x.dim(), 1.0);
    case DecayKind::Cautious:
      return cwd_mask(u, x);
    case DecayKind::CautiousGradientMask:
      return cwd_mask(g, x);
    case DecayKind::RandomMask: {
      if (t < 1 || static_cast<std::size_t>(t) > mode.ratio_schedule.size()) {
        throw std::invalid_argument("RandomMask: no recorded ratio for step " + std::to_string(t));
      }
      const double p = mode.ratio_schedule[static_cast<std::size_t>(t - 1)];
      if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("RandomMask: ratio outside [0, 1]");
      std::bernoulli_distribution coin(p);
      ParamVector mask(x.dim());
      for (std::size_t i = 0; i < x.dim(); ++i) mask[i] = coin(rng) ? 1.0 : 0.0;
      return mask;
    }
  }
  throw std::invalid_argument("unknown decay mode");
}

MaskRatio mask_ratio(const OptState& state) {
  if (!state.stepped) throw std::logic_error("mask_ratio: no step has been taken");
  return state.last_ratio;
}

namespace {

void check_inputs(const OptimizerSpec& spec, const OptState& state, const ParamVector& x, const ParamVector& g,
                  Family expected) {
  if (spec.family != expected) throw std::invalid_argument("optimizer step called for the wrong family");
  require_same_dim(x, g, "optimizer step");
  if (state.m.dim() != x.dim()) throw DimensionError("optimizer state dimension does not match parameters");
  require_finite(g.values(), "optimizer gradient");
}

MaskRatio ratio_of(const ParamVector& u, const ParamVector& x) {
  std::size_t incl = 0, strict = 0;
  for (std::size_t i = 0; i < x.dim(); ++i) {
    const double p = u[i] * x[i];
    incl += p >= 0.0 ? 1 : 0;
    strict += p > 0.0 ? 1 : 0;
  }
  const double d = static_cast<double>(x.dim());
  return {static_cast<double>(incl) / d, static_cast<double>(strict) / d};
}

// Records diagnostics and applies x - eta * (u + lambda * mask * x). The decay
// term is left out entirely when lambda == 0 or decay is off, so those runs
// match the undecayed optimizer bit for bit.
ParamVector finish_step(const OptimizerSpec& spec, OptState& state, const ParamVector& x, const ParamVector& g,
                        ParamVector u, const ParamVector& gate) {
  const double eta = spec.eta(state.t);
  if (!(eta > 0.0) || !std::isfinite(eta)) throw NumericalError("learning rate must be positive and finite", 0);
  state.last_ratio = ratio_of(gate, x);
  ParamVector out(x.dim());
  const bool decays = spec.lambda > 0.0 && spec.decay.kind != DecayKind::None;
  if (decays) {
    state.last_mask = apply_ablation_mask(spec.decay, gate, g, x, state.mask_rng, state.t);
    const double lambda = spec.lambda;
    for (std::size_t i = 0; i < x.dim(); ++i) out[i] = x[i] - eta * (u[i] + lambda * state.last_mask[i] * x[i]);
  } else {
    state.last_mask = ParamVector(x.dim(), 0.0);
    for (std::size_t i = 0; i < x.dim(); ++i) out[i] = x[i] - eta * u[i];
  }
  require_finite(out.values(), "optimizer update");
  state.last_update = std::move(u);
  state.stepped = true;
  ++state.t;
  return out;
}

}  // namespace

ParamVector step_sgd(const OptimizerSpec& spec, OptState& state, const ParamVector& x, const ParamVector& g) {
  check_inputs(spec, state, x, g, Family::SGD);
  return finish_step(spec, state, x, g, g, g);
}

ParamVector step_sgdm(const OptimizerSpec& spec, OptState& state, const ParamVector& x, const ParamVector& g) {
  check_inputs(spec, state, x, g, Family::SGDM);
  for (std::size_t i = 0; i < x.dim(); ++i) state.m[i] = spec.beta * state.m[i] + (1.0 - spec.beta) * g[i];
  const ParamVector m = state.m;
  return finish_step(spec, state, x, g, m, m);
}

ParamVector step_adam(const OptimizerSpec& spec, OptState& state, const ParamVector& x, const ParamVector& g) {
  check_inputs(spec, state, x, g, Family::Adam);
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(spec.beta1, t);
  const double c2 = 1.0 - std::pow(spec.beta2, t);
  ParamVector u(x.dim());
  for (std::size_t i = 0; i < x.dim(); ++i) {
    state.m[i] = spec.beta1 * state.m[i] + (1.0 - spec.beta1) * g[i];
    state.v[i] = spec.beta2 * state.v[i] + (1.0 - spec.beta2) * g[i] * g[i];
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    const double denom = std::sqrt(v_hat) + spec.epsilon;
    if (denom == 0.0) throw NumericalError("Adam: zero denominator (epsilon = 0 and v_hat = 0)", i);
    u[i] = m_hat / denom;
  }
  // The mask follows the uncorrected first moment.
  const ParamVector gate = state.m;
  return finish_step(spec, state, x, g, std::move(u), gate);
}

ParamVector step_lion(const OptimizerSpec& spec, OptState& state, const ParamVector& x, const ParamVector& g) {
  check_inputs(spec, state, x, g, Family::Lion);
  ParamVector filtered(x.dim()), u(x.dim());
  for (std::size_t i = 0; i < x.dim(); ++i) {
    filtered[i] = spec.beta1 * state.m[i] + (1.0 - spec.beta1) * g[i];
    u[i] = sign(filtered[i]);
  }
  for (std::size_t i = 0; i < x.dim(); ++i) state.m[i] = spec.beta2 * state.m[i] + (1.0 - spec.beta2) * g[i];
  return finish_step(spec, state, x, g, std::move(u), filtered);
}

ParamVector convex_map_gradient(ConvexMap k, const ParamVector& m, MatrixShape shape) {
  switch (k) {
    case ConvexMap::l1:
      return elementwise(ElementOp::sign, m);
    case ConvexMap::trace:
      return polar_factor(m, shape);
  }
  throw std::invalid_argument("unknown convex map");
}

double convex_map_value(ConvexMap k, const ParamVector& m, MatrixShape shape) {
  switch (k) {
    case ConvexMap::l1:
      return norms(m).l1;
    case ConvexMap::trace:
      return trace_norm(m, shape);
  }
  throw std::invalid_argument("unknown convex map");
}

ParamVector step_lionk(const OptimizerSpec& spec, OptState& state, const ParamVector& x, const ParamVector& g) {
  check_inputs(spec, state, x, g, Family::LionK);
  ParamVector filtered(x.dim());
  for (std::size_t i = 0; i < x.dim(); ++i) filtered[i] = spec.beta1 * state.m[i] - (1.0 - spec.beta1) * g[i];
  const ParamVector ascent = convex_map_gradient(spec.k_map, filtered, spec.shape);
  for (std::size_t i = 0; i < x.dim(); ++i) state.m[i] = spec.beta2 * state.m[i] - (1.0 - spec.beta2) * g[i];

  const double eta = spec.eta(state.t);
  if (!(eta > 0.0) || !std::isfinite(eta)) throw NumericalError("learning rate must be positive and finite", 0);
  ParamVector u(x.dim());
  for (std::size_t i = 0; i < x.dim(); ++i) u[i] = -ascent[i];
  state.last_ratio = ratio_of(u, x);

  ParamVector out(x.dim());
  const bool decays = spec.lambda > 0.0 && spec.decay.kind != DecayKind::None;
  if (decays) {
    if (spec.decay.kind == DecayKind::Cautious) {
      // I(dK * x <= 0), as listed for the ascent form.
      ParamVector mask(x.dim());
      for (std::size_t i = 0; i < x.dim(); ++i) mask[i] = (ascent[i] * x[i] <= 0.0) ? 1.0 : 0.0;
      state.last_mask = std::move(mask);
    } else {
      state.last_mask = apply_ablation_mask(spec.decay, u, g, x, state.mask_rng, state.t);
    }
    for (std::size_t i = 0; i < x.dim(); ++i) {
      out[i] = x[i] + eta * (ascent[i] - spec.lambda * state.last_mask[i] * x[i]);
    }
  } else {
    state.last_mask = ParamVector(x.dim(), 0.0);
    for (std::size_t i = 0; i < x.dim(); ++i) out[i] = x[i] + eta * ascent[i];
  }
  require_finite(out.values(), "optimizer update");
  state.last_update = std::move(u);
  state.stepped = true;
  ++state.t;
  return out;
}

ParamVector step_muon(const OptimizerSpec& spec, OptState& state, const ParamVector& x, const ParamVector& g) {
  check_inputs(spec, state, x, g, Family::Muon);
  if (spec.shape.size() != x.dim()) throw DimensionError("Muon: matrix shape does not match parameter dimension");
  for (std::size_t i = 0; i < x.dim(); ++i) state.m[i] = spec.beta * state.m[i] + g[i];
  ParamVector o = newton_schulz_sign(state.m, spec.shape, spec.newton_schulz);
  const ParamVector gate = o;
  return finish_step(spec, state, x, g, std::move(o), gate);
}

ParamVector step(const OptimizerSpec& spec, OptState& state, const ParamVector& x, const ParamVector& g) {
  switch (spec.family) {
    case Family::SGD:
      return step_sgd(spec, state, x, g);
    case Family::SGDM:
      return step_sgdm(spec, state, x, g);
    case Family::Adam:
      return step_adam(spec, state, x, g);
    case Family::Lion:
      return step_lion(spec, state, x, g);
    case Family::LionK:
      return step_lionk(spec, state, x, g);
    case Family::Muon:
      return step_muon(spec, state, x, g);
  }
  throw std::invalid_argument("unknown optimizer family");
}

std::string to_string(Family f) {
  switch (f) {
    case Family::SGD:
      return "sgd";
    case Family::SGDM:
      return "sgdm";
    case Family::Adam:
      return "adam";
    case Family::Lion:
      return "lion";
    case Family::LionK:
      return "lionk";
    case Family::Muon:
      return "muon";
  }
  return "?";
}

std::string to_string(DecayKind k) {
  switch (k) {
    case DecayKind::None:
      return "none";
    case DecayKind::Decoupled:
      return "decoupled";
    case DecayKind::Cautious:
      return "cautious";
    case DecayKind::CautiousGradientMask:
      return "gradient";
    case DecayKind::RandomMask:
      return "random";
  }
  return "?";
}

std::string to_string(ConvexMap k) { return k == ConvexMap::l1 ? "l1" : "trace"; }

Family parse_family(const std::string& s) {
  for (Family f : {Family::SGD, Family::SGDM, Family::Adam, Family::Lion, Family::LionK, Family::Muon}) {
    if (to_string(f) == s) return f;
  }
  throw std::invalid_argument("unknown optimizer family '" + s + "'");
}

DecayKind parse_decay(const std::string& s) {
  for (DecayKind k : {DecayKind::None, DecayKind::Decoupled, DecayKind::Cautious, DecayKind::CautiousGradientMask,
                      DecayKind::RandomMask}) {
    if (to_string(k) == s) return k;
  }
  throw std::invalid_argument("unknown decay mode '" + s + "'");
}

ConvexMap parse_convex_map(const std::string& s) {
  if (s == "l1") return ConvexMap::l1;
  if (s == "trace") return ConvexMap::trace;
  throw std::invalid_argument("unknown convex map '" + s + "'");
}

namespace {

std::string num(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

double parse_num(const std::map<std::string, std::string>& kv, const std::string& key, double fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    std::size_t used = 0;
    const double v = std::stod(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw std::invalid_argument("optimizer key '" + key + "': not a number: '" + it->second + "'");
  }
}

}  // namespace

std::map<std::string, std::string> to_key_values(const OptimizerSpec& spec) {
  std::map<std::string, std::string> kv;
  kv["family"] = to_string(spec.family);
  switch (spec.eta.kind) {
    case ScheduleKind::constant:
      kv["schedule"] = "constant";
      break;
    case ScheduleKind::cosine:
      kv["schedule"] = "cosine";
      kv["eta_min"] = num(spec.eta.final_value);
      kv["horizon"] = std::to_string(spec.eta.horizon);
      break;
    case ScheduleKind::inverse_sqrt:
      kv["schedule"] = "inverse_sqrt";
      break;
    case ScheduleKind::custom:
      throw std::invalid_argument("custom learning-rate callbacks cannot be serialized");
  }
  kv["eta"] = num(spec.eta.base);
  kv["beta1"] = num(spec.beta1);
  kv["beta2"] = num(spec.beta2);
  kv["beta"] = num(spec.beta);
  kv["epsilon"] = num(spec.epsilon);
  kv["lambda"] = num(spec.lambda);
  kv["decay"] = to_string(spec.decay.kind);
  kv["k"] = to_string(spec.k_map);
  kv["rows"] = std::to_string(spec.shape.rows);
  kv["cols"] = std::to_string(spec.shape.cols);
  kv["ns_quintic_steps"] = std::to_string(spec.newton_schulz.quintic_steps);
  kv["ns_polish_steps"] = std::to_string(spec.newton_schulz.polish_steps);
  return kv;
}

OptimizerSpec spec_from_key_values(const std::map<std::string, std::string>& kv) {
  static const std::vector<std::string> known = {"family", "schedule", "eta",   "eta_min", "horizon",
                                                 "beta1",  "beta2",    "beta",  "epsilon", "lambda",
                                                 "decay",  "k",        "rows",  "cols",    "ns_quintic_steps",
                                                 "ns_polish_steps",    "ratio_schedule"};
  for (const auto& [key, value] : kv) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw std::invalid_argument("unknown optimizer key '" + key + "'");
    }
  }
  OptimizerSpec spec;
  if (auto it = kv.find("family"); it != kv.end()) spec.family = parse_family(it->second);
  const double eta = parse_num(kv, "eta", spec.eta.base);
  const std::string schedule = kv.contains("schedule") ? kv.at("schedule") : "constant";
  if (schedule == "constant") {
    spec.eta = LearningRate::constant(eta);
  } else if (schedule == "cosine") {
    spec.eta = LearningRate::cosine(eta, parse_num(kv, "eta_min", 0.0),
                                    static_cast<std::int64_t>(parse_num(kv, "horizon", 1.0)));
  } else if (schedule == "inverse_sqrt") {
    spec.eta = LearningRate::inverse_sqrt(eta);
  } else {
    throw std::invalid_argument("unknown schedule '" + schedule + "'");
  }
  spec.beta1 = parse_num(kv, "beta1", spec.beta1);
  spec.beta2 = parse_num(kv, "beta2", spec.beta2);
  spec.beta = parse_num(kv, "beta", spec.beta);
  spec.epsilon = parse_num(kv, "epsilon", spec.epsilon);
  spec.lambda = parse_num(kv, "lambda", spec.lambda);
  if (auto it = kv.find("decay"); it != kv.end()) spec.decay.kind = parse_decay(it->second);
  if (auto it = kv.find("k"); it != kv.end()) spec.k_map = parse_convex_map(it->second);
  spec.shape.rows = static_cast<std::size_t>(parse_num(kv, "rows", 1.0));
  spec.shape.cols = static_cast<std::size_t>(parse_num(kv, "cols", 1.0));
  spec.newton_schulz.quintic_steps = static_cast<int>(parse_num(kv, "ns_quintic_steps", spec.newton_schulz.quintic_steps));
  spec.newton_schulz.polish_steps = static_cast<int>(parse_num(kv, "ns_polish_steps", spec.newton_schulz.polish_steps));
  if (auto it = kv.find("ratio_schedule"); it != kv.end()) spec.decay.ratio_schedule = load_ratio_schedule(it->second);
  return spec;
}

std::vector<double> load_ratio_schedule(const std::filesystem::path& csv) {
  std::ifstream in(csv);
  if (!in) throw std::invalid_argument("cannot open ratio schedule " + csv.string());
  std::string line;
  std::size_t column = std::string::npos;
  std::vector<double> out;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (column == std::string::npos) {
      auto it = std::find(cells.begin(), cells.end(), "mask_ratio");
      if (it == cells.end()) throw std::invalid_argument(csv.string() + ": no mask_ratio column");
      column = static_cast<std::size_t>(it - cells.begin());
      continue;
    }
    if (column >= cells.size()) throw std::invalid_argument(csv.string() + ": short row");
    const double r = std::stod(cells[column]);
    if (std::isfinite(r)) out.push_back(r);
  }
  return out;
}

void save_checkpoint(const OptState& state, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.precision(17);
  out << "# step=" << state.t << "\n";
  out << "coordinate,m,v\n";
  for (std::size_t i = 0; i < state.m.dim(); ++i) out << i << ',' << state.m[i] << ',' << state.v[i] << '\n';
}

OptState load_checkpoint(const std::filesystem::path& path, std::uint64_t mask_seed) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open checkpoint " + path.string());
  std::string line;
  std::int64_t t = -1;
  std::vector<double> m, v;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.starts_with("# step=")) {
      t = std::stoll(line.substr(7));
      continue;
    }
    if (!header) {
      if (line != "coordinate,m,v") throw std::invalid_argument(path.string() + ": bad checkpoint header");
      header = true;
      continue;
    }
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string c0, c1, c2;
    std::getline(ss, c0, ',');
    std::getline(ss, c1, ',');
    std::getline(ss, c2, ',');
    if (std::stoul(c0) != m.size()) throw std::invalid_argument(path.string() + ": coordinates out of order");
    m.push_back(std::stod(c1));
    v.push_back(std::stod(c2));
  }
  if (t < 1 || m.empty()) throw std::invalid_argument(path.string() + ": incomplete checkpoint");
  OptState state(m.size(), mask_seed);
  state.t = t;
  state.m = ParamVector(std::move(m));
  state.v = ParamVector(std::move(v));
  return state;
}

}  // namespace cwd
