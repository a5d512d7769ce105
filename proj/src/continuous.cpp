#include "cwd/continuous.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

#include "cwd/random.hpp"

namespace cwd {

void FlowSpec::validate() const {
  params.validate();
  if (!(h > 0.0) || !std::isfinite(h)) throw std::invalid_argument("FlowSpec: step h must be positive");
  if (!(horizon >= 0.0) || !std::isfinite(horizon)) throw std::invalid_argument("FlowSpec: horizon must be >= 0");
  if (stride == 0) throw std::invalid_argument("FlowSpec: stride must be >= 1");
  if (params.family == FlowFamily::Adam && !(t0 > 0.0)) {
    throw std::invalid_argument("FlowSpec: Adam flow needs t0 > 0");
  }
  if (decay == DecayKind::CautiousGradientMask || decay == DecayKind::RandomMask) {
    throw std::invalid_argument("FlowSpec: only none, decoupled and cautious decay have a flow");
  }
}

namespace {

double indicator(DecayKind kind, bool cautious_on) {
  switch (kind) {
    case DecayKind::None:
      return 0.0;
    case DecayKind::Decoupled:
      return 1.0;
    default:
      return cautious_on ? 1.0 : 0.0;
  }
}

double bias_factor(double c, double t) { return -1.0 / std::expm1(-c * t); }

FlowSample axpy(const FlowSample& z, double c, const FlowSample& k) {
  FlowSample out = z;
  out.t = z.t + c;
  for (std::size_t i = 0; i < z.x.dim(); ++i) out.x[i] += c * k.x[i];
  for (std::size_t i = 0; i < z.m.dim(); ++i) out.m[i] += c * k.m[i];
  for (std::size_t i = 0; i < z.v.dim(); ++i) out.v[i] += c * k.v[i];
  return out;
}

}  // namespace

FlowSample flow_rhs(const FlowSpec& flow, const Objective& obj, const FlowSample& s) {
  const auto& p = flow.params;
  const std::size_t d = s.x.dim();
  const ParamVector g = obj.gradient(s.x);
  FlowSample out;
  out.t = 1.0;
  out.x = ParamVector(d, 0.0);
  switch (p.family) {
    case FlowFamily::SGD:
      for (std::size_t i = 0; i < d; ++i) {
        out.x[i] = -g[i] - p.lambda * indicator(flow.decay, g[i] * s.x[i] >= 0.0) * s.x[i];
      }
      break;
    case FlowFamily::SGDM:
      out.m = ParamVector(d, 0.0);
      for (std::size_t i = 0; i < d; ++i) {
        out.x[i] = -s.m[i] - p.lambda * indicator(flow.decay, s.m[i] * s.x[i] >= 0.0) * s.x[i];
        out.m[i] = p.beta * (g[i] - s.m[i]);
      }
      break;
    case FlowFamily::LionK: {
      out.m = ParamVector(d, 0.0);
      const MatrixShape shape = p.shape.size() == d ? p.shape : MatrixShape{d, 1};
      const ParamVector dk = convex_map_gradient(p.k_map, s.m, shape);
      for (std::size_t i = 0; i < d; ++i) {
        out.x[i] = dk[i] - p.lambda * indicator(flow.decay, s.m[i] * s.x[i] <= 0.0) * s.x[i];
        out.m[i] = -p.alpha * g[i] - p.gamma * s.m[i];
      }
      break;
    }
    case FlowFamily::Adam: {
      out.m = ParamVector(d, 0.0);
      out.v = ParamVector(d, 0.0);
      const double a_t = bias_factor(p.alpha, s.t);
      const double g_t = bias_factor(p.gamma, s.t);
      for (std::size_t i = 0; i < d; ++i) {
        const double h = std::sqrt(g_t * std::max(s.v[i], 0.0)) + p.epsilon;
        out.x[i] = -a_t * s.m[i] / h - p.lambda * indicator(flow.decay, s.m[i] * s.x[i] >= 0.0) * s.x[i];
        out.m[i] = p.alpha * (g[i] - s.m[i]);
        out.v[i] = p.gamma * (g[i] * g[i] - s.v[i]);
      }
      break;
    }
  }
  return out;
}

Trajectory integrate(const FlowSpec& flow, const Objective& obj, const ParamVector& x0, const ParamVector& m0,
                     const ParamVector& v0) {
  flow.validate();
  const std::size_t d = x0.dim();
  if (d != obj.dim()) throw DimensionError("integrate: x0 has the wrong dimension");
  require_finite(x0.values(), "integrate: x0");
  const FlowFamily fam = flow.family();
  const bool has_m = fam != FlowFamily::SGD;
  const bool has_v = fam == FlowFamily::Adam;

  FlowSample z;
  z.t = flow.t0;
  z.x = x0;
  if (has_m) {
    z.m = m0.empty() ? ParamVector(d, 0.0) : m0;
    require_same_dim(z.m, x0, "integrate: m0");
  }
  if (has_v) {
    z.v = v0.empty() ? ParamVector(d, 0.0) : v0;
    require_same_dim(z.v, x0, "integrate: v0");
  }

  Trajectory traj;
  traj.family = fam;
  traj.h = flow.h * static_cast<double>(flow.stride);
  traj.samples.push_back(z);
  const auto steps = static_cast<std::size_t>(std::llround(flow.horizon / flow.h));
  const double h = flow.h;
  for (std::size_t k = 1; k <= steps; ++k) {
    if (flow.integrator == Integrator::euler) {
      z = axpy(z, h, flow_rhs(flow, obj, z));
    } else {
      const FlowSample k1 = flow_rhs(flow, obj, z);
      const FlowSample k2 = flow_rhs(flow, obj, axpy(z, 0.5 * h, k1));
      const FlowSample k3 = flow_rhs(flow, obj, axpy(z, 0.5 * h, k2));
      const FlowSample k4 = flow_rhs(flow, obj, axpy(z, h, k3));
      FlowSample next = z;
      auto combine = [h](ParamVector& y, const ParamVector& a, const ParamVector& b, const ParamVector& c,
                         const ParamVector& e) {
        for (std::size_t i = 0; i < y.dim(); ++i) y[i] += h / 6.0 * (a[i] + 2.0 * b[i] + 2.0 * c[i] + e[i]);
      };
      combine(next.x, k1.x, k2.x, k3.x, k4.x);
      if (has_m) combine(next.m, k1.m, k2.m, k3.m, k4.m);
      if (has_v) combine(next.v, k1.v, k2.v, k3.v, k4.v);
      next.t = flow.t0 + static_cast<double>(k) * h;
      z = std::move(next);
    }
    z.t = flow.t0 + static_cast<double>(k) * h;
    bool bad = false;
    for (std::size_t i = 0; i < d; ++i) {
      if (!std::isfinite(z.x[i]) || std::abs(z.x[i]) > flow.divergence_box) bad = true;
    }
    if (bad) {
      traj.diverged = true;
      traj.samples.push_back(z);
      break;
    }
    if (k % flow.stride == 0 || k == steps) traj.samples.push_back(z);
  }
  return traj;
}

SlidingReport sliding_mode_residual(const Trajectory& traj, const Objective& obj, double lambda, double tol,
                                    std::size_t window) {
  if (!(lambda > 0.0)) throw std::invalid_argument("sliding_mode_residual: lambda must be positive");
  if (window < 2) throw std::invalid_argument("sliding_mode_residual: window must be >= 2");
  const auto& s = traj.samples;
  // Entry: first index after which every sample is within tol of the manifold.
  auto near = [&](const FlowSample& z) {
    if (norms(obj.gradient(z.x)).l2 > tol) return false;
    return z.m.empty() || norms(z.m).l2 <= tol;
  };
  std::size_t entry = s.size();
  for (std::size_t k = s.size(); k-- > 0;) {
    if (!near(s[k])) break;
    entry = k;
  }
  if (entry + window > s.size()) {
    throw std::runtime_error("sliding_mode_residual: trajectory does not settle on the stationary manifold");
  }
  SlidingReport rep;
  rep.entry_index = entry;
  const std::size_t d = s[entry].x.dim();
  rep.mean_selector = ParamVector(d, 0.0);
  rep.min_selector = std::numeric_limits<double>::infinity();
  rep.max_selector = -std::numeric_limits<double>::infinity();
  for (std::size_t start = entry; start + window <= s.size(); start += window) {
    ParamVector sel(d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
      double num = 0.0, den = 0.0;
      for (std::size_t k = start; k + 1 < start + window; ++k) {
        const double dt = s[k + 1].t - s[k].t;
        const double xdot = (s[k + 1].x[i] - s[k].x[i]) / dt;
        num += xdot * s[k].x[i];
        den += s[k].x[i] * s[k].x[i];
      }
      if (den > 1e-18 * static_cast<double>(window)) sel[i] = -num / (lambda * den);
      rep.min_selector = std::min(rep.min_selector, sel[i]);
      rep.max_selector = std::max(rep.max_selector, sel[i]);
      rep.mean_selector[i] += sel[i];
    }
    // Window average of hess f(x_k) (s_k * x_k) with s_k * x_k = -x'_k / lambda,
    // which filters the chatter without comparing a chord to a tangent.
    ParamVector avg(d, 0.0);
    for (std::size_t k = start; k + 1 < start + window; ++k) {
      const double dt = s[k + 1].t - s[k].t;
      ParamVector sx(d, 0.0);
      for (std::size_t i = 0; i < d; ++i) sx[i] = -(s[k + 1].x[i] - s[k].x[i]) / (lambda * dt);
      const ParamVector hv = obj.hessian(s[k].x).apply(sx);
      for (std::size_t i = 0; i < d; ++i) avg[i] += hv[i] / static_cast<double>(window - 1);
    }
    const double tang = norms(avg).l2;
    rep.tangency.push_back(tang);
    rep.max_tangency = std::max(rep.max_tangency, tang);
    rep.selectors.push_back(std::move(sel));
  }
  rep.fitted_windows = rep.selectors.size();
  for (std::size_t i = 0; i < d; ++i) rep.mean_selector[i] /= static_cast<double>(rep.fitted_windows);
  return rep;
}

std::optional<ParamVector> project_to_stationary(const Objective& obj, const ParamVector& y0, int max_iters,
                                                 double tol) {
  ParamVector y = y0;
  const std::size_t d = y.dim();
  for (int it = 0; it <= max_iters; ++it) {
    const ParamVector r = obj.gradient(y);
    if (norms(r).l2 <= tol) return y;
    if (it == max_iters) break;
    const DenseMatrix j = obj.hessian(y);
    // (J^T J + mu I) dy = -J^T r; tiny mu keeps the step near minimum norm.
    DenseMatrix jtj(d, d, 0.0);
    ParamVector rhs(d, 0.0);
    double scale = 0.0;
    for (std::size_t a = 0; a < d; ++a) {
      for (std::size_t b = 0; b < d; ++b) {
        double acc = 0.0;
        for (std::size_t k = 0; k < d; ++k) acc += j(k, a) * j(k, b);
        jtj(a, b) = acc;
      }
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) acc -= j(k, a) * r[k];
      rhs[a] = acc;
      scale += jtj(a, a);
    }
    const double mu = 1e-12 * std::max(scale, 1e-300);
    for (std::size_t a = 0; a < d; ++a) jtj(a, a) += mu;
    ParamVector dy;
    try {
      dy = solve_linear(jtj, rhs);
    } catch (const NumericalError&) {
      return std::nullopt;
    }
    for (std::size_t i = 0; i < d; ++i) y[i] += dy[i];
    for (std::size_t i = 0; i < d; ++i) {
      if (!std::isfinite(y[i])) return std::nullopt;
    }
  }
  return std::nullopt;
}

ParetoVerdict pareto_check(const ParamVector& x, const Objective& obj, const ParetoOptions& opts) {
  if (!(opts.delta > 0.0) || opts.n_probes <= 0) {
    throw std::invalid_argument("pareto_check: delta and n_probes must be positive");
  }
  ParetoVerdict verdict;
  const std::size_t d = x.dim();
  ParamVector base = x;
  if (norms(obj.gradient(x)).linf > opts.grad_tol) {
    auto proj = project_to_stationary(obj, x, opts.max_newton, opts.newton_tol);
    if (!proj) {
      verdict.point = x;
      return verdict;
    }
    double dist = 0.0;
    for (std::size_t i = 0; i < d; ++i) dist = std::max(dist, std::abs((*proj)[i] - x[i]));
    if (dist > opts.delta / 10.0) {
      verdict.point = *proj;
      return verdict;
    }
    base = *proj;
  }
  verdict.point = base;
  verdict.on_manifold = true;

  std::mt19937_64 rng = named_stream(opts.seed, "pareto");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double base_scale = 1.0;
  for (std::size_t i = 0; i < d; ++i) base_scale = std::max(base_scale, std::abs(base[i]));
  for (int p = 0; p < opts.n_probes; ++p) {
    ParamVector dir(d, 0.0);
    double nrm = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      dir[i] = normal(rng);
      nrm += dir[i] * dir[i];
    }
    nrm = std::sqrt(nrm);
    const double radius = opts.delta * std::pow(unit(rng), 1.0 / static_cast<double>(d));
    ParamVector y0 = base;
    for (std::size_t i = 0; i < d; ++i) y0[i] += radius * dir[i] / nrm;
    auto y = project_to_stationary(obj, y0, opts.max_newton, opts.newton_tol);
    if (!y) {
      ++verdict.probes_discarded;
      continue;
    }
    double dist = 0.0;
    for (std::size_t i = 0; i < d; ++i) dist += ((*y)[i] - base[i]) * ((*y)[i] - base[i]);
    dist = std::sqrt(dist);
    if (dist > opts.delta || dist <= opts.equal_tol * base_scale) {
      ++verdict.probes_discarded;
      continue;
    }
    ++verdict.probes_used;
    bool no_larger = true, some_smaller = false;
    for (std::size_t i = 0; i < d; ++i) {
      const double a = std::abs((*y)[i]), b = std::abs(base[i]);
      if (a > b + opts.equal_tol) no_larger = false;
      if (a < b - opts.equal_tol) some_smaller = true;
    }
    if (no_larger && some_smaller) {
      verdict.witness = *y;
      verdict.locally_pareto = false;
      return verdict;
    }
  }
  verdict.inconclusive = verdict.probes_used == 0;
  verdict.locally_pareto = !verdict.inconclusive;
  return verdict;
}

FixedPointReport fixed_point_check(const ParamVector& x, const OptimizerSpec& spec, const Objective& obj,
                                   double grad_tol, double box_tol) {
  FixedPointReport rep;
  const ParamVector g = obj.gradient(x);
  rep.grad_inf = norms(g).linf;
  rep.x_inf = norms(x).linf;
  rep.box_bound = spec.lambda > 0.0 ? 1.0 / spec.lambda : std::numeric_limits<double>::infinity();
  rep.stationary = rep.grad_inf <= grad_tol;
  rep.inside_box = rep.x_inf <= rep.box_bound + box_tol;
  for (std::size_t i = 0; i < x.dim(); ++i) {
    if (std::abs(g[i]) > grad_tol) {
      rep.kkt_residual = std::max(rep.kkt_residual, std::abs(sign(g[i]) + spec.lambda * x[i]));
    }
  }
  rep.passed = spec.decay.kind == DecayKind::Decoupled && spec.lambda > 0.0 ? rep.inside_box : rep.stationary;
  return rep;
}

bool reached_limit_set(const Trajectory& traj, const Objective& obj, double tol) {
  if (traj.samples.empty()) return false;
  const FlowSample& z = traj.samples.back();
  if (norms(obj.gradient(z.x)).l2 > tol) return false;
  return z.m.empty() || norms(z.m).l2 <= tol;
}

}  // namespace cwd
