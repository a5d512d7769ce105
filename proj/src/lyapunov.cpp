#include "cwd/lyapunov.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace cwd {

std::string to_string(FlowFamily f) {
  switch (f) {
    case FlowFamily::SGD:
      return "sgd";
    case FlowFamily::SGDM:
      return "sgdm";
    case FlowFamily::LionK:
      return "lionk";
    case FlowFamily::Adam:
      return "adam";
  }
  return "?";
}

FlowFamily parse_flow_family(const std::string& s) {
  for (FlowFamily f : {FlowFamily::SGD, FlowFamily::SGDM, FlowFamily::LionK, FlowFamily::Adam}) {
    if (to_string(f) == s) return f;
  }
  throw std::invalid_argument("unknown flow family '" + s + "'");
}

void LyapunovSpec::validate() const {
  auto nonneg = [](double v) { return std::isfinite(v) && v >= 0.0; };
  if (!nonneg(alpha) || !nonneg(beta) || !nonneg(gamma) || !nonneg(lambda) || !nonneg(epsilon)) {
    throw std::invalid_argument("LyapunovSpec: coefficients must be finite and nonnegative");
  }
  switch (family) {
    case FlowFamily::SGD:
      break;
    case FlowFamily::SGDM:
      if (!(beta > 0.0)) throw std::invalid_argument("LyapunovSpec: SGDM needs beta > 0");
      break;
    case FlowFamily::LionK:
      break;
    case FlowFamily::Adam:
      if (!(gamma > 0.0 && gamma <= 4.0 * alpha)) {
        throw std::invalid_argument("LyapunovSpec: Adam needs 0 < gamma <= 4 alpha");
      }
      if (!(epsilon > 0.0)) throw std::invalid_argument("LyapunovSpec: Adam needs epsilon > 0");
      break;
  }
}

double lyapunov_sgd(double f_val) { return f_val; }

double lyapunov_sgdm(double f_val, const ParamVector& m, const ParamVector& x, double beta, double lambda) {
  require_same_dim(m, x, "lyapunov_sgdm");
  double kinetic = 0.0, conflict = 0.0;
  for (std::size_t i = 0; i < x.dim(); ++i) {
    kinetic += m[i] * m[i];
    conflict += positive_part(m[i] * x[i]);
  }
  return beta * f_val + 0.5 * kinetic + lambda * conflict;
}

double lyapunov_lionk(double f_val, const ParamVector& m, const ParamVector& x, double alpha, double lambda,
                      ConvexMap k, MatrixShape shape) {
  require_same_dim(m, x, "lyapunov_lionk");
  double conflict = 0.0;
  for (std::size_t i = 0; i < x.dim(); ++i) conflict += positive_part(-m[i] * x[i]);
  if (k == ConvexMap::trace && shape.size() != m.dim()) shape = {m.dim(), 1};
  return alpha * f_val + convex_map_value(k, m, shape) + lambda * conflict;
}

namespace {

// 1 / (1 - exp(-c t)), computed stably for small c t.
double bias_factor(double c, double t) { return -1.0 / std::expm1(-c * t); }

}  // namespace

double lyapunov_adam(double f_val, const ParamVector& m, const ParamVector& v, const ParamVector& x, double t,
                     const LyapunovSpec& spec) {
  if (!(t > 0.0)) throw std::invalid_argument("lyapunov_adam: t must be positive");
  require_same_dim(m, x, "lyapunov_adam");
  require_same_dim(v, x, "lyapunov_adam");
  const double a_t = bias_factor(spec.alpha, t);
  const double g_t = bias_factor(spec.gamma, t);
  double kinetic = 0.0, conflict = 0.0;
  for (std::size_t i = 0; i < x.dim(); ++i) {
    const double h = std::sqrt(g_t * v[i]) + spec.epsilon;
    if (m[i] != 0.0) kinetic += a_t * m[i] * m[i] / (2.0 * h);
    conflict += positive_part(m[i] * x[i]);
  }
  return spec.alpha * f_val + kinetic + spec.lambda * conflict;
}

double lyapunov_value(const LyapunovSpec& spec, double f_val, const FlowSample& s) {
  switch (spec.family) {
    case FlowFamily::SGD:
      return lyapunov_sgd(f_val);
    case FlowFamily::SGDM:
      return lyapunov_sgdm(f_val, s.m, s.x, spec.beta, spec.lambda);
    case FlowFamily::LionK:
      return lyapunov_lionk(f_val, s.m, s.x, spec.alpha, spec.lambda, spec.k_map, spec.shape);
    case FlowFamily::Adam:
      return lyapunov_adam(f_val, s.m, s.v, s.x, s.t, spec);
  }
  throw std::invalid_argument("unknown flow family");
}

double lyapunov_derivative(const LyapunovSpec& spec, const FlowSample& s, const ParamVector& grad) {
  const ParamVector& x = s.x;
  require_same_dim(grad, x, "lyapunov_derivative");
  const double lambda = spec.lambda;
  switch (spec.family) {
    case FlowFamily::SGD: {
      // -||g||^2 - lambda ||(g x)^+||_1
      double d = 0.0;
      for (std::size_t i = 0; i < x.dim(); ++i) d -= grad[i] * grad[i] + lambda * positive_part(grad[i] * x[i]);
      return d;
    }
    case FlowFamily::SGDM: {
      // -<lambda I(mx >= 0) + beta, m^2> - lambda (beta + lambda) ||(m x)^+||_1
      double d = 0.0;
      for (std::size_t i = 0; i < x.dim(); ++i) {
        const double ind = s.m[i] * x[i] >= 0.0 ? 1.0 : 0.0;
        d -= (lambda * ind + spec.beta) * s.m[i] * s.m[i] + lambda * (spec.beta + lambda) * positive_part(s.m[i] * x[i]);
      }
      return d;
    }
    case FlowFamily::LionK: {
      // -<lambda I(mx <= 0) + gamma, dK(m) m> - lambda (lambda + gamma) ||(-m x)^+||_1
      MatrixShape shape = spec.shape.size() == x.dim() ? spec.shape : MatrixShape{x.dim(), 1};
      const ParamVector dk = convex_map_gradient(spec.k_map, s.m, shape);
      double d = 0.0;
      for (std::size_t i = 0; i < x.dim(); ++i) {
        const double ind = s.m[i] * x[i] <= 0.0 ? 1.0 : 0.0;
        d -= (lambda * ind + spec.gamma) * dk[i] * s.m[i] + lambda * (lambda + spec.gamma) * positive_part(-s.m[i] * x[i]);
      }
      return d;
    }
    case FlowFamily::Adam: {
      const double t = s.t;
      if (!(t > 0.0)) throw std::invalid_argument("lyapunov_derivative: Adam needs t > 0");
      const double al = spec.alpha, ga = spec.gamma, eps = spec.epsilon;
      const double a_t = bias_factor(al, t);
      const double g_t = bias_factor(ga, t);
      const double ea = std::exp(-al * t), eg = std::exp(-ga * t);
      double d = 0.0;
      for (std::size_t i = 0; i < x.dim(); ++i) {
        const double m = s.m[i], v = s.v[i], g = grad[i];
        const double ind = m * x[i] >= 0.0 ? 1.0 : 0.0;
        const double root = std::sqrt(g_t * v);
        const double h = root + eps;
        const double m2 = m * m;
        d -= (al + lambda * ind) * a_t * m2 / h + lambda * (al + lambda) * positive_part(m * x[i]);
        if (m2 != 0.0) {
          if (v == 0.0) {
            if (g != 0.0) return -std::numeric_limits<double>::infinity();
          } else {
            d -= a_t * ga * std::sqrt(g_t) * m2 * g * g / (4.0 * std::sqrt(v) * h * h);
          }
          d += a_t * ga * m2 * root / (4.0 * h * h);
          // explicit time dependence of alpha_t and gamma_t
          d -= 0.5 * m2 * (2.0 * al * ea * h - ga * eg * g_t * root / a_t) / (2.0 * h * h / (a_t * a_t));
        }
      }
      return d;
    }
  }
  throw std::invalid_argument("unknown flow family");
}

double adamw_candidate(double f_val, const ParamVector& m, const ParamVector& v, const ParamVector& x, double lambda) {
  require_same_dim(m, x, "adamw_candidate");
  require_same_dim(v, x, "adamw_candidate");
  double kinetic = 0.0, coupling = 0.0;
  for (std::size_t i = 0; i < x.dim(); ++i) {
    if (m[i] != 0.0) kinetic += m[i] * m[i] / (2.0 * std::sqrt(v[i]));
    coupling += m[i] * lambda * x[i];
  }
  return f_val + kinetic + coupling;
}

MonitorReport monitor(const Trajectory& traj, const Objective& obj, const LyapunovSpec& spec) {
  if (traj.family != spec.family) {
    throw std::invalid_argument("monitor: trajectory family " + to_string(traj.family) + " does not match spec " +
                                to_string(spec.family));
  }
  spec.validate();
  MonitorReport rep;
  const auto& samples = traj.samples;
  rep.values.reserve(samples.size());
  rep.derivatives.reserve(samples.size());
  std::vector<ParamVector> gates;
  gates.reserve(samples.size());
  for (const FlowSample& s : samples) {
    const ParamVector g = obj.gradient(s.x);
    rep.values.push_back(lyapunov_value(spec, obj.value(s.x), s));
    const double dh = lyapunov_derivative(spec, s, g);
    rep.derivatives.push_back(dh);
    rep.max_abs_derivative = std::max(rep.max_abs_derivative, std::abs(dh));
    gates.push_back(spec.family == FlowFamily::SGD ? g : s.m);
  }
  rep.tolerance = 10.0 * traj.h * (1.0 + rep.max_abs_derivative);
  rep.max_increment = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k + 1 < samples.size(); ++k) {
    const double inc = rep.values[k + 1] - rep.values[k];
    if (inc > rep.max_increment) {
      rep.max_increment = inc;
      rep.worst_index = k;
    }
    bool switched = false;
    for (std::size_t i = 0; i < samples[k].x.dim() && !switched; ++i) {
      const double before = sign(gates[k][i] * samples[k].x[i]);
      const double after = sign(gates[k + 1][i] * samples[k + 1].x[i]);
      switched = before != after;
    }
    if (switched) ++rep.switch_increments;
    const double tol = switched ? 5.0 * rep.tolerance : rep.tolerance;
    if (inc > tol) ++rep.violations;
  }
  if (samples.size() < 2) rep.max_increment = 0.0;
  rep.monotone = rep.violations == 0;
  return rep;
}

}  // namespace cwd
