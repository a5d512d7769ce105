#pragma once

// Continuous-time cautious-decay dynamics:
//
//   SGD    x' = -grad f - lambda I(grad f * x >= 0) x
//   SGDM   x' = -m - lambda I(m x >= 0) x,           m' = beta (grad f - m)
//   Lion-K x' = dK(m) - lambda I(m x <= 0) x,        m' = -alpha grad f - gamma m
//   Adam   x' = -alpha_t m / h_t - lambda I(m x >= 0) x,
//          m' = alpha (grad f - m),  v' = gamma (grad f^2 - v),
//          h_t = sqrt(gamma_t v) + eps
//
// The indicator is evaluated pointwise, so on switching surfaces the fixed
// step integrator chatters and realizes a Filippov sliding motion.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cwd/lyapunov.hpp"
#include "cwd/objectives.hpp"
#include "cwd/optimizers.hpp"

namespace cwd {

enum class Integrator { euler, rk4 };

struct FlowSpec {
  LyapunovSpec params{};  // family and coefficients
  // None and Decoupled replace the indicator by 0 and 1; only Cautious flows
  // carry a Lyapunov guarantee.
  DecayKind decay = DecayKind::Cautious;
  Integrator integrator = Integrator::rk4;
  double h = 1e-3;
  double horizon = 10.0;
  double t0 = 0.0;         // must be > 0 for Adam (alpha_t is singular at 0)
  std::size_t stride = 1;  // keep every stride-th state
  double divergence_box = 1e6;

  FlowFamily family() const noexcept { return params.family; }
  void validate() const;
};

/// Right-hand side of the flow at (t, state).
FlowSample flow_rhs(const FlowSpec& flow, const Objective& obj, const FlowSample& state);

/// Fixed-step integration from t0 to t0 + horizon. Empty m0 / v0 mean zero.
/// Stops early and sets `diverged` if some |x_i| exceeds the divergence box.
Trajectory integrate(const FlowSpec& flow, const Objective& obj, const ParamVector& x0, const ParamVector& m0 = {},
                     const ParamVector& v0 = {});

struct SlidingReport {
  std::size_t entry_index = 0;                 // first sample of the converged tail
  std::vector<ParamVector> selectors;          // fitted s per window
  std::vector<double> tangency;                // ||mean_k hess f(x_k) (s_k * x_k)|| per window
  ParamVector mean_selector;
  double min_selector = 0.0;
  double max_selector = 0.0;
  double max_tangency = 0.0;
  std::size_t fitted_windows = 0;
};

/// Fits x' = -lambda s * x coordinate-wise over windows of `window` samples
/// of the tail where ||grad f|| <= tol and ||m|| <= tol, and evaluates the
/// manifold-tangency residual. Coordinates with |x_i| < 1e-9 throughout a
/// window report s_i = 0. Throws std::runtime_error if the tail never reaches
/// the manifold.
SlidingReport sliding_mode_residual(const Trajectory& traj, const Objective& obj, double lambda, double tol = 1e-5,
                                    std::size_t window = 50);

struct ParetoOptions {
  double delta = 0.1;
  int n_probes = 200;
  double grad_tol = 1e-6;     // stationarity required of the base point
  double equal_tol = 1e-9;    // magnitude comparisons
  int max_newton = 50;
  double newton_tol = 1e-9;   // ||grad f|| at a projected probe
  std::uint64_t seed = 0;
};

struct ParetoVerdict {
  ParamVector point;          // base point after projection onto the manifold
  bool on_manifold = false;
  bool locally_pareto = false;
  bool inconclusive = false;  // no usable probe
  std::optional<ParamVector> witness;
  int probes_used = 0;
  int probes_discarded = 0;
};

/// Projects `y` onto {grad f = 0} by damped Gauss-Newton steps on grad f.
std::optional<ParamVector> project_to_stationary(const Objective& obj, const ParamVector& y, int max_iters,
                                                 double tol);

/// Probes the stationary manifold around x for a neighbour with coordinate-wise
/// smaller or equal magnitudes (strictly smaller somewhere).
ParetoVerdict pareto_check(const ParamVector& x, const Objective& obj, const ParetoOptions& opts = {});

struct FixedPointReport {
  double grad_inf = 0.0;
  double x_inf = 0.0;
  double box_bound = 0.0;     // 1 / lambda, or +inf when lambda == 0
  double kkt_residual = 0.0;  // max |sgn(g_i) + lambda x_i| over coords with |g_i| > tol
  bool stationary = false;    // ||grad f||_inf <= tol
  bool inside_box = false;    // ||x||_inf <= 1/lambda + box_tol
  bool passed = false;        // decoupled: inside_box; otherwise stationary
};

/// Fixed-point conditions of a converged discrete run. Decoupled (AdamW-style)
/// limits should sit in the box ||x||_inf <= 1/lambda; cautious and undecayed
/// limits should be stationary.
FixedPointReport fixed_point_check(const ParamVector& x, const OptimizerSpec& spec, const Objective& obj,
                                   double grad_tol = 1e-5, double box_tol = 1e-2);

/// True if the final sample satisfies ||grad f|| <= tol and ||m|| <= tol.
bool reached_limit_set(const Trajectory& traj, const Objective& obj, double tol);

}  // namespace cwd
