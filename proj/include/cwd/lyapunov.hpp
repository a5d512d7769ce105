#pragma once

// Lyapunov functions of the continuous-time cautious-decay dynamics and a
// monitor that checks their evolution along sampled trajectories.
//
//   SGD    H(x)       = f(x)
//   SGDM   H(x,m)     = beta f + 1/2 ||m||^2 + lambda ||(m x)^+||_1
//   Lion-K H(x,m)     = alpha f + K(m) + lambda ||(-m x)^+||_1
//   Adam   H(x,m,v,t) = alpha f + ||alpha_t m^2 / (2 (sqrt(gamma_t v) + eps))||_1
//                       + lambda ||(m x)^+||_1
//
// with alpha_t = 1 / (1 - exp(-alpha t)) and gamma_t = 1 / (1 - exp(-gamma t)).

#include <cstddef>
#include <vector>

#include "cwd/linalg.hpp"
#include "cwd/objectives.hpp"
#include "cwd/optimizers.hpp"

namespace cwd {

enum class FlowFamily { SGD, SGDM, LionK, Adam };

std::string to_string(FlowFamily f);
FlowFamily parse_flow_family(const std::string& s);

struct LyapunovSpec {
  FlowFamily family = FlowFamily::SGD;
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 1.0;
  double lambda = 0.0;
  double epsilon = 1e-8;
  ConvexMap k_map = ConvexMap::l1;
  MatrixShape shape{};

  /// Throws std::invalid_argument on negative coefficients, or for Adam when
  /// 0 < gamma <= 4 alpha or epsilon > 0 fails.
  void validate() const;
};

/// One sampled state of a flow. m and v are empty for families that do not
/// carry them.
struct FlowSample {
  double t = 0.0;
  ParamVector x;
  ParamVector m;
  ParamVector v;
};

struct Trajectory {
  FlowFamily family = FlowFamily::SGD;
  double h = 0.0;
  std::vector<FlowSample> samples;
  bool diverged = false;  // stopped early at the divergence box
};

double lyapunov_sgd(double f_val);
double lyapunov_sgdm(double f_val, const ParamVector& m, const ParamVector& x, double beta, double lambda);
double lyapunov_lionk(double f_val, const ParamVector& m, const ParamVector& x, double alpha, double lambda,
                      ConvexMap k, MatrixShape shape = {});
/// Throws std::invalid_argument for t <= 0.
double lyapunov_adam(double f_val, const ParamVector& m, const ParamVector& v, const ParamVector& x, double t,
                     const LyapunovSpec& spec);

/// Dispatches on spec.family.
double lyapunov_value(const LyapunovSpec& spec, double f_val, const FlowSample& s);

/// Closed-form dH/dt along the flow at `s`, with grad = grad f(s.x). The
/// indicator is evaluated at the point (valid off the switching surfaces).
/// For SGD, SGDM and Lion-K these are the simplified nonpositive forms; for
/// Adam it is the exact chain-rule expansion.
double lyapunov_derivative(const LyapunovSpec& spec, const FlowSample& s, const ParamVector& grad);

/// The non-Lyapunov candidate for plain AdamW,
/// f + ||m^2 / (2 sqrt(v))||_1 + <m, lambda x>. Diagnostic only.
double adamw_candidate(double f_val, const ParamVector& m, const ParamVector& v, const ParamVector& x, double lambda);

struct MonitorReport {
  std::vector<double> values;       // H at every sample
  std::vector<double> derivatives;  // closed-form dH/dt at every sample
  double max_increment = 0.0;       // max_k H_{k+1} - H_k (may be negative)
  std::size_t worst_index = 0;      // k attaining max_increment
  double max_abs_derivative = 0.0;
  double tolerance = 0.0;           // 10 h (1 + max |dH/dt|)
  std::size_t switch_increments = 0;  // increments spanning a mask sign change
  std::size_t violations = 0;
  bool monotone = true;
};

/// Evaluates H along a trajectory and checks H_{k+1} - H_k <= tolerance,
/// with a 5x looser tolerance on increments where some u_i x_i changes sign.
MonitorReport monitor(const Trajectory& traj, const Objective& obj, const LyapunovSpec& spec);

}  // namespace cwd
