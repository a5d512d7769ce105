#pragma once

// Discrete update rules for SGD, SGD with momentum, Adam, Lion, Lion-K and
// Muon, each combinable with no decay, decoupled decay, cautious decay, or one
// of the ablation masks.
//
// Every rule is written in descent form
//
//   x' = x - eta * (u + lambda * mask * x)
//
// with u the family's raw update. Lion-K keeps its ascent-form listing
// x' = x + eta * (dK - lambda * I(dK * x <= 0) * x), which is the same rule
// with u = -dK.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "cwd/linalg.hpp"

namespace cwd {

enum class Family { SGD, SGDM, Adam, Lion, LionK, Muon };

enum class DecayKind { None, Decoupled, Cautious, CautiousGradientMask, RandomMask };

/// Convex map for Lion-K: l1 gives Lion, trace (nuclear norm) gives a
/// Muon-like rule on matrices.
enum class ConvexMap { l1, trace };

struct DecayMode {
  DecayKind kind = DecayKind::Cautious;
  // RandomMask only: Bernoulli ratio for step t stored at index t-1.
  std::vector<double> ratio_schedule;

  static DecayMode none() { return {DecayKind::None, {}}; }
  static DecayMode decoupled() { return {DecayKind::Decoupled, {}}; }
  static DecayMode cautious() { return {DecayKind::Cautious, {}}; }
  static DecayMode gradient_mask() { return {DecayKind::CautiousGradientMask, {}}; }
  static DecayMode random(std::vector<double> ratios) { return {DecayKind::RandomMask, std::move(ratios)}; }
};

enum class ScheduleKind { constant, cosine, inverse_sqrt, custom };

/// Learning rate as a function of the (1-based) step.
struct LearningRate {
  ScheduleKind kind = ScheduleKind::constant;
  double base = 1e-3;
  double final_value = 0.0;    // cosine floor
  std::int64_t horizon = 1;    // cosine length in steps
  std::function<double(std::int64_t)> callback;  // custom

  static LearningRate constant(double eta) { return {ScheduleKind::constant, eta, 0.0, 1, {}}; }
  static LearningRate cosine(double eta, double eta_min, std::int64_t steps) {
    return {ScheduleKind::cosine, eta, eta_min, steps, {}};
  }
  static LearningRate inverse_sqrt(double eta) { return {ScheduleKind::inverse_sqrt, eta, 0.0, 1, {}}; }

  double operator()(std::int64_t t) const;
};

struct OptimizerSpec {
  Family family = Family::Adam;
  LearningRate eta = LearningRate::constant(1e-3);
  double beta1 = 0.9;
  double beta2 = 0.999;
  double beta = 0.9;  // SGDM and Muon momentum
  double epsilon = 1e-8;
  double lambda = 0.0;
  DecayMode decay = DecayMode::cautious();
  ConvexMap k_map = ConvexMap::l1;
  MatrixShape shape{};  // Muon and trace-norm Lion-K
  NewtonSchulzOptions newton_schulz{};

  /// Throws std::invalid_argument when the hyperparameters are inconsistent
  /// with the family or with a parameter of dimension `dim`.
  void validate(std::size_t dim) const;
};

struct MaskRatio {
  double inclusive = 0.0;  // fraction with u*x >= 0
  double strict = 0.0;     // fraction with u*x > 0
};

struct OptState {
  std::int64_t t = 1;
  ParamVector m;  // first moment (Lion-K: the negated-sign buffer of its listing)
  ParamVector v;  // second moment, Adam only
  ParamVector last_mask;    // decay mask applied at the last step, entries in {0,1}
  ParamVector last_update;  // raw update u of the last step, descent convention
  MaskRatio last_ratio;     // cautious-mask activation of the last step
  bool stepped = false;
  std::mt19937_64 mask_rng;

  OptState() = default;
  OptState(std::size_t dim, std::uint64_t mask_seed);
};

/// I(u * x >= 0) coordinate-wise; a zero product keeps the mask on.
ParamVector cwd_mask(const ParamVector& u, const ParamVector& x);

/// Mask for an ablation variant. `u` is the vector whose sign gates cautious
/// decay for the family, `g` the stochastic gradient. RandomMask draws
/// i.i.d. Bernoulli(ratio_schedule[t-1]).
ParamVector apply_ablation_mask(const DecayMode& mode, const ParamVector& u, const ParamVector& g,
                                const ParamVector& x, std::mt19937_64& rng, std::int64_t t);

/// Activation ratio of the cautious mask at the last step.
MaskRatio mask_ratio(const OptState& state);

ParamVector step_sgd(const OptimizerSpec& spec, OptState& state, const ParamVector& x, const ParamVector& g);
ParamVector step_sgdm(const OptimizerSpec& spec, OptState& state, const ParamVector& x, const ParamVector& g);
ParamVector step_adam(const OptimizerSpec& spec, OptState& state, const ParamVector& x, const ParamVector& g);
ParamVector step_lion(const OptimizerSpec& spec, OptState& state, const ParamVector& x, const ParamVector& g);
ParamVector step_lionk(const OptimizerSpec& spec, OptState& state, const ParamVector& x, const ParamVector& g);
ParamVector step_muon(const OptimizerSpec& spec, OptState& state, const ParamVector& x, const ParamVector& g);

/// Dispatches on spec.family.
ParamVector step(const OptimizerSpec& spec, OptState& state, const ParamVector& x, const ParamVector& g);

/// Subgradient of the Lion-K convex map.
ParamVector convex_map_gradient(ConvexMap k, const ParamVector& m, MatrixShape shape);
double convex_map_value(ConvexMap k, const ParamVector& m, MatrixShape shape);

std::string to_string(Family f);
std::string to_string(DecayKind k);
std::string to_string(ConvexMap k);
Family parse_family(const std::string& s);
DecayKind parse_decay(const std::string& s);
ConvexMap parse_convex_map(const std::string& s);

/// key=value form of a spec (the [optimizer] section of a run config).
/// RandomMask schedules are not inlined; pass `ratio_schedule` as a CSV path.
std::map<std::string, std::string> to_key_values(const OptimizerSpec& spec);
OptimizerSpec spec_from_key_values(const std::map<std::string, std::string>& kv);

/// Reads the `mask_ratio` column of a trajectory CSV, one value per step
/// (the initial-state row is skipped).
std::vector<double> load_ratio_schedule(const std::filesystem::path& csv);

/// Checkpoint as CSV: a `# step=<t>` line, a `coordinate,m,v` header, one row
/// per coordinate.
void save_checkpoint(const OptState& state, const std::filesystem::path& path);
OptState load_checkpoint(const std::filesystem::path& path, std::uint64_t mask_seed);

}  // namespace cwd
