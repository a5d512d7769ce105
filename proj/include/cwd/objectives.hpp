#pragma once

// Differentiable test objectives, a finite-difference oracle and a noisy
// gradient source with bounded variance.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>

#include "cwd/linalg.hpp"

namespace cwd {

class Objective {
 public:
  using ValueFn = std::function<double(const ParamVector&)>;
  using GradFn = std::function<ParamVector(const ParamVector&)>;
  using HessFn = std::function<DenseMatrix(const ParamVector&)>;

  Objective(std::string name, std::size_t dim, ValueFn value, GradFn grad, HessFn hess = {},
            std::optional<double> infimum = std::nullopt);

  const std::string& name() const noexcept { return name_; }
  std::size_t dim() const noexcept { return dim_; }

  double value(const ParamVector& x) const;
  ParamVector gradient(const ParamVector& x) const;
  bool has_hessian() const noexcept { return static_cast<bool>(hess_); }
  /// Analytic Hessian when available, otherwise a symmetrized central
  /// difference of the gradient.
  DenseMatrix hessian(const ParamVector& x) const;
  /// Known lower bound f*, if any.
  std::optional<double> infimum() const noexcept { return infimum_; }

 private:
  void check_dim(const ParamVector& x) const;

  std::string name_;
  std::size_t dim_;
  ValueFn value_;
  GradFn grad_;
  HessFn hess_;
  std::optional<double> infimum_;
};

/// f(x,y) = ((y-3)^2 - (x-3)^2 - 1)^2. Zero on the hyperbola (y-3)^2-(x-3)^2 = 1.
Objective toy_hyperbola();
/// f(x,y) = (y - 3 - (x-3)^2)^2. Zero on the parabola y = 3 + (x-3)^2.
Objective toy_parabola();
/// f(x) = 1/2 (x-b)^T A (x-b) for symmetric positive semidefinite A. The
/// stationary set is b + null(A).
Objective quadratic_manifold(const DenseMatrix& a, const ParamVector& b);
/// f(x) + (lambda/2)||x||^2. lambda = 0 returns the base objective unchanged.
Objective ell2_regularize(const Objective& base, double lambda);

/// Quadratic from a header-free CSV: d rows of d+1 numbers, each row holding a
/// row of A followed by the matching entry of b.
Objective load_quadratic_csv(const std::filesystem::path& path);

/// Resolves "toy_hyperbola", "toy_parabola" or "quadratic:<file>".
Objective objective_by_name(const std::string& spec);

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h.
ParamVector finite_diff_grad(const Objective& obj, const ParamVector& x, double h = 1e-6);

/// Central differences of the analytic gradient, symmetrized.
DenseMatrix finite_diff_hessian(const Objective& obj, const ParamVector& x, double h = 1e-5);

/// Largest observed ||grad(y) - grad(x)|| / ||y - x|| over `pairs` random
/// pairs drawn uniformly from [lo, hi]^dim.
double estimate_smoothness(const Objective& obj, double lo, double hi, int pairs, std::uint64_t seed);

/// Unbiased noisy gradients: grad f(x) + zeta, zeta ~ N(0, sigma^2 / (n_batch d) I),
/// so E||zeta||^2 = sigma^2 / n_batch. Draw k depends only on (seed, k).
/// Holds a draw counter; one source per worker.
class StochasticGradientSource {
 public:
  StochasticGradientSource(Objective base, double sigma, int n_batch, std::uint64_t seed);

  const Objective& base() const noexcept { return base_; }
  double sigma() const noexcept { return sigma_; }
  int n_batch() const noexcept { return n_batch_; }
  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t draws() const noexcept { return draw_; }

  /// Next draw in sequence.
  ParamVector sample(const ParamVector& x);
  /// Draw with an explicit index; does not advance the counter.
  ParamVector sample_at(const ParamVector& x, std::uint64_t draw_index) const;

 private:
  Objective base_;
  double sigma_;
  int n_batch_;
  std::uint64_t seed_;
  std::uint64_t draw_ = 0;
};

ParamVector sample_gradient(StochasticGradientSource& src, const ParamVector& x);

}  // namespace cwd
