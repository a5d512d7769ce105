#include "cwd/objectives.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "cwd/random.hpp"

namespace cwd {

Objective::Objective(std::string name, std::size_t dim, ValueFn value, GradFn grad, HessFn hess,
                     std::optional<double> infimum)
    : name_(std::move(name)),
      dim_(dim),
      value_(std::move(value)),
      grad_(std::move(grad)),
      hess_(std::move(hess)),
      infimum_(infimum) {
  if (dim_ == 0) throw std::invalid_argument("Objective: dim must be positive");
  if (!value_ || !grad_) throw std::invalid_argument("Objective: value and gradient are required");
}

void Objective::check_dim(const ParamVector& x) const {
  if (x.dim() != dim_) {
    throw DimensionError("objective " + name_ + ": expected dim " + std::to_string(dim_) + ", got " +
                         std::to_string(x.dim()));
  }
}

double Objective::value(const ParamVector& x) const {
  check_dim(x);
  return value_(x);
}

ParamVector Objective::gradient(const ParamVector& x) const {
  check_dim(x);
  return grad_(x);
}

DenseMatrix Objective::hessian(const ParamVector& x) const {
  check_dim(x);
  if (hess_) return hess_(x);
  return finite_diff_hessian(*this, x);
}

namespace {

// f = r^2 for a scalar residual r with gradient dr and constant Hessian d2r.
DenseMatrix squared_residual_hessian(double r, const double (&dr)[2], const double (&d2r)[2]) {
  DenseMatrix h(2, 2);
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) h(i, j) = 2.0 * dr[i] * dr[j];
    h(i, i) += 2.0 * r * d2r[i];
  }
  return h;
}

}  // namespace

Objective toy_hyperbola() {
  auto residual = [](const ParamVector& p) {
    const double dx = p[0] - 3.0, dy = p[1] - 3.0;
    return dy * dy - dx * dx - 1.0;
  };
  return Objective(
      "toy_hyperbola", 2,
      [residual](const ParamVector& p) {
        const double r = residual(p);
        return r * r;
      },
      [residual](const ParamVector& p) {
        const double r = residual(p);
        return ParamVector{2.0 * r * (-2.0 * (p[0] - 3.0)), 2.0 * r * (2.0 * (p[1] - 3.0))};
      },
      [residual](const ParamVector& p) {
        const double dr[2] = {-2.0 * (p[0] - 3.0), 2.0 * (p[1] - 3.0)};
        const double d2r[2] = {-2.0, 2.0};
        return squared_residual_hessian(residual(p), dr, d2r);
      },
      0.0);
}

Objective toy_parabola() {
  auto residual = [](const ParamVector& p) {
    const double dx = p[0] - 3.0;
    return p[1] - 3.0 - dx * dx;
  };
  return Objective(
      "toy_parabola", 2,
      [residual](const ParamVector& p) {
        const double r = residual(p);
        return r * r;
      },
      [residual](const ParamVector& p) {
        const double r = residual(p);
        return ParamVector{2.0 * r * (-2.0 * (p[0] - 3.0)), 2.0 * r};
      },
      [residual](const ParamVector& p) {
        const double dr[2] = {-2.0 * (p[0] - 3.0), 1.0};
        const double d2r[2] = {-2.0, 0.0};
        return squared_residual_hessian(residual(p), dr, d2r);
      },
      0.0);
}

Objective quadratic_manifold(const DenseMatrix& a, const ParamVector& b) {
  if (a.rows() != a.cols() || a.rows() != b.dim() || b.dim() == 0) {
    throw DimensionError("quadratic_manifold: A must be square and match b");
  }
  if (!a.is_symmetric(1e-12)) throw std::invalid_argument("quadratic_manifold: A is not symmetric");
  require_finite(a.data(), "quadratic_manifold A");
  require_finite(b.values(), "quadratic_manifold b");
  auto shifted = [b](const ParamVector& x) {
    ParamVector d(x.dim());
    for (std::size_t i = 0; i < x.dim(); ++i) d[i] = x[i] - b[i];
    return d;
  };
  return Objective(
      "quadratic", b.dim(),
      [a, shifted](const ParamVector& x) {
        const ParamVector d = shifted(x);
        return 0.5 * dot(d, a.apply(d));
      },
      [a, shifted](const ParamVector& x) { return a.apply(shifted(x)); },
      [a](const ParamVector&) { return a; }, 0.0);
}

Objective ell2_regularize(const Objective& base, double lambda) {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw std::invalid_argument("ell2_regularize: lambda must be >= 0");
  if (lambda == 0.0) return base;
  Objective::HessFn hess = [base, lambda](const ParamVector& x) {
    DenseMatrix h = base.hessian(x);
    for (std::size_t i = 0; i < h.rows(); ++i) h(i, i) += lambda;
    return h;
  };
  return Objective(
      base.name() + "+l2", base.dim(),
      [base, lambda](const ParamVector& x) {
        double sq = 0.0;
        for (double v : x) sq += v * v;
        return base.value(x) + 0.5 * lambda * sq;
      },
      [base, lambda](const ParamVector& x) {
        ParamVector g = base.gradient(x);
        for (std::size_t i = 0; i < g.dim(); ++i) g[i] = g[i] + lambda * x[i];
        return g;
      },
      std::move(hess), base.infimum());
}

Objective load_quadratic_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open quadratic file " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
      } catch (const std::exception&) {
        throw std::invalid_argument("quadratic file " + path.string() + ": bad number '" + cell + "'");
      }
    }
    rows.push_back(std::move(row));
  }
  const std::size_t d = rows.size();
  if (d == 0) throw std::invalid_argument("quadratic file " + path.string() + " is empty");
  std::vector<double> a;
  ParamVector b(d);
  for (std::size_t r = 0; r < d; ++r) {
    if (rows[r].size() != d + 1) {
      throw std::invalid_argument("quadratic file " + path.string() + ": row " + std::to_string(r) + " needs " +
                                  std::to_string(d + 1) + " columns");
    }
    a.insert(a.end(), rows[r].begin(), rows[r].begin() + static_cast<std::ptrdiff_t>(d));
    b[r] = rows[r][d];
  }
  return quadratic_manifold(DenseMatrix(d, d, std::move(a)), b);
}

Objective objective_by_name(const std::string& spec) {
  if (spec == "toy_hyperbola") return toy_hyperbola();
  if (spec == "toy_parabola") return toy_parabola();
  constexpr std::string_view prefix = "quadratic:";
  if (spec.starts_with(prefix)) return load_quadratic_csv(spec.substr(prefix.size()));
  throw std::invalid_argument("unknown objective '" + spec + "'");
}

ParamVector finite_diff_grad(const Objective& obj, const ParamVector& x, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: h must be positive");
  ParamVector g(x.dim());
  ParamVector probe = x;
  for (std::size_t i = 0; i < x.dim(); ++i) {
    probe[i] = x[i] + h;
    const double up = obj.value(probe);
    probe[i] = x[i] - h;
    const double down = obj.value(probe);
    probe[i] = x[i];
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

DenseMatrix finite_diff_hessian(const Objective& obj, const ParamVector& x, double h) {
  const std::size_t d = x.dim();
  DenseMatrix hm(d, d);
  ParamVector probe = x;
  for (std::size_t j = 0; j < d; ++j) {
    probe[j] = x[j] + h;
    const ParamVector up = obj.gradient(probe);
    probe[j] = x[j] - h;
    const ParamVector down = obj.gradient(probe);
    probe[j] = x[j];
    for (std::size_t i = 0; i < d; ++i) hm(i, j) = (up[i] - down[i]) / (2.0 * h);
  }
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i + 1; j < d; ++j) {
      const double s = 0.5 * (hm(i, j) + hm(j, i));
      hm(i, j) = s;
      hm(j, i) = s;
    }
  }
  return hm;
}

double estimate_smoothness(const Objective& obj, double lo, double hi, int pairs, std::uint64_t seed) {
  std::mt19937_64 rng = named_stream(seed, "smoothness");
  std::uniform_real_distribution<double> unif(lo, hi);
  double best = 0.0;
  for (int k = 0; k < pairs; ++k) {
    ParamVector x(obj.dim()), y(obj.dim());
    for (std::size_t i = 0; i < obj.dim(); ++i) {
      x[i] = unif(rng);
      y[i] = unif(rng);
    }
    const ParamVector gx = obj.gradient(x), gy = obj.gradient(y);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < obj.dim(); ++i) {
      num += (gy[i] - gx[i]) * (gy[i] - gx[i]);
      den += (y[i] - x[i]) * (y[i] - x[i]);
    }
    if (den > 0.0) best = std::max(best, std::sqrt(num / den));
  }
  return best;
}

StochasticGradientSource::StochasticGradientSource(Objective base, double sigma, int n_batch, std::uint64_t seed)
    : base_(std::move(base)), sigma_(sigma), n_batch_(n_batch), seed_(seed) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw std::invalid_argument("StochasticGradientSource: sigma must be >= 0");
  if (n_batch < 1) throw std::invalid_argument("StochasticGradientSource: n_batch must be >= 1");
}

ParamVector StochasticGradientSource::sample_at(const ParamVector& x, std::uint64_t draw_index) const {
  ParamVector g = base_.gradient(x);
  if (sigma_ == 0.0) return g;
  const double d = static_cast<double>(g.dim());
  const double scale = sigma_ / std::sqrt(static_cast<double>(n_batch_) * d);
  const std::uint64_t draw_key = splitmix64(seed_ ^ splitmix64(draw_index + 0x51ED270B27E4D1A3ULL));
  for (std::size_t i = 0; i < g.dim(); ++i) {
    const std::uint64_t h1 = splitmix64(draw_key + 2 * i);
    const std::uint64_t h2 = splitmix64(draw_key + 2 * i + 1);
    g[i] += scale * hash_normal(h1, h2);
  }
  return g;
}

ParamVector StochasticGradientSource::sample(const ParamVector& x) { return sample_at(x, draw_++); }

ParamVector sample_gradient(StochasticGradientSource& src, const ParamVector& x) { return src.sample(x); }

}  // namespace cwd
