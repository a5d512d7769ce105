#include "cwd/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cwd {

bool is_unary(ElementOp op) noexcept {
  switch (op) {
    case ElementOp::sqrt:
    case ElementOp::abs:
    case ElementOp::sign:
    case ElementOp::max0:
      return true;
    default:
      return false;
  }
}

namespace {

double apply_binary(ElementOp op, double x, double y, std::size_t i) {
  switch (op) {
    case ElementOp::add:
      return x + y;
    case ElementOp::sub:
      return x - y;
    case ElementOp::mul:
      return x * y;
    case ElementOp::div:
      if (y == 0.0) throw NumericalError("elementwise div: zero denominator", i);
      return x / y;
    default:
      throw std::invalid_argument("elementwise: unary op given a second operand");
  }
}

double apply_unary(ElementOp op, double x, std::size_t i) {
  switch (op) {
    case ElementOp::sqrt:
      if (x < 0.0) throw NumericalError("elementwise sqrt: negative argument", i);
      return std::sqrt(x);
    case ElementOp::abs:
      return std::abs(x);
    case ElementOp::sign:
      return sign(x);
    case ElementOp::max0:
      return positive_part(x);
    default:
      throw std::invalid_argument("elementwise: binary op needs a second operand");
  }
}

}  // namespace

void require_finite(std::span<const double> values, const char* what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) throw NumericalError(std::string(what) + ": nonfinite value", i);
  }
}

void require_same_dim(const ParamVector& a, const ParamVector& b, const char* what) {
  if (a.dim() != b.dim()) {
    throw DimensionError(std::string(what) + ": dimension mismatch " + std::to_string(a.dim()) + " vs " +
                         std::to_string(b.dim()));
  }
}

ParamVector elementwise(ElementOp op, const ParamVector& a, const ParamVector& b) {
  require_same_dim(a, b, "elementwise");
  ParamVector out(a.dim());
  for (std::size_t i = 0; i < a.dim(); ++i) out[i] = apply_binary(op, a[i], b[i], i);
  require_finite(out.values(), "elementwise");
  return out;
}

ParamVector elementwise(ElementOp op, const ParamVector& a, double b) {
  ParamVector out(a.dim());
  for (std::size_t i = 0; i < a.dim(); ++i) out[i] = apply_binary(op, a[i], b, i);
  require_finite(out.values(), "elementwise");
  return out;
}

ParamVector elementwise(ElementOp op, const ParamVector& a) {
  ParamVector out(a.dim());
  for (std::size_t i = 0; i < a.dim(); ++i) out[i] = apply_unary(op, a[i], i);
  require_finite(out.values(), "elementwise");
  return out;
}

Norms norms(const ParamVector& a) {
  if (a.empty()) throw DimensionError("norms: empty vector");
  require_finite(a.values(), "norms");
  Norms n;
  double sq = 0.0;
  for (double v : a) {
    const double m = std::abs(v);
    n.l1 += m;
    sq += v * v;
    n.linf = std::max(n.linf, m);
  }
  n.l2 = std::sqrt(sq);
  n.rms = n.l2 / std::sqrt(static_cast<double>(a.dim()));
  return n;
}

double dot(const ParamVector& a, const ParamVector& b) {
  require_same_dim(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.dim(); ++i) s += a[i] * b[i];
  return s;
}

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> row_major)
    : rows_(rows), cols_(cols), data_(std::move(row_major)) {
  if (data_.size() != rows_ * cols_) throw DimensionError("DenseMatrix: data size does not match shape");
}

DenseMatrix DenseMatrix::identity(std::size_t n) {
  DenseMatrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

DenseMatrix DenseMatrix::diagonal(std::span<const double> diag) {
  DenseMatrix m(diag.size(), diag.size());
  for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
  return m;
}

ParamVector DenseMatrix::apply(const ParamVector& x) const {
  if (x.dim() != cols_) throw DimensionError("DenseMatrix::apply: dimension mismatch");
  ParamVector y(rows_);
  for (std::size_t r = 0; r < rows_; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols_; ++c) s += (*this)(r, c) * x[c];
    y[r] = s;
  }
  return y;
}

bool DenseMatrix::is_symmetric(double tol) const {
  if (rows_ != cols_) return false;
  for (std::size_t r = 0; r < rows_; ++r) {
    for (std::size_t c = r + 1; c < cols_; ++c) {
      if (std::abs((*this)(r, c) - (*this)(c, r)) > tol) return false;
    }
  }
  return true;
}

ParamVector solve_linear(const DenseMatrix& a, const ParamVector& b) {
  const std::size_t n = a.rows();
  if (a.cols() != n || b.dim() != n) throw DimensionError("solve_linear: shape mismatch");
  DenseMatrix m = a;
  ParamVector rhs = b;
  double scale = 0.0;
  for (double v : m.data()) scale = std::max(scale, std::abs(v));
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    for (std::size_t r = k + 1; r < n; ++r) {
      if (std::abs(m(r, k)) > std::abs(m(piv, k))) piv = r;
    }
    if (std::abs(m(piv, k)) <= 1e-14 * scale || m(piv, k) == 0.0) throw NumericalError("solve_linear: singular matrix", k);
    if (piv != k) {
      for (std::size_t c = 0; c < n; ++c) std::swap(m(k, c), m(piv, c));
      std::swap(rhs[k], rhs[piv]);
    }
    for (std::size_t r = k + 1; r < n; ++r) {
      const double f = m(r, k) / m(k, k);
      if (f == 0.0) continue;
      for (std::size_t c = k; c < n; ++c) m(r, c) -= f * m(k, c);
      rhs[r] -= f * rhs[k];
    }
  }
  ParamVector z(n);
  for (std::size_t k = n; k-- > 0;) {
    double s = rhs[k];
    for (std::size_t c = k + 1; c < n; ++c) s -= m(k, c) * z[c];
    z[k] = s / m(k, k);
  }
  require_finite(z.values(), "solve_linear");
  return z;
}

std::vector<double> matmul(std::span<const double> a, std::span<const double> b, std::size_t n, std::size_t k,
                           std::size_t m) {
  std::vector<double> c(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      for (std::size_t j = 0; j < m; ++j) c[i * m + j] += aip * b[p * m + j];
    }
  }
  return c;
}

namespace {

std::vector<double> transpose(std::span<const double> a, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = a[r * cols + c];
  }
  return t;
}

void check_shape(const ParamVector& m, MatrixShape shape, const char* what) {
  if (shape.rows == 0 || shape.cols == 0 || shape.size() != m.dim()) {
    throw DimensionError(std::string(what) + ": shape " + std::to_string(shape.rows) + "x" +
                         std::to_string(shape.cols) + " does not match dim " + std::to_string(m.dim()));
  }
}

}  // namespace

ParamVector newton_schulz_sign(const ParamVector& m, MatrixShape shape, const NewtonSchulzOptions& opts) {
  check_shape(m, shape, "newton_schulz_sign");
  require_finite(m.values(), "newton_schulz_sign");
  if (opts.quintic_steps < 0 || opts.polish_steps < 0 || opts.quintic_steps + opts.polish_steps < 1) {
    throw std::invalid_argument("newton_schulz_sign: need at least one iteration");
  }
  const double fro = std::sqrt(std::inner_product(m.begin(), m.end(), m.begin(), 0.0));
  if (fro == 0.0) return ParamVector(m.dim(), 0.0);

  // Iterate on the orientation whose Gram matrix X X^T is the smaller one.
  const bool tall = shape.rows > shape.cols;
  std::size_t n = tall ? shape.cols : shape.rows;
  std::size_t k = tall ? shape.rows : shape.cols;
  std::vector<double> x = tall ? transpose(m.values(), shape.rows, shape.cols) : m.data();
  for (double& v : x) v /= fro;

  auto gram = [&](const std::vector<double>& y) {
    const auto yt = transpose(y, n, k);
    return matmul(y, yt, n, k, n);
  };

  for (int it = 0; it < opts.quintic_steps; ++it) {
    const auto g = gram(x);
    const auto g2 = matmul(g, g, n, n, n);
    std::vector<double> poly(n * n);
    for (std::size_t i = 0; i < n * n; ++i) poly[i] = opts.b * g[i] + opts.c * g2[i];
    auto px = matmul(poly, x, n, n, k);
    for (std::size_t i = 0; i < n * k; ++i) x[i] = opts.a * x[i] + px[i];
  }
  for (int it = 0; it < opts.polish_steps; ++it) {
    const auto g = gram(x);
    auto gx = matmul(g, x, n, n, k);
    for (std::size_t i = 0; i < n * k; ++i) x[i] = 1.5 * x[i] - 0.5 * gx[i];
  }

  ParamVector out(tall ? transpose(x, n, k) : std::move(x));
  require_finite(out.values(), "newton_schulz_sign");
  return out;
}

ParamVector newton_schulz_sign(const ParamVector& m, MatrixShape shape, int quintic_steps) {
  NewtonSchulzOptions opts;
  opts.quintic_steps = quintic_steps;
  return newton_schulz_sign(m, shape, opts);
}

ThinSvd jacobi_svd(const ParamVector& m, MatrixShape shape) {
  check_shape(m, shape, "jacobi_svd");
  require_finite(m.values(), "jacobi_svd");
  const bool wide = shape.rows < shape.cols;
  // Work on a tall matrix A (rows_w >= cols_w), column-oriented.
  const std::size_t rw = wide ? shape.cols : shape.rows;
  const std::size_t cw = wide ? shape.rows : shape.cols;
  std::vector<double> a = wide ? transpose(m.values(), shape.rows, shape.cols) : m.data();
  std::vector<double> v(cw * cw, 0.0);
  for (std::size_t i = 0; i < cw; ++i) v[i * cw + i] = 1.0;

  constexpr double eps = 1e-15;
  for (int sweep = 0; sweep < 100; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < cw; ++p) {
      for (std::size_t q = p + 1; q < cw; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < rw; ++i) {
          const double ap = a[i * cw + p], aq = a[i * cw + q];
          alpha += ap * ap;
          beta += aq * aq;
          gamma += ap * aq;
        }
        if (gamma == 0.0 || std::abs(gamma) <= eps * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < rw; ++i) {
          const double ap = a[i * cw + p], aq = a[i * cw + q];
          a[i * cw + p] = c * ap - s * aq;
          a[i * cw + q] = s * ap + c * aq;
        }
        for (std::size_t i = 0; i < cw; ++i) {
          const double vp = v[i * cw + p], vq = v[i * cw + q];
          v[i * cw + p] = c * vp - s * vq;
          v[i * cw + q] = s * vp + c * vq;
        }
      }
    }
    if (!rotated) break;
  }

  std::vector<double> sv(cw);
  for (std::size_t j = 0; j < cw; ++j) {
    double n2 = 0.0;
    for (std::size_t i = 0; i < rw; ++i) n2 += a[i * cw + j] * a[i * cw + j];
    sv[j] = std::sqrt(n2);
    if (sv[j] > 0.0) {
      for (std::size_t i = 0; i < rw; ++i) a[i * cw + j] /= sv[j];
    }
  }
  std::vector<std::size_t> order(cw);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t l, std::size_t r) { return sv[l] > sv[r]; });

  ThinSvd out;
  out.rows = shape.rows;
  out.cols = shape.cols;
  out.rank_dim = cw;
  out.s.resize(cw);
  std::vector<double> left(rw * cw), right(cw * cw);
  for (std::size_t jj = 0; jj < cw; ++jj) {
    const std::size_t j = order[jj];
    out.s[jj] = sv[j];
    for (std::size_t i = 0; i < rw; ++i) left[i * cw + jj] = a[i * cw + j];
    for (std::size_t i = 0; i < cw; ++i) right[i * cw + jj] = v[i * cw + j];
  }
  // For a wide input we decomposed M^T = L S R^T, so M = R S L^T.
  out.u = wide ? std::move(right) : std::move(left);
  out.v = wide ? std::move(left) : std::move(right);
  return out;
}

ParamVector polar_factor(const ParamVector& m, MatrixShape shape, double tol) {
  const ThinSvd svd = jacobi_svd(m, shape);
  ParamVector out(m.dim(), 0.0);
  const double smax = svd.s.empty() ? 0.0 : svd.s.front();
  if (smax == 0.0) return out;
  const std::size_t k = svd.rank_dim;
  for (std::size_t j = 0; j < k; ++j) {
    if (svd.s[j] <= tol * smax) continue;
    for (std::size_t r = 0; r < shape.rows; ++r) {
      for (std::size_t c = 0; c < shape.cols; ++c) out[r * shape.cols + c] += svd.u[r * k + j] * svd.v[c * k + j];
    }
  }
  return out;
}

double trace_norm(const ParamVector& m, MatrixShape shape) {
  const ThinSvd svd = jacobi_svd(m, shape);
  return std::accumulate(svd.s.begin(), svd.s.end(), 0.0);
}

}  // namespace cwd
