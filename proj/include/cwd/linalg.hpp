#pragma once

// Flat-vector and small dense-matrix arithmetic shared by every optimizer,
// flow and objective in the library. All arithmetic is double precision.

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cwd {

/// Raised when a public operation would produce a NaN or Inf coordinate.
class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, std::size_t index)
      : std::runtime_error(what + " (coordinate " + std::to_string(index) + ")"), index_(index) {}
  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

/// Raised on operand dimension or shape mismatch.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Real coordinate vector. Parameters, updates, gradients and moment buffers
/// are all ParamVectors; the dimension is fixed at construction.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::size_t dim, double fill = 0.0) : data_(dim, fill) {}
  ParamVector(std::initializer_list<double> values) : data_(values) {}
  explicit ParamVector(std::vector<double> values) : data_(std::move(values)) {}

  std::size_t dim() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  std::span<const double> values() const noexcept { return data_; }
  std::span<double> values() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  bool operator==(const ParamVector&) const = default;

 private:
  std::vector<double> data_;
};

struct MatrixShape {
  std::size_t rows = 1;
  std::size_t cols = 1;

  std::size_t size() const noexcept { return rows * cols; }
  bool operator==(const MatrixShape&) const = default;
};

enum class ElementOp { add, sub, mul, div, sqrt, abs, sign, max0 };

bool is_unary(ElementOp op) noexcept;

/// Coordinate-wise binary operation. Throws DimensionError on mismatch and
/// NumericalError (with the coordinate index) on a zero divisor or a
/// nonfinite result.
ParamVector elementwise(ElementOp op, const ParamVector& a, const ParamVector& b);
ParamVector elementwise(ElementOp op, const ParamVector& a, double b);
/// Coordinate-wise unary operation (sqrt, abs, sign, max0).
ParamVector elementwise(ElementOp op, const ParamVector& a);

/// sgn with sgn(0) = 0.
inline double sign(double v) noexcept { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }
/// Positive part max(0, v).
inline double positive_part(double v) noexcept { return v > 0.0 ? v : 0.0; }

struct Norms {
  double l1 = 0.0;
  double l2 = 0.0;
  double linf = 0.0;
  double rms = 0.0;
};

Norms norms(const ParamVector& a);

double dot(const ParamVector& a, const ParamVector& b);

/// Throws NumericalError at the first nonfinite coordinate.
void require_finite(std::span<const double> values, const char* what);

void require_same_dim(const ParamVector& a, const ParamVector& b, const char* what);

/// Row-major dense matrix, used for Hessians and small linear solves.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> row_major);

  static DenseMatrix identity(std::size_t n);
  static DenseMatrix diagonal(std::span<const double> diag);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const std::vector<double>& data() const noexcept { return data_; }

  ParamVector apply(const ParamVector& x) const;
  bool is_symmetric(double tol = 0.0) const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Solves A z = b by Gaussian elimination with partial pivoting. Throws
/// NumericalError if A is singular to working precision.
ParamVector solve_linear(const DenseMatrix& a, const ParamVector& b);

// ---------------------------------------------------------------------------
// Matrix functions on ParamVectors reshaped row-major by a MatrixShape.

struct NewtonSchulzOptions {
  // Quintic X <- aX + b(XX^T)X + c(XX^T)^2 X, the usual Muon coefficients.
  double a = 3.4445;
  double b = -4.7750;
  double c = 2.0315;
  int quintic_steps = 8;
  // Cubic X <- 1.5X - 0.5(XX^T)X steps applied afterwards. The quintic alone
  // settles into a cycle around [0.68, 1.13]; the cubic pulls the singular
  // values onto 1.
  int polish_steps = 5;
};

/// Approximates the semi-orthogonal factor U V^T of M = U S V^T. The input is
/// normalized by its Frobenius norm before iterating. A zero matrix maps to
/// the zero matrix.
ParamVector newton_schulz_sign(const ParamVector& m, MatrixShape shape, const NewtonSchulzOptions& opts = {});
ParamVector newton_schulz_sign(const ParamVector& m, MatrixShape shape, int quintic_steps);

struct ThinSvd {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t rank_dim = 0;     // min(rows, cols)
  std::vector<double> u;        // rows x rank_dim, row-major
  std::vector<double> s;        // rank_dim, descending
  std::vector<double> v;        // cols x rank_dim, row-major
};

/// One-sided Jacobi SVD of a small dense matrix.
ThinSvd jacobi_svd(const ParamVector& m, MatrixShape shape);

/// Exact U V^T from the SVD; singular directions with s <= tol*s_max are dropped.
ParamVector polar_factor(const ParamVector& m, MatrixShape shape, double tol = 1e-12);

/// Sum of singular values.
double trace_norm(const ParamVector& m, MatrixShape shape);

/// C = A B for row-major A (n x k) and B (k x m).
std::vector<double> matmul(std::span<const double> a, std::span<const double> b, std::size_t n, std::size_t k,
                           std::size_t m);

}  // namespace cwd
