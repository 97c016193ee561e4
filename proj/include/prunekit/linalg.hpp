#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "prunekit/errors.hpp"

namespace prunekit {

/// Dense row-major matrix of doubles. Entries are finite after every public
/// operation in this header; producers that build a Matrix element-wise call
/// ensure_finite() before handing it on.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) + " != " +
                       std::to_string(rows_) + "x" + std::to_string(cols_));
    }
    for (double v : data_) {
      if (!std::isfinite(v)) throw NumericError("non-finite matrix entry on construction");
    }
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged row list");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline void ensure_finite(const Matrix& m, const char* context) {
  for (double v : m.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite result in ") + context);
  }
}

/// Activations of shape (N, T, C), row-major with instance-major, token-minor
/// order.
class Batch3 {
 public:
  Batch3() = default;
  Batch3(std::size_t n, std::size_t t, std::size_t c, double fill = 0.0)
      : n_(n), t_(t), c_(c), data_(n * t * c, fill) {}
  Batch3(std::size_t n, std::size_t t, std::size_t c, std::vector<double> data)
      : n_(n), t_(t), c_(c), data_(std::move(data)) {
    if (data_.size() != n_ * t_ * c_) throw ShapeError("batch data length mismatch");
  }
  // Reshapes an (N*T, C) matrix back into (N, T, C).
  static Batch3 from_matrix(std::size_t n, std::size_t t, const Matrix& m) {
    if (m.rows() != n * t) throw ShapeError("matrix rows != N*T");
    return Batch3(n, t, m.cols(), m.values());
  }

  std::size_t n() const noexcept { return n_; }
  std::size_t t() const noexcept { return t_; }
  std::size_t c() const noexcept { return c_; }

  double& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * t_ + j) * c_ + k];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * t_ + j) * c_ + k];
  }
  std::span<const double> data() const noexcept { return data_; }

  Matrix flatten() const { return Matrix(n_ * t_, c_, data_); }

  bool operator==(const Batch3&) const = default;

 private:
  std::size_t n_ = 0;
  std::size_t t_ = 0;
  std::size_t c_ = 0;
  std::vector<double> data_;
};

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " by " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto b_row = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aik * b_row[j];
    }
  }
  ensure_finite(out, "matmul");
  return out;
}

// a^T * b without materializing the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw ShapeError("matmul_tn row mismatch");
  Matrix out(a.cols(), b.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto a_row = a.row(r);
    auto b_row = b.row(r);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double ai = a_row[i];
      if (ai == 0.0) continue;
      auto out_row = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += ai * b_row[j];
    }
  }
  ensure_finite(out, "matmul_tn");
  return out;
}

// a * b^T.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt column mismatch");
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto a_row = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto b_row = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a_row[k] * b_row[k];
      out(i, j) = acc;
    }
  }
  ensure_finite(out, "matmul_nt");
  return out;
}

inline Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

inline Matrix add(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add");
  Matrix out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bd[i];
  ensure_finite(out, "add");
  return out;
}

inline Matrix subtract(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "subtract");
  Matrix out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bd[i];
  ensure_finite(out, "subtract");
  return out;
}

inline Matrix scale(const Matrix& a, double s) {
  Matrix out = a;
  for (double& v : out.data()) v *= s;
  ensure_finite(out, "scale");
  return out;
}

// Adds `row` to every row of `a`.
inline Matrix add_row(const Matrix& a, std::span<const double> row) {
  if (row.size() != a.cols()) throw ShapeError("add_row length mismatch");
  Matrix out = a;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += row[j];
  }
  ensure_finite(out, "add_row");
  return out;
}

inline Matrix select_columns(const Matrix& a, std::span<const std::size_t> cols) {
  Matrix out(a.rows(), cols.size());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < cols.size(); ++j) {
      if (cols[j] >= a.cols()) throw ShapeError("column index out of range");
      out(i, j) = a(i, cols[j]);
    }
  return out;
}

inline Matrix select_rows(const Matrix& a, std::span<const std::size_t> rows) {
  Matrix out(rows.size(), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= a.rows()) throw ShapeError("row index out of range");
    std::copy_n(a.row(rows[i]).begin(), a.cols(), out.row(i).begin());
  }
  return out;
}

inline Matrix column_means(const Matrix& x) {
  if (x.rows() == 0 || x.cols() == 0) throw ShapeError("column_means of empty matrix");
  Matrix out(1, x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    for (std::size_t j = 0; j < x.cols(); ++j) out(0, j) += r[j];
  }
  for (double& v : out.data()) v /= static_cast<double>(x.rows());
  return out;
}

// Population variance (divides by the row count).
inline Matrix column_variances(const Matrix& x) {
  const Matrix mean = column_means(x);
  Matrix out(1, x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    for (std::size_t j = 0; j < x.cols(); ++j) {
      const double d = r[j] - mean(0, j);
      out(0, j) += d * d;
    }
  }
  for (double& v : out.data()) v /= static_cast<double>(x.rows());
  return out;
}

inline double frobenius_sq(const Matrix& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v * v;
  return acc;
}

inline double frobenius(const Matrix& x) { return std::sqrt(frobenius_sq(x)); }

inline constexpr double kRidgeScale = 1e-10;

// Solves (gram + lambda I) X = rhs for symmetric positive semidefinite `gram`
// by Cholesky, with lambda = 1e-10 * mean(diag(gram)) (1e-10 if that mean is 0).
// If rounding leaves a non-positive pivot, lambda grows tenfold and the
// factorization is retried.
inline Matrix solve_ridge_normal(const Matrix& gram, const Matrix& rhs) {
  const std::size_t k = gram.rows();
  if (gram.cols() != k) throw ShapeError("gram matrix must be square");
  if (rhs.rows() != k) throw ShapeError("normal-equation rhs rows != gram size");
  if (k == 0) return Matrix(0, rhs.cols());

  double diag_mean = 0.0;
  for (std::size_t i = 0; i < k; ++i) diag_mean += gram(i, i);
  diag_mean /= static_cast<double>(k);
  double lambda = diag_mean > 0.0 ? kRidgeScale * diag_mean : kRidgeScale;

  for (int attempt = 0; attempt < 8; ++attempt, lambda *= 10.0) {
    Matrix chol(k, k);
    bool ok = true;
    for (std::size_t j = 0; j < k && ok; ++j) {
      double d = gram(j, j) + lambda;
      for (std::size_t p = 0; p < j; ++p) d -= chol(j, p) * chol(j, p);
      if (!(d > 0.0)) {
        ok = false;
        break;
      }
      const double ljj = std::sqrt(d);
      chol(j, j) = ljj;
      for (std::size_t i = j + 1; i < k; ++i) {
        double s = gram(i, j);
        for (std::size_t p = 0; p < j; ++p) s -= chol(i, p) * chol(j, p);
        chol(i, j) = s / ljj;
      }
    }
    if (!ok) continue;

    Matrix x = rhs;
    for (std::size_t c = 0; c < x.cols(); ++c) {
      for (std::size_t i = 0; i < k; ++i) {  // L y = b
        double s = x(i, c);
        for (std::size_t p = 0; p < i; ++p) s -= chol(i, p) * x(p, c);
        x(i, c) = s / chol(i, i);
      }
      for (std::size_t i = k; i-- > 0;) {  // L^T x = y
        double s = x(i, c);
        for (std::size_t p = i + 1; p < k; ++p) s -= chol(p, i) * x(p, c);
        x(i, c) = s / chol(i, i);
      }
    }
    ensure_finite(x, "solve_ridge_normal");
    return x;
  }
  throw NumericError("normal equations could not be factorized");
}

/// Minimizes ||a X - b||_F^2 through ridge-stabilized normal equations.
inline Matrix least_squares(const Matrix& a, const Matrix& b) {
  if (a.rows() == 0 || a.cols() == 0) throw ShapeError("least_squares needs m >= 1 and k >= 1");
  if (a.rows() != b.rows()) throw ShapeError("least_squares row mismatch");
  return solve_ridge_normal(matmul_tn(a, a), matmul_tn(a, b));
}

}  // namespace prunekit
