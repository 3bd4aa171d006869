#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mlae/errors.hpp"

namespace mlae {

/// Dense row-major matrix of 64-bit floats. All in-memory math runs at
/// 64 bits; 32-bit floats appear only at checkpoint boundaries.
///
/// Every public operation that produces a Matrix verifies the result is
/// finite and throws NumericError otherwise.
class Matrix {
 public:
  Matrix() = default;
  Matrix(int rows, int cols);

  static Matrix zeros(int rows, int cols) { return Matrix(rows, cols); }
  static Matrix filled(int rows, int cols, double value);
  static Matrix identity(int n);
  // Row-major literal, mostly for tests: Matrix::from({{1,2},{3,4}}).
  static Matrix from(std::initializer_list<std::initializer_list<double>> rows);

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(int i, int j) { return data_[static_cast<std::size_t>(i) * cols_ + j]; }
  double operator()(int i, int j) const { return data_[static_cast<std::size_t>(i) * cols_ + j]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double* row(int i) { return data_.data() + static_cast<std::size_t>(i) * cols_; }
  const double* row(int i) const { return data_.data() + static_cast<std::size_t>(i) * cols_; }

  bool same_shape(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  std::string shape_str() const;

  // Bitwise equality (shape and every entry).
  bool operator==(const Matrix& other) const;
  bool operator!=(const Matrix& other) const { return !(*this == other); }

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> data_;
};

// Throws NumericError naming `op` if any entry of `m` is NaN or infinite.
void check_finite(const Matrix& m, const char* op);

// Dense product a*b. Counted by matmul_count() for the operation-count probe.
Matrix matmul(const Matrix& a, const Matrix& b);
// transpose(a)*b and a*transpose(b); used by gradient code, also counted.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
Matrix matmul_nt(const Matrix& a, const Matrix& b);

// Number of dense products performed by this process so far.
std::uint64_t matmul_count();
void reset_matmul_count();

Matrix transpose(const Matrix& a);
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);
Matrix hadamard(const Matrix& a, const Matrix& b);

double frobenius_dot(const Matrix& a, const Matrix& b);
double frobenius_norm(const Matrix& a);
double max_abs(const Matrix& a);
double max_abs_diff(const Matrix& a, const Matrix& b);

}  // namespace mlae
