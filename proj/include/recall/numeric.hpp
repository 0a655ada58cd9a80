#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace recall {

/// Raised when operand shapes are incompatible. The message names every shape involved.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an operation would produce NaN/Inf, or a loss diverges.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised by reductions that need at least one row.
class EmptyInputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major matrix of doubles. Rows are tokens or memory slots,
/// columns are embedding features. Vectors are stored as 1 x d rows.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix identity(std::size_t n);
  static Matrix row_vector(std::span<const double> values);
  static Matrix filled(std::size_t rows, std::size_t cols, double value);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::string shape_string() const;
  bool all_finite() const;

  /// Exact element-wise equality (bit-level for finite values other than signed zeros).
  friend bool operator==(const Matrix& a, const Matrix& b) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// True when both matrices have the same shape and identical bit patterns.
bool bit_identical(const Matrix& a, const Matrix& b);

/// Counter-based generator (SplitMix64 over a key and a draw counter).
/// Identical seeds give identical streams; split() derives independent streams.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : key_(seed) {}

  std::uint64_t next_u64();
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  /// Uniform integer on [0, n). n must be positive.
  std::size_t below(std::size_t n);
  Rng split(std::uint64_t stream) const;

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t splitmix64(std::uint64_t x);

using ColumnMask = std::vector<bool>;

Matrix matmul(const Matrix& a, const Matrix& b);
/// a * b^T without materializing the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);
/// a^T * b without materializing the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double factor);
/// Adds a 1 x cols bias row to every row of x.
Matrix add_row(const Matrix& x, const Matrix& bias);
Matrix relu(const Matrix& x);

/// Row-wise softmax. Masked-out columns are exactly zero; a row whose mask
/// admits no column is all zeros.
Matrix softmax_rows(const Matrix& x, const std::optional<ColumnMask>& mask = std::nullopt);
/// Row-wise softmax where row i only sees columns 0..i.
Matrix softmax_rows_causal(const Matrix& x);

/// Per-row normalization with biased variance and eps inside the square root,
/// followed by the gamma scale and beta shift (both 1 x cols).
Matrix layer_norm(const Matrix& x, const Matrix& gamma, const Matrix& beta, double eps = 1e-5);

/// Column-wise mean over rows; throws EmptyInputError for zero rows.
Matrix mean_rows(const Matrix& x);
Matrix column_sums(const Matrix& x);

Matrix concat_cols(std::span<const Matrix> parts);
Matrix gather_rows(const Matrix& table, std::span<const std::size_t> ids);

/// Multiplier matrix for inverted dropout: 0 with probability p, else 1/(1-p).
Matrix dropout_mask(std::size_t rows, std::size_t cols, double p, Rng& rng);
/// Identity in eval mode or when p == 0; otherwise x * dropout_mask(...).
Matrix dropout(const Matrix& x, double p, Rng& rng, bool training);

/// Central-difference gradient of a scalar function.
std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> theta, double h);

struct GradCheckReport {
  std::string param_name;
  double max_rel_error = 0.0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Relative error per coordinate is |a - n| / max(|a|, |n|, floor); the report
/// carries the worst coordinate.
GradCheckReport compare_gradients(std::string name, std::span<const double> analytic,
                                  std::span<const double> numeric, double floor = 1e-8);

}  // namespace recall
