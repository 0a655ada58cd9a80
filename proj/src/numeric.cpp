#include "recall/numeric.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace recall {

namespace {

[[noreturn]] void shape_fail(const char* op, const Matrix& a, const Matrix& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + a.shape_string() + " and " +
                   b.shape_string());
}

void require_finite(const Matrix& m, const char* op) {
  if (!m.all_finite()) {
    throw NumericError(std::string(op) + ": non-finite value in result of shape " + m.shape_string());
  }
}

void require_same_shape(const char* op, const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_fail(op, a, b);
}

template <class Admit>
Matrix masked_softmax(const Matrix& x, Admit admit) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double max_val = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < x.cols(); ++j) {
      if (admit(i, j)) {
        max_val = std::max(max_val, x(i, j));
        any = true;
      }
    }
    if (!any) continue;
    double total = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) {
      if (admit(i, j)) {
        const double e = std::exp(x(i, j) - max_val);
        out(i, j) = e;
        total += e;
      }
    }
    for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) /= total;
  }
  require_finite(out, "softmax_rows");
  return out;
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("Matrix: data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_string());
  }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("Matrix::from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::row_vector(std::span<const double> values) {
  return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

Matrix Matrix::filled(std::size_t rows, std::size_t cols, double value) {
  return Matrix(rows, cols, std::vector<double>(rows * cols, value));
}

std::string Matrix::shape_string() const {
  return "[" + std::to_string(rows_) + "x" + std::to_string(cols_) + "]";
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

bool bit_identical(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  if (a.size() == 0) return true;
  return std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t Rng::next_u64() {
  return splitmix64(key_ + 0x9E3779B97F4A7C15ULL * counter_++);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::size_t Rng::below(std::size_t n) {
  if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
  const std::uint64_t bound = n;
  const std::uint64_t threshold = (0 - bound) % bound;
  for (;;) {
    const std::uint64_t r = next_u64();
    if (r >= threshold) return static_cast<std::size_t>(r % bound);
  }
}

Rng Rng::split(std::uint64_t stream) const {
  return Rng(splitmix64(key_ ^ splitmix64(stream + 0x632BE59BD9B4E019ULL)));
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) shape_fail("matmul", a, b);
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      const auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out[j] += aik * brow[j];
    }
  }
  require_finite(c, "matmul");
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) shape_fail("matmul_nt", a, b);
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto arow = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const auto brow = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += arow[k] * brow[k];
      c(i, j) = acc;
    }
  }
  require_finite(c, "matmul_nt");
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) shape_fail("matmul_tn", a, b);
  Matrix c(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const auto brow = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a(k, i);
      auto out = c.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) out[j] += aki * brow[j];
    }
  }
  require_finite(c, "matmul_tn");
  return c;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

Matrix add(const Matrix& a, const Matrix& b) {
  require_same_shape("add", a, b);
  Matrix c(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) c.data()[i] = a.data()[i] + b.data()[i];
  require_finite(c, "add");
  return c;
}

Matrix sub(const Matrix& a, const Matrix& b) {
  require_same_shape("sub", a, b);
  Matrix c(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) c.data()[i] = a.data()[i] - b.data()[i];
  require_finite(c, "sub");
  return c;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
  require_same_shape("hadamard", a, b);
  Matrix c(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) c.data()[i] = a.data()[i] * b.data()[i];
  require_finite(c, "hadamard");
  return c;
}

Matrix scale(const Matrix& a, double factor) {
  Matrix c(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) c.data()[i] = a.data()[i] * factor;
  require_finite(c, "scale");
  return c;
}

Matrix add_row(const Matrix& x, const Matrix& bias) {
  if (bias.rows() != 1 || bias.cols() != x.cols()) shape_fail("add_row", x, bias);
  Matrix c(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) c(i, j) = x(i, j) + bias(0, j);
  require_finite(c, "add_row");
  return c;
}

Matrix relu(const Matrix& x) {
  Matrix c(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) c.data()[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
  return c;
}

Matrix softmax_rows(const Matrix& x, const std::optional<ColumnMask>& mask) {
  if (!mask) return masked_softmax(x, [](std::size_t, std::size_t) { return true; });
  if (mask->size() != x.cols()) {
    throw ShapeError("softmax_rows: mask length " + std::to_string(mask->size()) +
                     " does not match input " + x.shape_string());
  }
  const ColumnMask& m = *mask;
  return masked_softmax(x, [&m](std::size_t, std::size_t j) { return static_cast<bool>(m[j]); });
}

Matrix softmax_rows_causal(const Matrix& x) {
  return masked_softmax(x, [](std::size_t i, std::size_t j) { return j <= i; });
}

Matrix layer_norm(const Matrix& x, const Matrix& gamma, const Matrix& beta, double eps) {
  if (gamma.rows() != 1 || gamma.cols() != x.cols()) shape_fail("layer_norm(gamma)", x, gamma);
  if (beta.rows() != 1 || beta.cols() != x.cols()) shape_fail("layer_norm(beta)", x, beta);
  const std::size_t d = x.cols();
  Matrix out(x.rows(), d);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto row = x.row(i);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double inv_std = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) out(i, j) = (row[j] - mean) * inv_std * gamma(0, j) + beta(0, j);
  }
  require_finite(out, "layer_norm");
  return out;
}

Matrix mean_rows(const Matrix& x) {
  if (x.rows() == 0) throw EmptyInputError("mean_rows: input " + x.shape_string() + " has no rows");
  Matrix out = column_sums(x);
  const double n = static_cast<double>(x.rows());
  for (double& v : out.data()) v /= n;
  return out;
}

Matrix column_sums(const Matrix& x) {
  Matrix out(1, x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(0, j) += x(i, j);
  return out;
}

Matrix concat_cols(std::span<const Matrix> parts) {
  if (parts.empty()) return Matrix();
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) shape_fail("concat_cols", parts.front(), p);
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out(i, offset + j) = p(i, j);
    offset += p.cols();
  }
  return out;
}

Matrix gather_rows(const Matrix& table, std::span<const std::size_t> ids) {
  Matrix out(ids.size(), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= table.rows()) {
      throw ShapeError("gather_rows: index " + std::to_string(ids[i]) + " out of range for table " +
                       table.shape_string());
    }
    std::copy(table.row(ids[i]).begin(), table.row(ids[i]).end(), out.row(i).begin());
  }
  return out;
}

Matrix dropout_mask(std::size_t rows, std::size_t cols, double p, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout: p must lie in [0, 1)");
  const double keep_scale = 1.0 / (1.0 - p);
  Matrix mask(rows, cols);
  for (double& v : mask.data()) v = rng.uniform() < p ? 0.0 : keep_scale;
  return mask;
}

Matrix dropout(const Matrix& x, double p, Rng& rng, bool training) {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout: p must lie in [0, 1)");
  if (!training || p == 0.0) return x;
  return hadamard(x, dropout_mask(x.rows(), x.cols(), p, rng));
}

std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> theta, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: h must be positive");
  std::vector<double> point(theta.begin(), theta.end());
  std::vector<double> grad(theta.size());
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double saved = point[i];
    point[i] = saved + h;
    const double plus = f(point);
    point[i] = saved - h;
    const double minus = f(point);
    point[i] = saved;
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      throw NumericError("finite_diff_grad: non-finite evaluation at coordinate " + std::to_string(i));
    }
    grad[i] = (plus - minus) / (2.0 * h);
  }
  return grad;
}

GradCheckReport compare_gradients(std::string name, std::span<const double> analytic,
                                  std::span<const double> numeric, double floor) {
  if (analytic.size() != numeric.size()) {
    throw ShapeError("compare_gradients: " + std::to_string(analytic.size()) + " analytic vs " +
                     std::to_string(numeric.size()) + " numeric entries");
  }
  GradCheckReport report{std::move(name), 0.0, 0.0, 0.0};
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i];
    const double n = numeric[i];
    const double rel = std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
    if (rel > report.max_rel_error || i == 0) {
      report.max_rel_error = rel;
      report.analytic = a;
      report.numeric = n;
    }
  }
  return report;
}

}  // namespace recall
