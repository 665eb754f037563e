#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "corrreid/errors.hpp"

namespace corrreid {

using Rng = std::mt19937_64;

/// Per-call accumulator of scalar multiplications. Kernels add to it only
/// when a pointer is supplied; there is no global counter.
struct MultiplyTally {
  std::uint64_t count = 0;
};

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix random_normal(std::size_t rows, std::size_t cols, double stddev, Rng& rng);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

std::string shape_string(const Matrix& m);

/// a * b. Records rows(a) * cols(a) * cols(b) multiplications into `tally`.
Matrix matmul(const Matrix& a, const Matrix& b, MultiplyTally* tally = nullptr);
/// a * b^T.
Matrix matmul_bt(const Matrix& a, const Matrix& b, MultiplyTally* tally = nullptr);
/// a^T * b.
Matrix matmul_at(const Matrix& a, const Matrix& b, MultiplyTally* tally = nullptr);

Matrix transpose(const Matrix& m);
Matrix gather_rows(const Matrix& m, std::span<const std::size_t> indices);

/// dst += scale * src
void add_scaled(Matrix& dst, const Matrix& src, double scale = 1.0);
void scale_inplace(Matrix& m, double factor);

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);
bool all_finite(const Matrix& m);
double max_abs_diff(const Matrix& a, const Matrix& b);

/// Divides every row by its Euclidean norm. A zero row raises DegenerateRowError.
void l2_normalize_rows(Matrix& m);

/// Softmax over the entries where mask is non-zero, with max subtraction.
/// Masked-out entries are exactly zero. An all-false mask raises
/// DegenerateRowError.
std::vector<double> stable_softmax_row(std::span<const double> scores,
                                       std::span<const std::uint8_t> mask);
/// Unmasked overload.
std::vector<double> stable_softmax_row(std::span<const double> scores);

/// Indices of the k largest scores ordered by descending score, ties by
/// ascending index. Returns every index when k >= scores.size().
std::vector<std::size_t> topk_indices(std::span<const double> scores, std::size_t k);

struct GradCheckReport {
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  std::size_t probe_count = 0;
  bool pass = false;
  /// Set when f evaluated to a non-finite value at a probe.
  std::optional<std::size_t> failed_coordinate;
  /// Coordinate with the largest relative error.
  std::size_t worst_coordinate = 0;
};

struct GradCheckOptions {
  double eps = 1e-6;
  double tolerance = 1e-4;
  /// Blocks with more coordinates than this are checked on a random sample
  /// of exactly this many coordinates.
  std::size_t max_probes = 64;
  std::uint64_t seed = 0x5eed;
};

using ScalarFunction = std::function<double(std::span<const double>)>;

/// Compares `analytic` against central differences of `f` at `point`.
/// Relative error is |analytic - numeric| / max(1, |analytic|).
GradCheckReport grad_check(const ScalarFunction& f, std::span<const double> point,
                           std::span<const double> analytic, const GradCheckOptions& options = {});

}  // namespace corrreid
