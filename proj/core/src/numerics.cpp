#include "corrreid/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace corrreid {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeError("matrix data length " + std::to_string(data_.size()) + " does not match " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged initializer for Matrix");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

Matrix Matrix::random_normal(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (double& x : m.values()) x = dist(rng);
  return m;
}

std::string shape_string(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

namespace {

void require(bool ok, const char* op, const Matrix& a, const Matrix& b) {
  if (!ok) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " +
                     shape_string(b));
  }
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b, MultiplyTally* tally) {
  require(a.cols() == b.rows(), "matmul", a, b);
  Matrix out(a.rows(), b.cols());
  const std::size_t n = a.cols();
  const std::size_t m = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* out_row = out.row(i).data();
    const double* a_row = a.row(i).data();
    for (std::size_t k = 0; k < n; ++k) {
      const double aik = a_row[k];
      const double* b_row = b.row(k).data();
      for (std::size_t j = 0; j < m; ++j) out_row[j] += aik * b_row[j];
    }
  }
  if (tally) tally->count += static_cast<std::uint64_t>(a.rows()) * n * m;
  return out;
}

Matrix matmul_bt(const Matrix& a, const Matrix& b, MultiplyTally* tally) {
  require(a.cols() == b.cols(), "matmul_bt", a, b);
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto a_row = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = dot(a_row, b.row(j));
  }
  if (tally) tally->count += static_cast<std::uint64_t>(a.rows()) * b.rows() * a.cols();
  return out;
}

Matrix matmul_at(const Matrix& a, const Matrix& b, MultiplyTally* tally) {
  require(a.rows() == b.rows(), "matmul_at", a, b);
  Matrix out(a.cols(), b.cols());
  const std::size_t m = b.cols();
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double* a_row = a.row(k).data();
    const double* b_row = b.row(k).data();
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a_row[i];
      if (aki == 0.0) continue;
      double* out_row = out.row(i).data();
      for (std::size_t j = 0; j < m; ++j) out_row[j] += aki * b_row[j];
    }
  }
  if (tally) tally->count += static_cast<std::uint64_t>(a.rows()) * a.cols() * m;
  return out;
}

Matrix transpose(const Matrix& m) {
  Matrix t(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
  return t;
}

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> indices) {
  Matrix out(indices.size(), m.cols());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= m.rows()) throw ShapeError("gather_rows: row index out of range");
    std::ranges::copy(m.row(indices[r]), out.row(r).begin());
  }
  return out;
}

void add_scaled(Matrix& dst, const Matrix& src, double scale) {
  require(dst.rows() == src.rows() && dst.cols() == src.cols(), "add_scaled", dst, src);
  auto d = dst.values();
  auto s = src.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += scale * s[i];
}

void scale_inplace(Matrix& m, double factor) {
  for (double& x : m.values()) x *= factor;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

bool all_finite(const Matrix& m) {
  return std::ranges::all_of(m.values(), [](double x) { return std::isfinite(x); });
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "max_abs_diff", a, b);
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a.values()[i] - b.values()[i]));
  return worst;
}

void l2_normalize_rows(Matrix& m) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const double n = norm(row);
    if (!(n > 0.0) || !std::isfinite(n)) {
      throw DegenerateRowError("cannot normalize row " + std::to_string(r) + " with norm " +
                               std::to_string(n));
    }
    for (double& x : row) x /= n;
  }
}

std::vector<double> stable_softmax_row(std::span<const double> scores,
                                       std::span<const std::uint8_t> mask) {
  if (scores.size() != mask.size()) throw ShapeError("softmax: scores and mask differ in length");
  double shift = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (mask[i]) shift = std::max(shift, scores[i]);
  if (shift == -std::numeric_limits<double>::infinity()) {
    throw DegenerateRowError("softmax row has no unmasked entry");
  }
  std::vector<double> out(scores.size(), 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!mask[i]) continue;
    out[i] = std::exp(scores[i] - shift);
    total += out[i];
  }
  for (double& x : out) x /= total;
  return out;
}

std::vector<double> stable_softmax_row(std::span<const double> scores) {
  const std::vector<std::uint8_t> mask(scores.size(), 1);
  return stable_softmax_row(scores, mask);
}

std::vector<std::size_t> topk_indices(std::span<const double> scores, std::size_t k) {
  if (scores.empty()) throw ShapeError("topk_indices: empty input");
  if (k == 0) throw ConfigError("topk_indices: k must be at least 1");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  const auto better = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  };
  const std::size_t keep = std::min(k, scores.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                    better);
  order.resize(keep);
  return order;
}

GradCheckReport grad_check(const ScalarFunction& f, std::span<const double> point,
                           std::span<const double> analytic, const GradCheckOptions& options) {
  if (point.size() != analytic.size()) throw ShapeError("grad_check: gradient length mismatch");
  std::vector<std::size_t> probes(point.size());
  std::iota(probes.begin(), probes.end(), 0);
  if (probes.size() > options.max_probes) {
    Rng rng(options.seed);
    std::shuffle(probes.begin(), probes.end(), rng);
    probes.resize(options.max_probes);
    std::ranges::sort(probes);
  }

  GradCheckReport report;
  std::vector<double> x(point.begin(), point.end());
  for (const std::size_t i : probes) {
    const double original = x[i];
    x[i] = original + options.eps;
    const double plus = f(x);
    x[i] = original - options.eps;
    const double minus = f(x);
    x[i] = original;
    ++report.probe_count;
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      report.failed_coordinate = i;
      report.pass = false;
      return report;
    }
    const double numeric = (plus - minus) / (2.0 * options.eps);
    const double abs_err = std::abs(numeric - analytic[i]);
    const double rel_err = abs_err / std::max(1.0, std::abs(analytic[i]));
    report.max_abs_err = std::max(report.max_abs_err, abs_err);
    if (rel_err > report.max_rel_err) {
      report.max_rel_err = rel_err;
      report.worst_coordinate = i;
    }
  }
  report.pass = report.max_rel_err <= options.tolerance;
  return report;
}

}  // namespace corrreid
