#include <cmath>
#include <cstdlib>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <gtest/gtest.h>

#include "corrreid/numerics.hpp"
#include "corrreid/parallel.hpp"
#include "test_support.hpp"

namespace corrreid {
namespace {

using testing::random_matrix;

Matrix naive_product(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

TEST(Matmul, MatchesTripleLoop) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const std::size_t n = 1 + seed % 7, k = 2 + seed % 5, m = 1 + seed % 4;
    const Matrix a = random_matrix(n, k, seed), b = random_matrix(k, m, seed + 100);
    EXPECT_LE(max_abs_diff(matmul(a, b), naive_product(a, b)), 1e-12);
    EXPECT_LE(max_abs_diff(matmul_bt(a, transpose(b)), naive_product(a, b)), 1e-12);
    EXPECT_LE(max_abs_diff(matmul_at(transpose(a), b), naive_product(a, b)), 1e-12);
  }
}

TEST(Matmul, TallyCountsScalarProducts) {
  MultiplyTally tally;
  matmul(Matrix(3, 4), Matrix(4, 5), &tally);
  EXPECT_EQ(tally.count, 60u);
  matmul_bt(Matrix(2, 4), Matrix(6, 4), &tally);
  EXPECT_EQ(tally.count, 60u + 48u);
  matmul_at(Matrix(4, 2), Matrix(4, 3), &tally);
  EXPECT_EQ(tally.count, 60u + 48u + 24u);
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), ShapeError);
  EXPECT_THROW(matmul_bt(Matrix(2, 3), Matrix(2, 4)), ShapeError);
  EXPECT_THROW(matmul_at(Matrix(2, 3), Matrix(3, 3)), ShapeError);
  Matrix a(2, 2);
  EXPECT_THROW(add_scaled(a, Matrix(2, 3)), ShapeError);
}

TEST(Matrix, IdentityAndRows) {
  const Matrix i3 = Matrix::identity(3);
  const Matrix a = Matrix::from_rows({{1, 2, 3}, {4, 5, 6}});
  EXPECT_EQ(matmul(a, i3), a);
  EXPECT_EQ(a.row(1)[2], 6.0);
  EXPECT_EQ(gather_rows(a, std::vector<std::size_t>{1, 0}), Matrix::from_rows({{4, 5, 6}, {1, 2, 3}}));
  EXPECT_THROW(gather_rows(a, std::vector<std::size_t>{2}), ShapeError);
}

TEST(Normalize, RowsHaveUnitNorm) {
  Matrix m = random_matrix(10, 6, 3);
  l2_normalize_rows(m);
  for (std::size_t r = 0; r < m.rows(); ++r) EXPECT_NEAR(norm(m.row(r)), 1.0, 1e-12);
}

TEST(Normalize, ZeroRowIsDegenerate) {
  Matrix m(2, 3, 1.0);
  m(1, 0) = m(1, 1) = m(1, 2) = 0.0;
  EXPECT_THROW(l2_normalize_rows(m), DegenerateRowError);
}

TEST(Softmax, MaskedEntriesAreZeroAndRowSumsToOne) {
  const std::vector<double> scores{0.3, -1.0, 2.5, 0.0, 7.0};
  const std::vector<std::uint8_t> mask{1, 0, 1, 1, 0};
  const auto p = stable_softmax_row(scores, mask);
  EXPECT_EQ(p[1], 0.0);
  EXPECT_EQ(p[4], 0.0);
  EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
  const double z = std::exp(0.3) + std::exp(2.5) + std::exp(0.0);
  EXPECT_NEAR(p[2], std::exp(2.5) / z, 1e-12);
}

TEST(Softmax, LargeScoresDoNotOverflow) {
  const std::vector<double> scores{1000.0, 1001.0, 999.0};
  const auto p = stable_softmax_row(scores);
  for (double x : p) EXPECT_TRUE(std::isfinite(x));
  EXPECT_GT(p[1], p[0]);
  EXPECT_NEAR(p[0] + p[1] + p[2], 1.0, 1e-12);
}

TEST(Softmax, AllMaskedIsDegenerate) {
  const std::vector<double> scores{1.0, 2.0};
  const std::vector<std::uint8_t> mask{0, 0};
  EXPECT_THROW(stable_softmax_row(scores, mask), DegenerateRowError);
}

TEST(TopK, OrdersByScoreThenIndex) {
  const std::vector<double> scores{0.5, 0.9, 0.5, 0.9, 0.1};
  EXPECT_EQ(topk_indices(scores, 3), (std::vector<std::size_t>{1, 3, 0}));
  EXPECT_EQ(topk_indices(scores, 10).size(), 5u);
}

TEST(TopK, InvalidArguments) {
  const std::vector<double> scores{1.0};
  EXPECT_THROW(topk_indices(scores, 0), ConfigError);
  EXPECT_THROW(topk_indices(std::vector<double>{}, 1), ShapeError);
}

TEST(GradCheck, AcceptsExactGradient) {
  const std::vector<double> x{0.3, -1.2, 2.0, 0.7};
  const auto f = [](std::span<const double> v) {
    double s = 0.0;
    for (double a : v) s += std::sin(a) * a;
    return s;
  };
  std::vector<double> g;
  for (double a : x) g.push_back(std::cos(a) * a + std::sin(a));
  const auto report = grad_check(f, x, g);
  EXPECT_TRUE(report.pass);
  EXPECT_EQ(report.probe_count, x.size());
  EXPECT_LT(report.max_rel_err, 1e-8);
}

TEST(GradCheck, RejectsWrongGradient) {
  const std::vector<double> x{1.0, 2.0};
  const auto f = [](std::span<const double> v) { return v[0] * v[0] + v[1]; };
  const std::vector<double> wrong{2.0, 1.5};
  const auto report = grad_check(f, x, wrong);
  EXPECT_FALSE(report.pass);
  EXPECT_EQ(report.worst_coordinate, 1u);
}

TEST(GradCheck, FlagsNonFiniteEvaluation) {
  const std::vector<double> x{0.0};
  const auto f = [](std::span<const double> v) { return v[0] > 0 ? std::numeric_limits<double>::quiet_NaN() : 0.0; };
  const auto report = grad_check(f, x, std::vector<double>{0.0});
  EXPECT_FALSE(report.pass);
  ASSERT_TRUE(report.failed_coordinate.has_value());
  EXPECT_EQ(*report.failed_coordinate, 0u);
}

TEST(GradCheck, SamplesLargeBlocks) {
  std::vector<double> x(500, 0.5), g(500, 1.0);
  const auto f = [](std::span<const double> v) { return std::accumulate(v.begin(), v.end(), 0.0); };
  GradCheckOptions opts;
  opts.max_probes = 64;
  EXPECT_EQ(grad_check(f, x, g, opts).probe_count, 64u);
}

TEST(Parallel, VisitsEveryIndexOnce) {
  setenv("CORRREID_THREADS", "3", 1);
  EXPECT_EQ(thread_budget(), 3u);
  std::vector<int> hits(101, 0);
  parallel_for(hits.size(), [&](std::size_t i) { hits[i] += 1; });
  for (int h : hits) EXPECT_EQ(h, 1);
  unsetenv("CORRREID_THREADS");
}

TEST(Parallel, RethrowsWorkerException) {
  setenv("CORRREID_THREADS", "2", 1);
  EXPECT_THROW(parallel_for(10, [](std::size_t i) {
                 if (i == 7) throw DataError("boom");
               }),
               DataError);
  unsetenv("CORRREID_THREADS");
}

TEST(Parallel, IgnoresInvalidBudget) {
  setenv("CORRREID_THREADS", "zero", 1);
  EXPECT_GE(thread_budget(), 1u);
  setenv("CORRREID_THREADS", "-4", 1);
  EXPECT_GE(thread_budget(), 1u);
  unsetenv("CORRREID_THREADS");
}

}  // namespace
}  // namespace corrreid
