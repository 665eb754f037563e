#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "corrreid/eval.hpp"
#include "test_support.hpp"

namespace corrreid::eval {
namespace {

using testing::random_unit_rows;

std::vector<int> random_labels(std::size_t n, int classes, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<int> pick(0, classes - 1);
  std::vector<int> out(n);
  for (int& l : out) l = pick(rng);
  return out;
}

Ranking shuffled(std::size_t n, std::uint64_t seed) {
  Ranking r(n);
  std::iota(r.begin(), r.end(), 0);
  Rng rng(seed);
  std::shuffle(r.begin(), r.end(), rng);
  return r;
}

// Precision at every cut, averaged over relevant cuts, written out in full.
std::optional<double> ap_oracle(const Ranking& r, int label, const std::vector<int>& gallery) {
  double sum = 0.0;
  int relevant = 0;
  for (std::size_t cut = 1; cut <= r.size(); ++cut) {
    if (gallery[r[cut - 1]] != label) continue;
    ++relevant;
    int hits = 0;
    for (std::size_t t = 0; t < cut; ++t) hits += gallery[r[t]] == label;
    sum += double(hits) / double(cut);
  }
  if (relevant == 0) return std::nullopt;
  return sum / relevant;
}

TEST(RankGallery, QueryItselfComesFirst) {
  const Matrix g = random_unit_rows(8, 5, 1);
  const Ranking r = rank_gallery(g.row(3), g);
  EXPECT_EQ(r.front(), 3u);
  EXPECT_NEAR(dot(g.row(3), g.row(3)), 1.0, 1e-12);
}

TEST(RankGallery, OrthogonalPair) {
  const Matrix g = Matrix::from_rows({{1.0, 0.0}, {0.0, 1.0}});
  const std::vector<double> q{0.0, 1.0};
  EXPECT_EQ(rank_gallery(q, g), (Ranking{1, 0}));
}

TEST(RankGallery, MatchesSortOracle) {
  for (std::uint64_t s = 0; s < 100; ++s) {
    const std::size_t n = 1 + s % 32;
    const Matrix g = random_unit_rows(n, 6, s);
    const Matrix q = random_unit_rows(1, 6, s + 999);
    Ranking expected(n);
    std::iota(expected.begin(), expected.end(), 0);
    std::stable_sort(expected.begin(), expected.end(),
                     [&](auto a, auto b) { return dot(q.row(0), g.row(a)) > dot(q.row(0), g.row(b)); });
    ASSERT_EQ(rank_gallery(q.row(0), g), expected);
  }
}

TEST(RankGallery, TiesByIndexAndEmptyGallery) {
  const Matrix g(4, 2, 0.5);
  const std::vector<double> q{1.0, 0.0};
  EXPECT_EQ(rank_gallery(q, g), (Ranking{0, 1, 2, 3}));
  EXPECT_THROW(rank_gallery(q, Matrix(0, 2)), DataError);
}

TEST(Cmc, CorrectFirst) {
  const std::vector<Ranking> r{{0, 1, 2}};
  const std::vector<int> ql{7}, gl{7, 1, 2};
  const std::vector<std::size_t> ranks{1};
  EXPECT_DOUBLE_EQ(cmc(r, ql, gl, ranks).curve.at(1), 1.0);
}

TEST(Cmc, CorrectThird) {
  const std::vector<Ranking> r{{0, 1, 2, 3, 4, 5}};
  const std::vector<int> ql{7}, gl{1, 2, 7, 3, 4, 5};
  const std::vector<std::size_t> ranks{1, 5};
  const CmcResult c = cmc(r, ql, gl, ranks);
  EXPECT_DOUBLE_EQ(c.curve.at(1), 0.0);
  EXPECT_DOUBLE_EQ(c.curve.at(5), 1.0);
}

TEST(Cmc, MatchesScanOracleAndIsMonotone) {
  for (std::uint64_t s = 0; s < 100; ++s) {
    const std::size_t nq = 1 + s % 10, ng = 2 + s % 30;
    const std::vector<int> ql = random_labels(nq, 4, s), gl = random_labels(ng, 4, s + 1000);
    std::vector<Ranking> rankings;
    for (std::size_t q = 0; q < nq; ++q) rankings.push_back(shuffled(ng, s * 100 + q));
    const std::vector<std::size_t> ranks{1, 2, 5, 10, 32};
    std::vector<std::optional<std::size_t>> first(nq);
    std::size_t valid = 0;
    for (std::size_t q = 0; q < nq; ++q) {
      for (std::size_t p = 0; p < ng; ++p)
        if (gl[rankings[q][p]] == ql[q]) {
          first[q] = p + 1;
          break;
        }
      valid += first[q].has_value();
    }
    if (valid == 0) {
      EXPECT_THROW(cmc(rankings, ql, gl, ranks), DataError);
      continue;
    }
    const CmcResult c = cmc(rankings, ql, gl, ranks);
    ASSERT_EQ(c.valid_queries, valid);
    ASSERT_EQ(c.excluded_queries, nq - valid);
    double previous = 0.0;
    for (const std::size_t k : ranks) {
      std::size_t hits = 0;
      for (const auto& f : first) hits += f && *f <= k;
      ASSERT_EQ(c.curve.at(k), double(hits) / double(valid));
      ASSERT_GE(c.curve.at(k), previous);
      previous = c.curve.at(k);
    }
  }
}

TEST(AveragePrecision, PerfectOrderIsOne) {
  const std::vector<int> gl{3, 3, 3, 1, 2};
  EXPECT_DOUBLE_EQ(*average_precision({0, 1, 2, 3, 4}, 3, gl), 1.0);
}

TEST(AveragePrecision, RelevantAtOneAndThree) {
  const std::vector<int> gl{5, 0, 5, 1};
  EXPECT_DOUBLE_EQ(*average_precision({0, 1, 2, 3}, 5, gl), (1.0 + 2.0 / 3.0) / 2.0);
  EXPECT_DOUBLE_EQ(*ap_oracle({0, 1, 2, 3}, 5, gl), (1.0 + 2.0 / 3.0) / 2.0);
}

TEST(AveragePrecision, NoRelevantIsEmpty) {
  const std::vector<int> gl{1, 2};
  EXPECT_FALSE(average_precision({0, 1}, 9, gl).has_value());
}

TEST(MeanAp, MatchesDefinitionOracle) {
  for (std::uint64_t s = 0; s < 100; ++s) {
    const std::size_t nq = 1 + s % 8, ng = 2 + s % 30;
    const std::vector<int> ql = random_labels(nq, 3, s + 7), gl = random_labels(ng, 3, s + 2000);
    std::vector<Ranking> rankings;
    for (std::size_t q = 0; q < nq; ++q) rankings.push_back(shuffled(ng, s * 31 + q));
    double sum = 0.0;
    std::size_t valid = 0;
    for (std::size_t q = 0; q < nq; ++q)
      if (const auto ap = ap_oracle(rankings[q], ql[q], gl)) {
        sum += *ap;
        ++valid;
      }
    if (valid == 0) {
      EXPECT_THROW(mean_ap(rankings, ql, gl), DataError);
      continue;
    }
    ASSERT_NEAR(mean_ap(rankings, ql, gl), sum / double(valid), 1e-12);
    ASSERT_EQ(per_query_ap(rankings, ql, gl).size(), valid);
  }
}

TEST(MeanAp, OneIffRelevantRankedFirst) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const std::vector<int> gl = random_labels(20, 3, s);
    const std::vector<int> ql{gl[0]};
    Ranking r(20);
    std::iota(r.begin(), r.end(), 0);
    std::stable_partition(r.begin(), r.end(), [&](auto i) { return gl[i] == ql[0]; });
    const std::vector<Ranking> good{r};
    EXPECT_DOUBLE_EQ(mean_ap(good, ql, gl), 1.0);
    const auto last_relevant = std::count(gl.begin(), gl.end(), ql[0]);
    if (last_relevant < 20) {
      std::swap(r[std::size_t(last_relevant) - 1], r[std::size_t(last_relevant)]);
      const std::vector<Ranking> bad{r};
      EXPECT_LT(mean_ap(bad, ql, gl), 1.0);
    }
  }
}

TEST(MeanAp, AppendingIrrelevantTailKeepsAp) {
  const std::vector<int> gl{1, 0, 1, 2, 1};
  const Ranking r{2, 1, 0, 3, 4};
  const double before = *average_precision(r, 1, gl);
  std::vector<int> extended = gl;
  extended.push_back(9);
  Ranking longer = r;
  longer.push_back(5);
  EXPECT_DOUBLE_EQ(*average_precision(longer, 1, extended), before);
}

TEST(Evaluate, GalleryPermutationInvariance) {
  const std::size_t ng = 24, nq = 6;
  RetrievalSet gallery{random_unit_rows(ng, 8, 1), random_labels(ng, 4, 2), {}, {}};
  RetrievalSet query{random_unit_rows(nq, 8, 3), random_labels(nq, 4, 4), {}, {}};
  const Evaluation a = evaluate(query, gallery, {});
  const Ranking perm = shuffled(ng, 5);
  RetrievalSet permuted{gather_rows(gallery.features, perm), {}, {}, {}};
  for (const std::size_t i : perm) permuted.labels.push_back(gallery.labels[i]);
  const Evaluation b = evaluate(query, permuted, {});
  EXPECT_NEAR(a.report.map_score, b.report.map_score, 1e-12);
  for (const auto& [k, v] : a.report.cmc) EXPECT_NEAR(v, b.report.cmc.at(k), 1e-12);
}

TEST(Evaluate, SameCameraExclusionDropsMatches) {
  RetrievalSet gallery{Matrix::from_rows({{1.0, 0.0}, {0.9, 0.1}, {0.0, 1.0}}), {1, 1, 2}, {}, {0, 1, 0}};
  RetrievalSet query{Matrix::from_rows({{1.0, 0.0}}), {1}, {}, {0}};
  EvaluationOptions opts;
  opts.exclude_same_camera = true;
  const Evaluation e = evaluate(query, gallery, opts);
  EXPECT_EQ(e.rankings.front(), (Ranking{1, 2}));
  EXPECT_DOUBLE_EQ(e.report.map_score, 1.0);
}

TEST(Evaluate, ExcludedQueriesAreCounted) {
  RetrievalSet gallery{random_unit_rows(4, 3, 1), {1, 1, 2, 2}, {}, {}};
  RetrievalSet query{random_unit_rows(2, 3, 2), {1, 5}, {}, {}};
  const Evaluation e = evaluate(query, gallery, {});
  EXPECT_EQ(e.report.excluded_queries, 1u);
  EXPECT_EQ(e.report.per_query_ap.size(), 1u);
  EXPECT_EQ(e.report.num_queries, 2u);
}

TEST(Evaluate, LabelCountMismatchIsDataError) {
  RetrievalSet gallery{random_unit_rows(4, 3, 1), {1, 1, 2}, {}, {}};
  RetrievalSet query{random_unit_rows(1, 3, 2), {1}, {}, {}};
  EXPECT_THROW(evaluate(query, gallery, {}), DataError);
}

TEST(LeaveOneOut, SeparatedClustersScoreOne) {
  Matrix f = Matrix::from_rows({{1, 0}, {0.99, 0.01}, {0, 1}, {0.02, 0.98}});
  l2_normalize_rows(f);
  const std::vector<int> labels{0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(leave_one_out_map(f, labels), 1.0);
}

RetrievalReport sample_report() {
  RetrievalReport r;
  r.cmc = {{1, 0.5}, {5, 0.75}, {10, 1.0}};
  r.map_score = 0.6123456789;
  r.per_query_ap = {0.25, 1.0 / 3.0, 0.9};
  r.num_queries = 4;
  r.num_gallery = 12;
  r.excluded_queries = 1;
  r.config_fingerprint = "00ff00ff00ff00ff";
  r.seeds = {{"data", 3}, {"pipeline", 7}};
  return r;
}

TEST(Report, DeterministicBytes) {
  EXPECT_EQ(report_to_json(sample_report()), report_to_json(sample_report()));
  testing::TempDir dir("report");
  emit_report(sample_report(), dir.str("a.json"));
  emit_report(sample_report(), dir.str("b.json"));
  auto slurp = [](const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  EXPECT_EQ(slurp(dir.str("a.json")), slurp(dir.str("b.json")));
}

TEST(Report, RoundTripsAtSixDecimals) {
  const RetrievalReport r = sample_report();
  const RetrievalReport back = report_from_json(report_to_json(r));
  EXPECT_NEAR(back.map_score, r.map_score, 5e-7);
  for (std::size_t i = 0; i < r.per_query_ap.size(); ++i) EXPECT_NEAR(back.per_query_ap[i], r.per_query_ap[i], 5e-7);
  EXPECT_EQ(back.cmc.size(), r.cmc.size());
  EXPECT_EQ(back.config_fingerprint, r.config_fingerprint);
  EXPECT_EQ(back.seeds, r.seeds);
  EXPECT_EQ(report_to_json(back), report_to_json(r));
}

TEST(Report, SchemaCarriesDocumentedFields) {
  const nlohmann::json j = nlohmann::json::parse(report_to_json(sample_report()));
  for (const std::string& field : report_fields()) EXPECT_TRUE(j.contains(field)) << field;
  for (const char* name : {"cmc", "map_score", "per_query_ap", "num_queries", "num_gallery", "config_fingerprint", "seeds"})
    EXPECT_TRUE(j.contains(name)) << name;
  std::vector<std::string> keys;
  for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
  EXPECT_TRUE(std::is_sorted(keys.begin(), keys.end()));
  const std::string text = report_to_json(sample_report());
  EXPECT_NE(text.find("0.612346"), std::string::npos);
}

TEST(Report, MalformedTextIsDataError) {
  EXPECT_THROW(report_from_json("{"), DataError);
  EXPECT_THROW(report_from_json("{}"), DataError);
}

TEST(RankingTable, WritesOneLinePerQueryAndRank) {
  RetrievalSet gallery{random_unit_rows(5, 3, 1), {1, 1, 2, 2, 3}, {"g0", "g1", "g2", "g3", "g4"}, {}};
  RetrievalSet query{random_unit_rows(2, 3, 2), {1, 2}, {"q0", "q1"}, {}};
  const Evaluation e = evaluate(query, gallery, {});
  testing::TempDir dir("ranking");
  write_ranking_table(e, 3, dir.str("r.tsv"));
  std::ifstream in(dir.str("r.tsv"));
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  std::size_t data_lines = 0;
  for (const auto& l : lines)
    if (l.rfind("q", 0) == 0 && l.rfind("query_id", 0) != 0) ++data_lines;
  EXPECT_EQ(data_lines, 6u);
  std::istringstream first(lines.back());
  std::vector<std::string> cols;
  for (std::string c; std::getline(first, c, '\t');) cols.push_back(c);
  EXPECT_EQ(cols.size(), 5u);
}

}  // namespace
}  // namespace corrreid::eval
