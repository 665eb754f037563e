#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "corrreid/features.hpp"

namespace corrreid::eval {

using Ranking = std::vector<std::size_t>;

/// Gallery indices by descending inner product with the query, ties by
/// ascending index. Features are expected to be unit-normalized.
Ranking rank_gallery(std::span<const double> query, const FeatureMatrix& gallery);

struct CmcResult {
  std::map<std::size_t, double> curve;  // rank -> probability
  std::size_t valid_queries = 0;
  std::size_t excluded_queries = 0;     // no same-label item in the ranking
};

/// Fraction of queries whose first correct match sits at position <= k, for
/// each requested k. Queries without any relevant item are excluded and
/// counted. Raises DataError when no query is valid.
CmcResult cmc(std::span<const Ranking> rankings, std::span<const int> query_labels,
              std::span<const int> gallery_labels, std::span<const std::size_t> ranks);

/// Mean over relevant positions r of (relevant items in top r) / r; empty when
/// the ranking holds no relevant item.
std::optional<double> average_precision(const Ranking& ranking, int query_label,
                                        std::span<const int> gallery_labels);

/// APs of valid queries, in query order.
std::vector<double> per_query_ap(std::span<const Ranking> rankings, std::span<const int> query_labels,
                                 std::span<const int> gallery_labels);

double mean_ap(std::span<const Ranking> rankings, std::span<const int> query_labels,
               std::span<const int> gallery_labels);

struct RetrievalReport {
  std::map<std::size_t, double> cmc;
  double map_score = 0.0;
  std::vector<double> per_query_ap;
  std::size_t num_queries = 0;
  std::size_t num_gallery = 0;
  std::size_t excluded_queries = 0;
  std::string config_fingerprint;
  std::map<std::string, std::uint64_t> seeds;

  bool operator==(const RetrievalReport&) const = default;
};

struct RetrievalSet {
  FeatureMatrix features;  // rows unit-normalized by evaluate()
  std::vector<int> labels;
  std::vector<std::string> ids;
  std::vector<std::optional<int>> cameras;
};

struct EvaluationOptions {
  std::vector<std::size_t> ranks{1, 5, 10};
  /// Drop gallery items sharing both label and camera with the query.
  bool exclude_same_camera = false;
};

struct Evaluation {
  RetrievalReport report;
  std::vector<Ranking> rankings;  // after camera filtering
  RetrievalSet query;             // normalized copies
  RetrievalSet gallery;
};

Evaluation evaluate(RetrievalSet query, RetrievalSet gallery, const EvaluationOptions& options);

/// Every item queries all others (self excluded). Used for set-level
/// diagnostics where no query/gallery split exists.
double leave_one_out_map(const FeatureMatrix& features, std::span<const int> labels);

/// Deterministic JSON: sorted keys, reals with six decimals.
std::string report_to_json(const RetrievalReport& report);
RetrievalReport report_from_json(const std::string& text);
void emit_report(const RetrievalReport& report, const std::string& path);

/// Field names every report carries.
const std::vector<std::string>& report_fields();

/// TSV: query_id, rank, gallery_id, similarity, correct.
void write_ranking_table(const Evaluation& evaluation, std::size_t depth, const std::string& path);

}  // namespace corrreid::eval
