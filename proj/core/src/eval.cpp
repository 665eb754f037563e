#include "corrreid/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json_format.hpp"

namespace corrreid {

namespace detail {

namespace {

void dump_into(const nlohmann::json& v, int decimals, int indent, int depth, std::string& out) {
  const auto pad = [&](int level) {
    if (indent > 0) out.append(std::size_t(level * indent), ' ');
  };
  const char* newline = indent > 0 ? "\n" : "";
  switch (v.type()) {
    case nlohmann::json::value_t::object: {
      if (v.empty()) {
        out += "{}";
        return;
      }
      out += "{";
      out += newline;
      bool first = true;
      for (auto it = v.begin(); it != v.end(); ++it) {
        if (!first) {
          out += ",";
          out += newline;
        }
        first = false;
        pad(depth + 1);
        out += nlohmann::json(it.key()).dump();
        out += indent > 0 ? ": " : ":";
        dump_into(it.value(), decimals, indent, depth + 1, out);
      }
      out += newline;
      pad(depth);
      out += "}";
      return;
    }
    case nlohmann::json::value_t::array: {
      if (v.empty()) {
        out += "[]";
        return;
      }
      out += "[";
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += indent > 0 ? ", " : ",";
        dump_into(v[i], decimals, indent, depth + 1, out);
      }
      out += "]";
      return;
    }
    case nlohmann::json::value_t::number_float: {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.*f", decimals, v.get<double>());
      std::string text = buf;
      if (text == "-0.000000") text = "0.000000";
      out += text;
      return;
    }
    default:
      out += v.dump();
  }
}

}  // namespace

std::string dump_fixed(const nlohmann::json& value, int decimals, int indent) {
  std::string out;
  dump_into(value, decimals, indent, 0, out);
  out += "\n";
  return out;
}

}  // namespace detail

namespace eval {

Ranking rank_gallery(std::span<const double> query, const FeatureMatrix& gallery) {
  if (gallery.rows() == 0) throw DataError("rank_gallery: empty gallery");
  if (gallery.cols() != query.size()) throw ShapeError("rank_gallery: query width mismatch");
  std::vector<double> sims(gallery.rows());
  for (std::size_t i = 0; i < sims.size(); ++i) sims[i] = dot(query, gallery.row(i));
  Ranking order(gallery.rows());
  std::iota(order.begin(), order.end(), 0);
  std::ranges::stable_sort(order, [&](std::size_t a, std::size_t b) { return sims[a] > sims[b]; });
  return order;
}

namespace {

void check_lengths(std::span<const Ranking> rankings, std::span<const int> query_labels) {
  if (rankings.size() != query_labels.size()) {
    throw ShapeError("rankings and query labels differ in length");
  }
}

std::optional<std::size_t> first_match(const Ranking& ranking, int label,
                                       std::span<const int> gallery_labels) {
  for (std::size_t pos = 0; pos < ranking.size(); ++pos)
    if (gallery_labels[ranking[pos]] == label) return pos;
  return std::nullopt;
}

}  // namespace

CmcResult cmc(std::span<const Ranking> rankings, std::span<const int> query_labels,
              std::span<const int> gallery_labels, std::span<const std::size_t> ranks) {
  check_lengths(rankings, query_labels);
  CmcResult result;
  std::vector<std::size_t> first_hits;
  for (std::size_t q = 0; q < rankings.size(); ++q) {
    const auto hit = first_match(rankings[q], query_labels[q], gallery_labels);
    if (!hit) {
      ++result.excluded_queries;
      continue;
    }
    first_hits.push_back(*hit);
  }
  if (first_hits.empty()) throw DataError("no query has a relevant gallery item");
  result.valid_queries = first_hits.size();
  for (const std::size_t k : ranks) {
    if (k == 0) throw ConfigError("CMC rank must be at least 1");
    const auto hits = std::ranges::count_if(first_hits, [k](std::size_t pos) { return pos < k; });
    result.curve[k] = double(hits) / double(first_hits.size());
  }
  return result;
}

std::optional<double> average_precision(const Ranking& ranking, int query_label,
                                        std::span<const int> gallery_labels) {
  std::size_t relevant = 0;
  double precision_sum = 0.0;
  for (std::size_t pos = 0; pos < ranking.size(); ++pos) {
    if (gallery_labels[ranking[pos]] != query_label) continue;
    ++relevant;
    precision_sum += double(relevant) / double(pos + 1);
  }
  if (relevant == 0) return std::nullopt;
  return precision_sum / double(relevant);
}

std::vector<double> per_query_ap(std::span<const Ranking> rankings, std::span<const int> query_labels,
                                 std::span<const int> gallery_labels) {
  check_lengths(rankings, query_labels);
  std::vector<double> aps;
  for (std::size_t q = 0; q < rankings.size(); ++q)
    if (const auto ap = average_precision(rankings[q], query_labels[q], gallery_labels)) aps.push_back(*ap);
  return aps;
}

double mean_ap(std::span<const Ranking> rankings, std::span<const int> query_labels,
               std::span<const int> gallery_labels) {
  const auto aps = per_query_ap(rankings, query_labels, gallery_labels);
  if (aps.empty()) throw DataError("no query has a relevant gallery item");
  return std::accumulate(aps.begin(), aps.end(), 0.0) / double(aps.size());
}

namespace {

void prepare(RetrievalSet& set, const char* what) {
  if (set.labels.size() != set.features.rows()) {
    throw DataError(std::string(what) + " has " + std::to_string(set.features.rows()) +
                    " feature rows but " + std::to_string(set.labels.size()) + " labels");
  }
  if (set.ids.empty()) {
    for (std::size_t i = 0; i < set.labels.size(); ++i) set.ids.push_back(std::to_string(i));
  }
  if (set.cameras.empty()) set.cameras.assign(set.labels.size(), std::nullopt);
  l2_normalize_rows(set.features);
}

}  // namespace

Evaluation evaluate(RetrievalSet query, RetrievalSet gallery, const EvaluationOptions& options) {
  prepare(query, "query set");
  prepare(gallery, "gallery set");
  if (gallery.features.rows() == 0) throw DataError("empty gallery");
  if (query.features.cols() != gallery.features.cols()) {
    throw ShapeError("query and gallery features differ in width");
  }
  Evaluation out;
  for (std::size_t q = 0; q < query.features.rows(); ++q) {
    Ranking ranking = rank_gallery(query.features.row(q), gallery.features);
    if (options.exclude_same_camera && query.cameras[q]) {
      std::erase_if(ranking, [&](std::size_t gi) {
        return gallery.labels[gi] == query.labels[q] && gallery.cameras[gi] == query.cameras[q];
      });
    }
    out.rankings.push_back(std::move(ranking));
  }
  const auto curve = cmc(out.rankings, query.labels, gallery.labels, options.ranks);
  out.report.cmc = curve.curve;
  out.report.per_query_ap = per_query_ap(out.rankings, query.labels, gallery.labels);
  out.report.map_score =
      std::accumulate(out.report.per_query_ap.begin(), out.report.per_query_ap.end(), 0.0) /
      double(out.report.per_query_ap.size());
  out.report.num_queries = query.features.rows();
  out.report.num_gallery = gallery.features.rows();
  out.report.excluded_queries = curve.excluded_queries;
  out.query = std::move(query);
  out.gallery = std::move(gallery);
  return out;
}

double leave_one_out_map(const FeatureMatrix& features, std::span<const int> labels) {
  Matrix normed = features;
  l2_normalize_rows(normed);
  std::vector<Ranking> rankings;
  std::vector<int> query_labels;
  for (std::size_t i = 0; i < normed.rows(); ++i) {
    Ranking r = rank_gallery(normed.row(i), normed);
    std::erase(r, i);
    rankings.push_back(std::move(r));
    query_labels.push_back(labels[i]);
  }
  return mean_ap(rankings, query_labels, labels);
}

const std::vector<std::string>& report_fields() {
  static const std::vector<std::string> fields{
      "cmc", "config_fingerprint", "excluded_queries", "map_score", "num_gallery",
      "num_queries", "per_query_ap", "seeds"};
  return fields;
}

std::string report_to_json(const RetrievalReport& report) {
  nlohmann::json j;
  nlohmann::json curve = nlohmann::json::object();
  for (const auto& [rank, value] : report.cmc) curve[std::to_string(rank)] = value;
  j["cmc"] = curve;
  j["map_score"] = report.map_score;
  j["per_query_ap"] = report.per_query_ap;
  j["num_queries"] = report.num_queries;
  j["num_gallery"] = report.num_gallery;
  j["excluded_queries"] = report.excluded_queries;
  j["config_fingerprint"] = report.config_fingerprint;
  j["seeds"] = nlohmann::json::object();
  for (const auto& [name, seed] : report.seeds) j["seeds"][name] = seed;
  return detail::dump_fixed(j);
}

RetrievalReport report_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("report is not valid JSON: ") + e.what());
  }
  for (const auto& field : report_fields())
    if (!j.contains(field)) throw DataError("report is missing field \"" + field + "\"");
  RetrievalReport r;
  for (const auto& [rank, value] : j["cmc"].items()) r.cmc[std::stoul(rank)] = value.get<double>();
  r.map_score = j["map_score"].get<double>();
  r.per_query_ap = j["per_query_ap"].get<std::vector<double>>();
  r.num_queries = j["num_queries"].get<std::size_t>();
  r.num_gallery = j["num_gallery"].get<std::size_t>();
  r.excluded_queries = j["excluded_queries"].get<std::size_t>();
  r.config_fingerprint = j["config_fingerprint"].get<std::string>();
  for (const auto& [name, seed] : j["seeds"].items()) r.seeds[name] = seed.get<std::uint64_t>();
  return r;
}

void emit_report(const RetrievalReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open report file " + path);
  out << report_to_json(report);
  if (!out) throw IoError("failed writing report file " + path);
}

void write_ranking_table(const Evaluation& evaluation, std::size_t depth, const std::string& path) {
  const auto& query = evaluation.query;
  const auto& gallery = evaluation.gallery;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open ranking table " + path);
  out << "query_id\trank\tgallery_id\tsimilarity\tcorrect\n";
  char sim[32];
  for (std::size_t q = 0; q < evaluation.rankings.size(); ++q) {
    const auto& ranking = evaluation.rankings[q];
    for (std::size_t pos = 0; pos < std::min(depth, ranking.size()); ++pos) {
      const std::size_t gi = ranking[pos];
      std::snprintf(sim, sizeof sim, "%.6f",
                    dot(query.features.row(q), gallery.features.row(gi)));
      out << query.ids.at(q) << '\t' << pos + 1 << '\t' << gallery.ids.at(gi) << '\t' << sim << '\t'
          << (gallery.labels[gi] == query.labels[q] ? 1 : 0) << '\n';
    }
  }
  if (!out) throw IoError("failed writing ranking table " + path);
}

}  // namespace eval
}  // namespace corrreid
