#include "corrreid/lcm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace corrreid::lcm {

MemoryBank bank_update(MemoryBank bank, const LocalFeatures& local, std::size_t t) {
  if (bank.momentum < 0.0 || bank.momentum > 1.0) {
    throw ConfigError("memory bank momentum must lie in [0, 1]");
  }
  if (t < bank.epoch) {
    throw StateError("memory bank update for epoch " + std::to_string(t) +
                     " after epoch " + std::to_string(bank.epoch - 1));
  }
  if (t == 0) {
    bank.parts = local.parts;
  } else {
    if (bank.parts.empty()) throw StateError("memory bank must be initialized at t = 0");
    if (bank.num_parts() != local.num_parts() || bank.slots() != local.items() ||
        bank.parts.front().cols() != local.dim()) {
      throw ShapeError("memory bank shape differs from local features");
    }
    for (std::size_t p = 0; p < bank.num_parts(); ++p) {
      auto w = bank.parts[p].values();
      const auto l = local.parts[p].values();
      for (std::size_t i = 0; i < w.size(); ++i)
        w[i] = (1.0 - bank.momentum) * w[i] + bank.momentum * l[i];
    }
    if (bank.momentum > 0.0)
      for (auto& part : bank.parts) l2_normalize_rows(part);
  }
  bank.epoch = t + 1;
  return bank;
}

PositiveSet mine_positives(std::span<const double> anchor, const Matrix& bank_part, std::size_t k,
                           std::optional<std::size_t> exclude_slot) {
  if (bank_part.rows() == 0) throw ShapeError("mine_positives: empty memory bank");
  std::vector<double> sims(bank_part.rows());
  for (std::size_t n = 0; n < sims.size(); ++n) sims[n] = dot(anchor, bank_part.row(n));
  PositiveSet set;
  if (exclude_slot && *exclude_slot < sims.size()) {
    if (sims.size() == 1) throw ShapeError("mine_positives: no slot left after exclusion");
    sims[*exclude_slot] = -std::numeric_limits<double>::infinity();
    k = std::min(k, sims.size() - 1);
  }
  set.members = topk_indices(sims, k);
  for (const std::size_t m : set.members) set.similarities.push_back(sims[m]);
  return set;
}

std::vector<PositiveSet> mine_all(const LocalFeatures& local, const MemoryBank& bank,
                                  std::size_t k, bool include_self) {
  if (bank.num_parts() != local.num_parts()) throw ShapeError("mine_all: part count mismatch");
  std::vector<PositiveSet> sets;
  sets.reserve(local.num_parts() * local.items());
  for (std::size_t p = 0; p < local.num_parts(); ++p) {
    for (std::size_t j = 0; j < local.items(); ++j) {
      std::optional<std::size_t> exclude;
      if (!include_self) exclude = j;
      auto set = mine_positives(local.parts[p].row(j), bank.parts[p], k, exclude);
      set.item = j;
      set.part = p;
      sets.push_back(std::move(set));
    }
  }
  return sets;
}

ClusteringLoss clustering_loss(const LocalFeatures& local, const MemoryBank& bank,
                               std::span<const PositiveSet> positives, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("clustering loss temperature must be positive");
  if (positives.empty()) throw ShapeError("clustering_loss: no anchors");
  ClusteringLoss out;
  out.gradient = LocalFeatures(local.num_parts(), local.items(), local.dim());
  const double inv_t = 1.0 / temperature;
  const double per_anchor = 1.0 / double(positives.size());

  for (const auto& set : positives) {
    if (set.members.empty()) throw ShapeError("clustering_loss: empty positive set");
    const Matrix& w = bank.parts.at(set.part);
    const auto l = local.parts.at(set.part).row(set.item);
    const std::size_t slots = w.rows();

    std::vector<double> logits(slots);
    double all_max = -std::numeric_limits<double>::infinity();
    for (std::size_t n = 0; n < slots; ++n) {
      logits[n] = dot(l, w.row(n)) * inv_t;
      all_max = std::max(all_max, logits[n]);
    }
    double pos_max = -std::numeric_limits<double>::infinity();
    for (const std::size_t m : set.members) pos_max = std::max(pos_max, logits[m]);

    double all_sum = 0.0;
    for (std::size_t n = 0; n < slots; ++n) all_sum += std::exp(logits[n] - all_max);
    double pos_sum = 0.0;
    for (const std::size_t m : set.members) pos_sum += std::exp(logits[m] - pos_max);

    const double lse_all = all_max + std::log(all_sum);
    const double lse_pos = pos_max + std::log(pos_sum);
    out.loss += (lse_all - lse_pos) * per_anchor;

    // d/dl = (E_all[w] - E_pos[w]) / tau
    auto grad = out.gradient.parts[set.part].row(set.item);
    const double coef = inv_t * per_anchor;
    for (std::size_t n = 0; n < slots; ++n) {
      const double p = std::exp(logits[n] - lse_all) * coef;
      const auto wn = w.row(n);
      for (std::size_t c = 0; c < grad.size(); ++c) grad[c] += p * wn[c];
    }
    for (const std::size_t m : set.members) {
      const double q = std::exp(logits[m] - lse_pos) * coef;
      const auto wm = w.row(m);
      for (std::size_t c = 0; c < grad.size(); ++c) grad[c] -= q * wm[c];
    }
  }
  return out;
}

Matrix concat_parts(const LocalFeatures& local) {
  const std::size_t d = local.dim();
  Matrix out(local.items(), local.num_parts() * d);
  for (std::size_t p = 0; p < local.num_parts(); ++p)
    for (std::size_t j = 0; j < local.items(); ++j)
      std::ranges::copy(local.parts[p].row(j), out.row(j).begin() + static_cast<std::ptrdiff_t>(p * d));
  return out;
}

FeatureMatrix fuse_local(const LocalFeatures& local, const Matrix& reduce) {
  if (reduce.rows() != local.num_parts() * local.dim()) {
    throw ShapeError("fuse_local: reduce map is " + shape_string(reduce) + ", expected " +
                     std::to_string(local.num_parts() * local.dim()) + " rows");
  }
  Matrix v = matmul(concat_parts(local), reduce);
  l2_normalize_rows(v);
  return v;
}

FuseLocalGradients fuse_local_backward(const LocalFeatures& local, const Matrix& reduce,
                                       const Matrix& d_v) {
  const Matrix concat = concat_parts(local);
  const Matrix raw = matmul(concat, reduce);
  if (d_v.rows() != raw.rows() || d_v.cols() != raw.cols()) {
    throw ShapeError("fuse_local_backward: upstream gradient is " + shape_string(d_v));
  }
  Matrix d_raw(raw.rows(), raw.cols());
  for (std::size_t r = 0; r < raw.rows(); ++r) {
    const auto x = raw.row(r);
    const auto up = d_v.row(r);
    const double n = norm(x);
    const double proj = dot(x, up) / (n * n);
    for (std::size_t c = 0; c < x.size(); ++c) d_raw(r, c) = (up[c] - x[c] * proj) / n;
  }
  FuseLocalGradients grads;
  grads.reduce = matmul_at(concat, d_raw);
  const Matrix d_concat = matmul_bt(d_raw, reduce);
  const std::size_t d = local.dim();
  grads.local = LocalFeatures(local.num_parts(), local.items(), d);
  for (std::size_t p = 0; p < local.num_parts(); ++p)
    for (std::size_t j = 0; j < local.items(); ++j)
      for (std::size_t c = 0; c < d; ++c) grads.local.parts[p](j, c) = d_concat(j, p * d + c);
  return grads;
}

double mean_positive_similarity(const LocalFeatures& local, const MemoryBank& bank,
                                std::span<const PositiveSet> positives) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& set : positives) {
    const auto l = local.parts.at(set.part).row(set.item);
    for (const std::size_t m : set.members) {
      total += dot(l, bank.parts.at(set.part).row(m));
      ++count;
    }
  }
  return count == 0 ? 0.0 : total / double(count);
}

}  // namespace corrreid::lcm
