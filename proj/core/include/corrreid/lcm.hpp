#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "corrreid/features.hpp"
#include "corrreid/numerics.hpp"

namespace corrreid::lcm {

/// Per-part memory of local features, one slot per training item.
/// `epoch` is the number of updates applied so far.
struct MemoryBank {
  std::vector<Matrix> parts;
  double momentum = 0.2;
  std::size_t epoch = 0;

  std::size_t num_parts() const { return parts.size(); }
  std::size_t slots() const { return parts.empty() ? 0 : parts.front().rows(); }
};

/// t == 0 copies l into the bank verbatim; t > 0 blends (1 - m) w + m l and
/// re-normalizes the rows (m = 0 leaves the bank untouched). Epoch becomes t + 1. A t earlier than the
/// bank's epoch raises StateError.
MemoryBank bank_update(MemoryBank bank, const LocalFeatures& local, std::size_t t);

struct PositiveSet {
  std::size_t item = 0;
  std::size_t part = 0;
  std::vector<std::size_t> members;
  std::vector<double> similarities;
};

/// Top-k bank slots by inner product, ties by ascending slot. When
/// `exclude_slot` is set that slot is skipped.
PositiveSet mine_positives(std::span<const double> anchor, const Matrix& bank_part, std::size_t k,
                           std::optional<std::size_t> exclude_slot = std::nullopt);

/// Positive sets for every (item, part) anchor, ordered part-major.
std::vector<PositiveSet> mine_all(const LocalFeatures& local, const MemoryBank& bank,
                                  std::size_t k, bool include_self = true);

struct ClusteringLoss {
  double loss = 0.0;
  LocalFeatures gradient;  // dL/dl, same shape as the input
};

/// Mean over anchors of -log(sum_pos exp(l.w/tau) / sum_all exp(l.w/tau)).
/// The bank is a constant.
ClusteringLoss clustering_loss(const LocalFeatures& local, const MemoryBank& bank,
                               std::span<const PositiveSet> positives, double temperature);

/// v_j = normalize(concat(l_1j..l_Pj) R), R is (P*d) x d_out.
FeatureMatrix fuse_local(const LocalFeatures& local, const Matrix& reduce);

struct FuseLocalGradients {
  Matrix reduce;
  LocalFeatures local;
};

FuseLocalGradients fuse_local_backward(const LocalFeatures& local, const Matrix& reduce,
                                       const Matrix& d_v);

/// Concatenated part features, N x (P*d).
Matrix concat_parts(const LocalFeatures& local);

/// Mean similarity of every anchor to its positive set members in the bank.
double mean_positive_similarity(const LocalFeatures& local, const MemoryBank& bank,
                                std::span<const PositiveSet> positives);

}  // namespace corrreid::lcm
