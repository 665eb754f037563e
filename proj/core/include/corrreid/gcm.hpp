#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "corrreid/features.hpp"
#include "corrreid/numerics.hpp"

namespace corrreid::gcm {

/// Sign of the exponent in the masked softmax. `negative` weights each entry
/// by exp(-A'), `positive` by exp(+A').
enum class AffinitySign { negative, positive };

std::string to_string(AffinitySign sign);
AffinitySign affinity_sign_from_string(const std::string& text);

struct GcmParams {
  Matrix query;  // d x d
  Matrix key;    // d x d
  Matrix value;  // d x d
  std::size_t landmarks = 5;
  std::size_t mask_k = 10;
  AffinitySign sign = AffinitySign::negative;
  std::uint64_t seed = 23;

  /// Identity projections of width d.
  static GcmParams identity(std::size_t d);
  std::size_t dim() const { return query.rows(); }
};

struct AffinityMatrix {
  Matrix scores;
  bool scaled = true;  // divided by sqrt(d)

  std::size_t n() const { return scores.rows(); }
};

/// N x N boolean mask; bits are row-major.
struct ReciprocalMask {
  std::size_t n = 0;
  std::size_t k = 0;
  std::vector<std::uint8_t> bits;

  bool operator()(std::size_t i, std::size_t j) const { return bits[i * n + j] != 0; }
  std::span<const std::uint8_t> row(std::size_t i) const { return {bits.data() + i * n, n}; }
  double density() const;
  bool operator==(const ReciprocalMask&) const = default;
};

/// Multiplications split into the shared feature projections and the
/// affinity products proper.
struct AffinityCost {
  std::uint64_t projection_multiplies = 0;
  std::uint64_t affinity_multiplies = 0;
  std::uint64_t total() const { return projection_multiplies + affinity_multiplies; }
};

/// Leading-order multiply counts of the affinity products (projections excluded).
std::uint64_t analytic_dense_multiplies(std::uint64_t n, std::uint64_t d);
std::uint64_t analytic_landmark_multiplies(std::uint64_t n, std::uint64_t d, std::uint64_t l);

/// A = (g Wq)(g Wk)^T / sqrt(d)
AffinityMatrix affinity_dense(const FeatureMatrix& g, const GcmParams& params,
                              AffinityCost* cost = nullptr);

struct Landmarks {
  std::vector<std::size_t> indices;
  Matrix rows;
};

/// Draws `count` distinct rows of g uniformly without replacement.
std::vector<std::size_t> sample_landmark_indices(std::size_t n, std::size_t count,
                                                 std::uint64_t seed);
Landmarks sample_landmarks(const FeatureMatrix& g, std::size_t count, std::uint64_t seed);

/// A' = q' k'^T / sqrt(d) with q' = (g Wq)(g_l Wk)^T and k' = (g Wk)(g_l Wq)^T.
AffinityMatrix affinity_landmark(const FeatureMatrix& g, const Matrix& landmark_rows,
                                 const GcmParams& params, AffinityCost* cost = nullptr);

/// M_ij set when j is in the top-k of row i and i is in the top-k of
/// column j. The diagonal is always set.
ReciprocalMask reciprocal_mask(const AffinityMatrix& affinity, std::size_t k);

/// Row-stochastic weights supported on the mask.
Matrix sparse_softmax(const AffinityMatrix& affinity, const ReciprocalMask& mask,
                      AffinitySign sign = AffinitySign::negative);

/// u = S (g Wv)
FeatureMatrix aggregate(const Matrix& weights, const FeatureMatrix& g, const GcmParams& params);

struct GcmDiagnostics {
  AffinityCost cost;
  double mask_density = 0.0;
  std::size_t landmarks = 0;
  std::size_t mask_k = 0;
  std::vector<std::size_t> landmark_indices;
};

struct GcmResult {
  FeatureMatrix u;
  Matrix weights;
  ReciprocalMask mask;
  AffinityMatrix affinity;
  Landmarks landmarks;
  GcmDiagnostics diagnostics;
};

/// sample_landmarks -> affinity_landmark -> reciprocal_mask -> sparse_softmax -> aggregate.
/// mask_k is clamped to N.
GcmResult gcm_forward(const FeatureMatrix& g, const GcmParams& params);

struct GcmGradients {
  Matrix query;
  Matrix key;
  Matrix value;
  Matrix features;  // dL/dg
};

/// Gradients of a scalar with upstream dL/du, holding the mask and landmark
/// selection of `forward` fixed.
GcmGradients gcm_backward(const FeatureMatrix& g, const GcmParams& params,
                          const GcmResult& forward, const Matrix& d_u);

/// Recomputes the forward pass with the landmark indices and mask of
/// `frozen`, for finite-difference checks at fixed discrete choices.
FeatureMatrix gcm_forward_fixed(const FeatureMatrix& g, const GcmParams& params,
                                const GcmResult& frozen);

}  // namespace corrreid::gcm
