#include "corrreid/gcm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace corrreid::gcm {

std::string to_string(AffinitySign sign) {
  return sign == AffinitySign::negative ? "negative" : "positive";
}

AffinitySign affinity_sign_from_string(const std::string& text) {
  if (text == "negative") return AffinitySign::negative;
  if (text == "positive") return AffinitySign::positive;
  throw ConfigError("affinity_sign must be \"negative\" or \"positive\", got \"" + text + "\"");
}

GcmParams GcmParams::identity(std::size_t d) {
  GcmParams p;
  p.query = Matrix::identity(d);
  p.key = Matrix::identity(d);
  p.value = Matrix::identity(d);
  return p;
}

double ReciprocalMask::density() const {
  if (bits.empty()) return 0.0;
  const auto set = std::count(bits.begin(), bits.end(), std::uint8_t{1});
  return double(set) / double(bits.size());
}

std::uint64_t analytic_dense_multiplies(std::uint64_t n, std::uint64_t d) { return n * n * d; }

std::uint64_t analytic_landmark_multiplies(std::uint64_t n, std::uint64_t d, std::uint64_t l) {
  return n * n * l + 2 * n * d * l;
}

namespace {

void check_projections(const FeatureMatrix& g, const GcmParams& params) {
  const std::size_t d = g.cols();
  for (const Matrix* m : {&params.query, &params.key, &params.value}) {
    if (m->rows() != d || m->cols() != d) {
      throw ShapeError("GCM projection is " + shape_string(*m) + " but features have width " +
                       std::to_string(d));
    }
  }
}

double inv_sqrt_dim(const FeatureMatrix& g) { return 1.0 / std::sqrt(double(g.cols())); }

}  // namespace

AffinityMatrix affinity_dense(const FeatureMatrix& g, const GcmParams& params, AffinityCost* cost) {
  check_projections(g, params);
  MultiplyTally projections, products;
  const Matrix q = matmul(g, params.query, &projections);
  const Matrix k = matmul(g, params.key, &projections);
  AffinityMatrix a{matmul_bt(q, k, &products), true};
  scale_inplace(a.scores, inv_sqrt_dim(g));
  if (cost) {
    cost->projection_multiplies += projections.count;
    cost->affinity_multiplies += products.count;
  }
  return a;
}

std::vector<std::size_t> sample_landmark_indices(std::size_t n, std::size_t count,
                                                 std::uint64_t seed) {
  if (count == 0) throw ConfigError("landmark count must be at least 1");
  if (count > n) {
    throw ConfigError("cannot sample " + std::to_string(count) + " landmarks from " +
                      std::to_string(n) + " rows");
  }
  // Partial Fisher-Yates: the first `count` slots are a uniform draw
  // without replacement.
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), 0);
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(count);
  return pool;
}

Landmarks sample_landmarks(const FeatureMatrix& g, std::size_t count, std::uint64_t seed) {
  Landmarks l;
  l.indices = sample_landmark_indices(g.rows(), count, seed);
  l.rows = gather_rows(g, l.indices);
  return l;
}

AffinityMatrix affinity_landmark(const FeatureMatrix& g, const Matrix& landmark_rows,
                                 const GcmParams& params, AffinityCost* cost) {
  check_projections(g, params);
  if (landmark_rows.cols() != g.cols() || landmark_rows.rows() == 0) {
    throw ShapeError("landmark matrix is " + shape_string(landmark_rows) +
                     ", features are " + shape_string(g));
  }
  MultiplyTally projections, products;
  const Matrix q = matmul(g, params.query, &projections);
  const Matrix k = matmul(g, params.key, &projections);
  const Matrix q_l = matmul(landmark_rows, params.query, &projections);
  const Matrix k_l = matmul(landmark_rows, params.key, &projections);
  const Matrix q_prime = matmul_bt(q, k_l, &products);  // N x l
  const Matrix k_prime = matmul_bt(k, q_l, &products);  // N x l
  AffinityMatrix a{matmul_bt(q_prime, k_prime, &products), true};
  scale_inplace(a.scores, inv_sqrt_dim(g));
  if (cost) {
    cost->projection_multiplies += projections.count;
    cost->affinity_multiplies += products.count;
  }
  return a;
}

ReciprocalMask reciprocal_mask(const AffinityMatrix& affinity, std::size_t k) {
  const Matrix& a = affinity.scores;
  if (a.rows() != a.cols()) throw ShapeError("reciprocal_mask: affinity is " + shape_string(a));
  const std::size_t n = a.rows();
  ReciprocalMask mask{n, k, std::vector<std::uint8_t>(n * n, 0)};
  if (n == 0) return mask;

  std::vector<std::uint8_t> in_row(n * n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (const std::size_t j : topk_indices(a.row(i), k)) in_row[i * n + j] = 1;

  std::vector<double> column(n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < n; ++i) column[i] = a(i, j);
    for (const std::size_t i : topk_indices(column, k))
      if (in_row[i * n + j]) mask.bits[i * n + j] = 1;
  }
  for (std::size_t i = 0; i < n; ++i) mask.bits[i * n + i] = 1;
  return mask;
}

Matrix sparse_softmax(const AffinityMatrix& affinity, const ReciprocalMask& mask,
                      AffinitySign sign) {
  const Matrix& a = affinity.scores;
  if (a.rows() != mask.n || a.cols() != mask.n) {
    throw ShapeError("sparse_softmax: mask size differs from affinity " + shape_string(a));
  }
  const double s = sign == AffinitySign::negative ? -1.0 : 1.0;
  Matrix out(a.rows(), a.cols());
  std::vector<double> logits(a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) logits[j] = s * a(i, j);
    const auto row = stable_softmax_row(logits, mask.row(i));
    std::ranges::copy(row, out.row(i).begin());
  }
  return out;
}

FeatureMatrix aggregate(const Matrix& weights, const FeatureMatrix& g, const GcmParams& params) {
  check_projections(g, params);
  if (weights.cols() != g.rows()) {
    throw ShapeError("aggregate: weights " + shape_string(weights) + " vs features " +
                     shape_string(g));
  }
  return matmul(weights, matmul(g, params.value));
}

namespace {

struct Intermediates {
  Matrix q, k, q_l, k_l, q_prime, k_prime;
};

Intermediates landmark_intermediates(const FeatureMatrix& g, const Matrix& landmark_rows,
                                     const GcmParams& params) {
  Intermediates t;
  t.q = matmul(g, params.query);
  t.k = matmul(g, params.key);
  t.q_l = matmul(landmark_rows, params.query);
  t.k_l = matmul(landmark_rows, params.key);
  t.q_prime = matmul_bt(t.q, t.k_l);
  t.k_prime = matmul_bt(t.k, t.q_l);
  return t;
}

void validate_counts(const FeatureMatrix& g, const GcmParams& params) {
  if (g.rows() == 0) throw ShapeError("gcm_forward: empty feature set");
  if (params.landmarks == 0 || params.landmarks > g.cols()) {
    throw ConfigError("gcm.landmarks must lie in [1, d=" + std::to_string(g.cols()) + "], got " +
                      std::to_string(params.landmarks));
  }
  if (params.mask_k == 0) throw ConfigError("gcm.mask_k must be at least 1");
}

}  // namespace

GcmResult gcm_forward(const FeatureMatrix& g, const GcmParams& params) {
  check_projections(g, params);
  validate_counts(g, params);
  GcmResult r;
  r.landmarks = sample_landmarks(g, params.landmarks, params.seed);
  r.affinity = affinity_landmark(g, r.landmarks.rows, params, &r.diagnostics.cost);
  const std::size_t k = std::min(params.mask_k, g.rows());
  r.mask = reciprocal_mask(r.affinity, k);
  r.weights = sparse_softmax(r.affinity, r.mask, params.sign);
  r.u = aggregate(r.weights, g, params);
  r.diagnostics.mask_density = r.mask.density();
  r.diagnostics.landmarks = params.landmarks;
  r.diagnostics.mask_k = k;
  r.diagnostics.landmark_indices = r.landmarks.indices;
  return r;
}

FeatureMatrix gcm_forward_fixed(const FeatureMatrix& g, const GcmParams& params,
                                const GcmResult& frozen) {
  const Matrix landmark_rows = gather_rows(g, frozen.landmarks.indices);
  const AffinityMatrix a = affinity_landmark(g, landmark_rows, params);
  return aggregate(sparse_softmax(a, frozen.mask, params.sign), g, params);
}

GcmGradients gcm_backward(const FeatureMatrix& g, const GcmParams& params,
                          const GcmResult& forward, const Matrix& d_u) {
  check_projections(g, params);
  if (d_u.rows() != g.rows() || d_u.cols() != g.cols()) {
    throw ShapeError("gcm_backward: upstream gradient is " + shape_string(d_u));
  }
  const std::size_t n = g.rows();
  const double scale = inv_sqrt_dim(g);
  const double sign = params.sign == AffinitySign::negative ? -1.0 : 1.0;
  const Matrix landmark_rows = gather_rows(g, forward.landmarks.indices);
  const Intermediates t = landmark_intermediates(g, landmark_rows, params);
  const Matrix& s = forward.weights;
  const Matrix projected_v = matmul(g, params.value);

  GcmGradients grads;
  // u = S (g Wv)
  const Matrix d_s = matmul_bt(d_u, projected_v);
  const Matrix d_projected_v = matmul_at(s, d_u);
  grads.value = matmul_at(g, d_projected_v);
  grads.features = matmul_bt(d_projected_v, params.value);

  // Softmax over masked logits sign * A'.
  Matrix d_a(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    double inner = 0.0;
    for (std::size_t j = 0; j < n; ++j) inner += s(i, j) * d_s(i, j);
    for (std::size_t j = 0; j < n; ++j) {
      if (!forward.mask(i, j)) continue;
      d_a(i, j) = sign * s(i, j) * (d_s(i, j) - inner) * scale;
    }
  }
  // A' = q' k'^T (scale already folded into d_a).
  const Matrix d_q_prime = matmul(d_a, t.k_prime);
  const Matrix d_k_prime = matmul_at(d_a, t.q_prime);
  // q' = q k_l^T ; k' = k q_l^T
  const Matrix d_q = matmul(d_q_prime, t.k_l);
  const Matrix d_k_l = matmul_at(d_q_prime, t.q);
  const Matrix d_k = matmul(d_k_prime, t.q_l);
  const Matrix d_q_l = matmul_at(d_k_prime, t.k);

  grads.query = matmul_at(g, d_q);
  add_scaled(grads.query, matmul_at(landmark_rows, d_q_l));
  grads.key = matmul_at(g, d_k);
  add_scaled(grads.key, matmul_at(landmark_rows, d_k_l));

  add_scaled(grads.features, matmul_bt(d_q, params.query));
  add_scaled(grads.features, matmul_bt(d_k, params.key));
  const Matrix d_landmarks = [&] {
    Matrix m = matmul_bt(d_q_l, params.query);
    add_scaled(m, matmul_bt(d_k_l, params.key));
    return m;
  }();
  for (std::size_t r = 0; r < forward.landmarks.indices.size(); ++r) {
    auto dst = grads.features.row(forward.landmarks.indices[r]);
    const auto src = d_landmarks.row(r);
    for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
  }
  return grads;
}

}  // namespace corrreid::gcm
