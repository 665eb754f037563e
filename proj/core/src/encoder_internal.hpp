#pragma once

#include <vector>

#include "corrreid/encoder.hpp"

namespace corrreid::encoder::detail {

inline constexpr double kNormEpsilon = 1e-5;

struct NormCache {
  Matrix normalized;  // x-hat, before gain and bias
  std::vector<double> inv_std;
};

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, NormCache* cache);

double gelu(double x);
double gelu_derivative(double x);

/// Key-index lists for every query row: global rows attend over
/// [cls, patches]; part rows attend over [self, region patches].
struct AttentionPlan {
  std::vector<std::size_t> query_rows;
  std::vector<std::vector<std::size_t>> key_rows;
};

AttentionPlan global_plan(std::size_t num_parts, std::size_t num_patches);
AttentionPlan part_plan(std::size_t num_parts, const RegionMap& regions);

/// Runs the plan over precomputed projections. Output row r corresponds to
/// plan.query_rows[r].
AttentionOutput attend(const Matrix& q, const Matrix& k, const Matrix& v, const AttentionPlan& plan);

struct LayerCache {
  Matrix input;
  NormCache norm1;
  Matrix normed1;
  Matrix q, k, v;
  AttentionOutput global;
  AttentionOutput parts;
  Matrix after_attention;
  NormCache norm2;
  Matrix normed2;
  Matrix hidden_pre;
  Matrix hidden;
};

struct ItemTrace {
  Matrix raw_patches;  // N_p x patch_dim
  std::vector<LayerCache> layers;
  Matrix output;       // final token matrix
};

Matrix extract_patches(const Image& image, const EncoderConfig& config);

/// Forward pass of one image. Layer caches are kept when `keep_cache`.
ItemTrace forward_item(const Image& image, const EncoderParams& params, const RegionMap& regions,
                       bool keep_cache);

}  // namespace corrreid::encoder::detail
