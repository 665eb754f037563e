#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "corrreid/features.hpp"
#include "corrreid/numerics.hpp"

namespace corrreid::encoder {

struct EncoderConfig {
  std::size_t image_height = 16;
  std::size_t image_width = 32;
  std::size_t channels = 1;
  std::size_t patch_size = 4;
  std::size_t embed_dim = 64;
  std::size_t num_layers = 2;
  std::size_t num_parts = 3;
  std::uint64_t seed = 17;

  std::size_t grid_rows() const { return image_height / patch_size; }
  std::size_t grid_cols() const { return image_width / patch_size; }
  std::size_t num_patches() const { return grid_rows() * grid_cols(); }
  std::size_t sequence_length() const { return 1 + num_parts + num_patches(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t hidden_dim() const { return 2 * embed_dim; }

  /// Throws ConfigError on any inconsistent field.
  void validate() const;
};

/// One pre-norm block: single-head attention followed by a GELU feed-forward
/// layer, each wrapped in a residual. Vectors are stored as 1 x n matrices.
struct LayerParams {
  Matrix query, key, value;           // d x d
  Matrix norm1_gain, norm1_bias;      // 1 x d
  Matrix norm2_gain, norm2_bias;      // 1 x d
  Matrix ffn_in, ffn_in_bias;         // d x 2d, 1 x 2d
  Matrix ffn_out, ffn_out_bias;       // 2d x d, 1 x d
};

struct EncoderParams {
  EncoderConfig config;
  Matrix patch_proj;   // patch_dim x d
  Matrix patch_bias;   // 1 x d
  Matrix cls_token;    // 1 x d
  Matrix part_tokens;  // P x d
  Matrix pos_embed;    // (1 + P + N_p) x d
  std::vector<LayerParams> layers;

  /// Seeded initialization from config.seed.
  static EncoderParams init(const EncoderConfig& config);
  /// Same shapes, all zeros. Used as a gradient accumulator.
  EncoderParams zeros_like() const;
};

/// Visits every parameter block as (name, matrix). Works for const and
/// mutable params.
template <typename Params, typename Fn>
void for_each_param(Params& p, Fn&& fn) {
  fn(std::string_view("patch_proj"), p.patch_proj);
  fn(std::string_view("patch_bias"), p.patch_bias);
  fn(std::string_view("cls_token"), p.cls_token);
  fn(std::string_view("part_tokens"), p.part_tokens);
  fn(std::string_view("pos_embed"), p.pos_embed);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& layer = p.layers[l];
    const std::string prefix = "layers." + std::to_string(l) + ".";
    const auto visit = [&](const char* name, auto& m) {
      const std::string full = prefix + name;
      fn(std::string_view(full), m);
    };
    visit("query", layer.query);
    visit("key", layer.key);
    visit("value", layer.value);
    visit("norm1_gain", layer.norm1_gain);
    visit("norm1_bias", layer.norm1_bias);
    visit("norm2_gain", layer.norm2_gain);
    visit("norm2_bias", layer.norm2_bias);
    visit("ffn_in", layer.ffn_in);
    visit("ffn_in_bias", layer.ffn_in_bias);
    visit("ffn_out", layer.ffn_out);
    visit("ffn_out_bias", layer.ffn_out_bias);
  }
}

/// Assembled token matrix in the order [cls, part_1..part_P, patch_1..patch_Np].
struct TokenSequence {
  Matrix tokens;
  std::size_t num_parts = 0;
  std::size_t num_patches = 0;

  static constexpr std::size_t cls_index() { return 0; }
  std::size_t part_index(std::size_t i) const { return 1 + i; }
  std::size_t patch_index(std::size_t j) const { return 1 + num_parts + j; }
  std::size_t length() const { return tokens.rows(); }
};

/// Half-open patch-index range [begin, end) attended by each part token.
struct RegionMap {
  std::vector<std::pair<std::size_t, std::size_t>> ranges;

  std::size_t num_parts() const { return ranges.size(); }
  bool operator==(const RegionMap&) const = default;
};

/// Horizontal stripes over a row-major patch grid. Remainder rows go to the
/// topmost parts.
RegionMap region_partition(std::size_t num_patches, std::size_t grid_rows, std::size_t num_parts);

/// Row counts per stripe for `rows` grid rows split into `num_parts` stripes.
std::vector<std::size_t> stripe_rows(std::size_t rows, std::size_t num_parts);

/// Linear projection of each non-overlapping patch, row-major patch order.
Matrix embed_patches(const Image& image, const EncoderParams& params);

/// Prepends the class and part tokens and adds the positional embedding.
TokenSequence build_sequence(const Matrix& patches, const EncoderParams& params);

struct AttentionOutput {
  Matrix output;                        // one row per query token
  std::vector<std::vector<double>> weights;  // softmax rows
};

/// Attention among [cls, patches]; part tokens are excluded. Output rows are
/// ordered [cls, patch_1..patch_Np].
AttentionOutput global_attention_layer(const TokenSequence& seq, const LayerParams& layer);

/// Part token i attends over itself and the patches of region i. Output row i
/// belongs to part i; weights[i] is ordered [self, region patches...].
AttentionOutput part_attention_layer(const TokenSequence& seq, const RegionMap& regions,
                                     const LayerParams& layer);

/// Full pre-norm block on an assembled sequence.
TokenSequence encoder_block(const TokenSequence& seq, const RegionMap& regions,
                            const LayerParams& layer);

struct EncodedSet {
  FeatureMatrix global;  // N x d, unit rows
  LocalFeatures local;   // P matrices N x d, unit rows
};

/// Encodes every image. All images must share the configured shape.
EncodedSet encode(std::span<const Image> images, const EncoderParams& params);

/// Gradients of a scalar loss given its gradients with respect to the encoder
/// outputs (global: N x d; local: P x (N x d)). Either may be empty, meaning
/// zero. Result has the shape of `params`.
EncoderParams encode_backward(std::span<const Image> images, const EncoderParams& params,
                              const Matrix& d_global, const LocalFeatures& d_local);

}  // namespace corrreid::encoder
