#include <algorithm>
#include <cmath>
#include <numbers>

#include "corrreid/encoder.hpp"
#include "corrreid/parallel.hpp"
#include "encoder_internal.hpp"

namespace corrreid::encoder {

void EncoderConfig::validate() const {
  if (patch_size == 0 || image_height % patch_size != 0 || image_width % patch_size != 0) {
    throw ShapeError("image " + std::to_string(image_height) + "x" + std::to_string(image_width) +
                     " is not divisible by patch size " + std::to_string(patch_size));
  }
  if (embed_dim == 0) throw ConfigError("encoder.embed_dim must be positive");
  if (num_layers == 0) throw ConfigError("encoder.layers must be at least 1");
  if (num_parts == 0) throw ConfigError("encoder.num_parts must be at least 1");
  if (channels == 0) throw ConfigError("encoder.channels must be positive");
  if (num_parts > grid_rows()) {
    throw ConfigError("encoder.num_parts (" + std::to_string(num_parts) +
                      ") exceeds patch grid rows (" + std::to_string(grid_rows()) + ")");
  }
}

EncoderParams EncoderParams::init(const EncoderConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const std::size_t d = config.embed_dim;
  const std::size_t h = config.hidden_dim();
  EncoderParams p;
  p.config = config;
  p.patch_proj = Matrix::random_normal(config.patch_dim(), d, 1.0 / std::sqrt(double(config.patch_dim())), rng);
  p.patch_bias = Matrix(1, d);
  p.cls_token = Matrix::random_normal(1, d, 0.02, rng);
  p.part_tokens = Matrix::random_normal(config.num_parts, d, 0.02, rng);
  p.pos_embed = Matrix::random_normal(config.sequence_length(), d, 0.02, rng);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    LayerParams layer;
    const double attn_scale = 1.0 / std::sqrt(double(d));
    layer.query = Matrix::random_normal(d, d, attn_scale, rng);
    layer.key = Matrix::random_normal(d, d, attn_scale, rng);
    layer.value = Matrix::random_normal(d, d, attn_scale, rng);
    layer.norm1_gain = Matrix(1, d, 1.0);
    layer.norm1_bias = Matrix(1, d);
    layer.norm2_gain = Matrix(1, d, 1.0);
    layer.norm2_bias = Matrix(1, d);
    layer.ffn_in = Matrix::random_normal(d, h, attn_scale, rng);
    layer.ffn_in_bias = Matrix(1, h);
    layer.ffn_out = Matrix::random_normal(h, d, 1.0 / std::sqrt(double(h)), rng);
    layer.ffn_out_bias = Matrix(1, d);
    p.layers.push_back(std::move(layer));
  }
  return p;
}

EncoderParams EncoderParams::zeros_like() const {
  EncoderParams z = *this;
  for_each_param(z, [](std::string_view, Matrix& m) { m = Matrix(m.rows(), m.cols()); });
  return z;
}

std::vector<std::size_t> stripe_rows(std::size_t rows, std::size_t num_parts) {
  if (num_parts == 0) throw ConfigError("number of parts must be at least 1");
  if (num_parts > rows) {
    throw ConfigError("cannot split " + std::to_string(rows) + " grid rows into " +
                      std::to_string(num_parts) + " parts");
  }
  std::vector<std::size_t> counts(num_parts, rows / num_parts);
  for (std::size_t i = 0; i < rows % num_parts; ++i) ++counts[i];
  return counts;
}

RegionMap region_partition(std::size_t num_patches, std::size_t grid_rows, std::size_t num_parts) {
  if (grid_rows == 0 || num_patches % grid_rows != 0) {
    throw ConfigError("patch count " + std::to_string(num_patches) +
                      " is not a whole number of grid rows (" + std::to_string(grid_rows) + ")");
  }
  const std::size_t cols = num_patches / grid_rows;
  RegionMap map;
  std::size_t row = 0;
  for (const std::size_t count : stripe_rows(grid_rows, num_parts)) {
    map.ranges.emplace_back(row * cols, (row + count) * cols);
    row += count;
  }
  return map;
}

namespace detail {

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, NormCache* cache) {
  const std::size_t d = x.cols();
  Matrix out(x.rows(), d);
  if (cache) {
    cache->normalized = Matrix(x.rows(), d);
    cache->inv_std.assign(x.rows(), 0.0);
  }
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto row = x.row(r);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= double(d);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= double(d);
    const double inv_std = 1.0 / std::sqrt(var + kNormEpsilon);
    for (std::size_t c = 0; c < d; ++c) {
      const double xhat = (row[c] - mean) * inv_std;
      out(r, c) = xhat * gain(0, c) + bias(0, c);
      if (cache) cache->normalized(r, c) = xhat;
    }
    if (cache) cache->inv_std[r] = inv_std;
  }
  return out;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

AttentionPlan global_plan(std::size_t num_parts, std::size_t num_patches) {
  AttentionPlan plan;
  std::vector<std::size_t> rows{0};
  for (std::size_t j = 0; j < num_patches; ++j) rows.push_back(1 + num_parts + j);
  plan.query_rows = rows;
  plan.key_rows.assign(rows.size(), rows);
  return plan;
}

AttentionPlan part_plan(std::size_t num_parts, const RegionMap& regions) {
  AttentionPlan plan;
  for (std::size_t i = 0; i < regions.num_parts(); ++i) {
    const auto [begin, end] = regions.ranges[i];
    if (begin >= end) {
      throw DegenerateRowError("part " + std::to_string(i) + " has an empty region");
    }
    std::vector<std::size_t> keys{1 + i};
    for (std::size_t j = begin; j < end; ++j) keys.push_back(1 + num_parts + j);
    plan.query_rows.push_back(1 + i);
    plan.key_rows.push_back(std::move(keys));
  }
  return plan;
}

AttentionOutput attend(const Matrix& q, const Matrix& k, const Matrix& v, const AttentionPlan& plan) {
  const double scale = 1.0 / std::sqrt(double(q.cols()));
  AttentionOutput out;
  out.output = Matrix(plan.query_rows.size(), v.cols());
  out.weights.resize(plan.query_rows.size());
  for (std::size_t r = 0; r < plan.query_rows.size(); ++r) {
    const auto& keys = plan.key_rows[r];
    std::vector<double> scores(keys.size());
    const auto query = q.row(plan.query_rows[r]);
    for (std::size_t j = 0; j < keys.size(); ++j) scores[j] = dot(query, k.row(keys[j])) * scale;
    out.weights[r] = stable_softmax_row(scores);
    auto dst = out.output.row(r);
    for (std::size_t j = 0; j < keys.size(); ++j) {
      const double w = out.weights[r][j];
      const auto value = v.row(keys[j]);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += w * value[c];
    }
  }
  return out;
}

Matrix extract_patches(const Image& image, const EncoderConfig& config) {
  if (image.height != config.image_height || image.width != config.image_width ||
      image.channels != config.channels) {
    throw ShapeError("image shape " + std::to_string(image.height) + "x" +
                     std::to_string(image.width) + "x" + std::to_string(image.channels) +
                     " does not match encoder configuration");
  }
  const std::size_t ps = config.patch_size;
  Matrix patches(config.num_patches(), config.patch_dim());
  std::size_t index = 0;
  for (std::size_t gr = 0; gr < config.grid_rows(); ++gr) {
    for (std::size_t gc = 0; gc < config.grid_cols(); ++gc, ++index) {
      auto dst = patches.row(index);
      std::size_t o = 0;
      for (std::size_t y = 0; y < ps; ++y)
        for (std::size_t x = 0; x < ps; ++x)
          for (std::size_t c = 0; c < config.channels; ++c)
            dst[o++] = image.at(gr * ps + y, gc * ps + x, c);
    }
  }
  return patches;
}

ItemTrace forward_item(const Image& image, const EncoderParams& params, const RegionMap& regions,
                       bool keep_cache) {
  const auto& cfg = params.config;
  ItemTrace trace;
  trace.raw_patches = extract_patches(image, cfg);
  Matrix embedded = matmul(trace.raw_patches, params.patch_proj);
  for (std::size_t r = 0; r < embedded.rows(); ++r)
    for (std::size_t c = 0; c < embedded.cols(); ++c) embedded(r, c) += params.patch_bias(0, c);
  Matrix x = build_sequence(embedded, params).tokens;

  const auto gplan = global_plan(cfg.num_parts, cfg.num_patches());
  const auto pplan = part_plan(cfg.num_parts, regions);
  for (const auto& layer : params.layers) {
    LayerCache cache;
    Matrix y = layer_norm(x, layer.norm1_gain, layer.norm1_bias, &cache.norm1);
    cache.q = matmul(y, layer.query);
    cache.k = matmul(y, layer.key);
    cache.v = matmul(y, layer.value);
    cache.global = attend(cache.q, cache.k, cache.v, gplan);
    cache.parts = attend(cache.q, cache.k, cache.v, pplan);
    Matrix x1 = x;
    for (std::size_t r = 0; r < gplan.query_rows.size(); ++r) {
      auto dst = x1.row(gplan.query_rows[r]);
      const auto src = cache.global.output.row(r);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
    }
    for (std::size_t r = 0; r < pplan.query_rows.size(); ++r) {
      auto dst = x1.row(pplan.query_rows[r]);
      const auto src = cache.parts.output.row(r);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
    }
    Matrix z = layer_norm(x1, layer.norm2_gain, layer.norm2_bias, &cache.norm2);
    Matrix hidden_pre = matmul(z, layer.ffn_in);
    Matrix hidden(hidden_pre.rows(), hidden_pre.cols());
    for (std::size_t r = 0; r < hidden.rows(); ++r)
      for (std::size_t c = 0; c < hidden.cols(); ++c) {
        hidden_pre(r, c) += layer.ffn_in_bias(0, c);
        hidden(r, c) = gelu(hidden_pre(r, c));
      }
    Matrix x2 = matmul(hidden, layer.ffn_out);
    for (std::size_t r = 0; r < x2.rows(); ++r)
      for (std::size_t c = 0; c < x2.cols(); ++c) x2(r, c) += x1(r, c) + layer.ffn_out_bias(0, c);

    if (keep_cache) {
      cache.input = std::move(x);
      cache.normed1 = std::move(y);
      cache.after_attention = std::move(x1);
      cache.normed2 = std::move(z);
      cache.hidden_pre = std::move(hidden_pre);
      cache.hidden = std::move(hidden);
      trace.layers.push_back(std::move(cache));
    }
    x = std::move(x2);
  }
  trace.output = std::move(x);
  return trace;
}

}  // namespace detail

Matrix embed_patches(const Image& image, const EncoderParams& params) {
  params.config.validate();
  Matrix embedded = matmul(detail::extract_patches(image, params.config), params.patch_proj);
  for (std::size_t r = 0; r < embedded.rows(); ++r)
    for (std::size_t c = 0; c < embedded.cols(); ++c) embedded(r, c) += params.patch_bias(0, c);
  return embedded;
}

TokenSequence build_sequence(const Matrix& patches, const EncoderParams& params) {
  if (patches.rows() == 0) throw ShapeError("build_sequence: no patch tokens");
  const std::size_t d = params.cls_token.cols();
  const std::size_t parts = params.part_tokens.rows();
  if (patches.cols() != d) throw ShapeError("build_sequence: patch width differs from embed dim");
  if (params.pos_embed.rows() != 1 + parts + patches.rows()) {
    throw ShapeError("build_sequence: positional embedding has " +
                     std::to_string(params.pos_embed.rows()) + " rows, sequence needs " +
                     std::to_string(1 + parts + patches.rows()));
  }
  TokenSequence seq;
  seq.num_parts = parts;
  seq.num_patches = patches.rows();
  seq.tokens = params.pos_embed;
  for (std::size_t c = 0; c < d; ++c) seq.tokens(0, c) += params.cls_token(0, c);
  for (std::size_t i = 0; i < parts; ++i)
    for (std::size_t c = 0; c < d; ++c) seq.tokens(1 + i, c) += params.part_tokens(i, c);
  for (std::size_t j = 0; j < patches.rows(); ++j)
    for (std::size_t c = 0; c < d; ++c) seq.tokens(1 + parts + j, c) += patches(j, c);
  return seq;
}

namespace {

void check_layer(const TokenSequence& seq, const LayerParams& layer) {
  const std::size_t d = seq.tokens.cols();
  for (const Matrix* m : {&layer.query, &layer.key, &layer.value}) {
    if (m->rows() != d || m->cols() != d) {
      throw ShapeError("attention projection is " + shape_string(*m) + ", expected " +
                       std::to_string(d) + "x" + std::to_string(d));
    }
  }
}

}  // namespace

AttentionOutput global_attention_layer(const TokenSequence& seq, const LayerParams& layer) {
  check_layer(seq, layer);
  const Matrix q = matmul(seq.tokens, layer.query);
  const Matrix k = matmul(seq.tokens, layer.key);
  const Matrix v = matmul(seq.tokens, layer.value);
  return detail::attend(q, k, v, detail::global_plan(seq.num_parts, seq.num_patches));
}

AttentionOutput part_attention_layer(const TokenSequence& seq, const RegionMap& regions,
                                     const LayerParams& layer) {
  check_layer(seq, layer);
  if (regions.num_parts() != seq.num_parts) {
    throw ShapeError("region map has " + std::to_string(regions.num_parts()) +
                     " parts, sequence has " + std::to_string(seq.num_parts));
  }
  for (const auto& [begin, end] : regions.ranges) {
    if (end > seq.num_patches) throw ShapeError("region map exceeds the patch count");
  }
  const Matrix q = matmul(seq.tokens, layer.query);
  const Matrix k = matmul(seq.tokens, layer.key);
  const Matrix v = matmul(seq.tokens, layer.value);
  return detail::attend(q, k, v, detail::part_plan(seq.num_parts, regions));
}

TokenSequence encoder_block(const TokenSequence& seq, const RegionMap& regions,
                            const LayerParams& layer) {
  TokenSequence normed = seq;
  normed.tokens = detail::layer_norm(seq.tokens, layer.norm1_gain, layer.norm1_bias, nullptr);
  const auto global = global_attention_layer(normed, layer);
  const auto parts = part_attention_layer(normed, regions, layer);

  TokenSequence out = seq;
  const auto gplan = detail::global_plan(seq.num_parts, seq.num_patches);
  for (std::size_t r = 0; r < gplan.query_rows.size(); ++r)
    for (std::size_t c = 0; c < out.tokens.cols(); ++c)
      out.tokens(gplan.query_rows[r], c) += global.output(r, c);
  for (std::size_t i = 0; i < seq.num_parts; ++i)
    for (std::size_t c = 0; c < out.tokens.cols(); ++c)
      out.tokens(seq.part_index(i), c) += parts.output(i, c);

  const Matrix z = detail::layer_norm(out.tokens, layer.norm2_gain, layer.norm2_bias, nullptr);
  Matrix hidden = matmul(z, layer.ffn_in);
  for (std::size_t r = 0; r < hidden.rows(); ++r)
    for (std::size_t c = 0; c < hidden.cols(); ++c)
      hidden(r, c) = detail::gelu(hidden(r, c) + layer.ffn_in_bias(0, c));
  const Matrix ffn = matmul(hidden, layer.ffn_out);
  for (std::size_t r = 0; r < ffn.rows(); ++r)
    for (std::size_t c = 0; c < ffn.cols(); ++c)
      out.tokens(r, c) += ffn(r, c) + layer.ffn_out_bias(0, c);
  return out;
}

EncodedSet encode(std::span<const Image> images, const EncoderParams& params) {
  const auto& cfg = params.config;
  cfg.validate();
  const RegionMap regions = region_partition(cfg.num_patches(), cfg.grid_rows(), cfg.num_parts);
  const std::size_t n = images.size();
  const std::size_t d = cfg.embed_dim;
  EncodedSet out{Matrix(n, d), LocalFeatures(cfg.num_parts, n, d)};
  parallel_for(n, [&](std::size_t i) {
    const auto trace = detail::forward_item(images[i], params, regions, false);
    std::ranges::copy(trace.output.row(0), out.global.row(i).begin());
    for (std::size_t p = 0; p < cfg.num_parts; ++p)
      std::ranges::copy(trace.output.row(1 + p), out.local.parts[p].row(i).begin());
  });
  l2_normalize_rows(out.global);
  for (auto& part : out.local.parts) l2_normalize_rows(part);
  return out;
}

}  // namespace corrreid::encoder
