#include <algorithm>
#include <cmath>

#include "corrreid/encoder.hpp"
#include "corrreid/parallel.hpp"
#include "encoder_internal.hpp"

namespace corrreid::encoder {

namespace {

using detail::AttentionPlan;
using detail::NormCache;

// Items per gradient accumulator. Fixed so the reduction order does not
// depend on the worker count.
constexpr std::size_t kChunk = 8;

void accumulate_column_sums(Matrix& bias_grad, const Matrix& upstream) {
  for (std::size_t r = 0; r < upstream.rows(); ++r)
    for (std::size_t c = 0; c < upstream.cols(); ++c) bias_grad(0, c) += upstream(r, c);
}

// Returns dL/dx and accumulates gain/bias gradients.
Matrix layer_norm_backward(const Matrix& upstream, const NormCache& cache, const Matrix& gain,
                           Matrix& d_gain, Matrix& d_bias) {
  const std::size_t d = upstream.cols();
  Matrix dx(upstream.rows(), d);
  std::vector<double> dxhat(d);
  for (std::size_t r = 0; r < upstream.rows(); ++r) {
    double mean_dxhat = 0.0;
    double mean_dxhat_xhat = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double xhat = cache.normalized(r, c);
      d_gain(0, c) += upstream(r, c) * xhat;
      d_bias(0, c) += upstream(r, c);
      dxhat[c] = upstream(r, c) * gain(0, c);
      mean_dxhat += dxhat[c];
      mean_dxhat_xhat += dxhat[c] * xhat;
    }
    mean_dxhat /= double(d);
    mean_dxhat_xhat /= double(d);
    for (std::size_t c = 0; c < d; ++c) {
      dx(r, c) = cache.inv_std[r] *
                 (dxhat[c] - mean_dxhat - cache.normalized(r, c) * mean_dxhat_xhat);
    }
  }
  return dx;
}

void attention_backward(const Matrix& q, const Matrix& k, const Matrix& v, const AttentionPlan& plan,
                        const AttentionOutput& forward, const Matrix& d_out_full, Matrix& dq,
                        Matrix& dk, Matrix& dv) {
  const double scale = 1.0 / std::sqrt(double(q.cols()));
  for (std::size_t r = 0; r < plan.query_rows.size(); ++r) {
    const std::size_t qi = plan.query_rows[r];
    const auto& keys = plan.key_rows[r];
    const auto& w = forward.weights[r];
    const auto d_out = d_out_full.row(qi);
    std::vector<double> dw(keys.size());
    double weighted = 0.0;
    for (std::size_t j = 0; j < keys.size(); ++j) {
      dw[j] = dot(d_out, v.row(keys[j]));
      weighted += w[j] * dw[j];
      auto dv_row = dv.row(keys[j]);
      for (std::size_t c = 0; c < dv_row.size(); ++c) dv_row[c] += w[j] * d_out[c];
    }
    auto dq_row = dq.row(qi);
    const auto q_row = q.row(qi);
    for (std::size_t j = 0; j < keys.size(); ++j) {
      const double ds = w[j] * (dw[j] - weighted) * scale;
      if (ds == 0.0) continue;
      const auto k_row = k.row(keys[j]);
      auto dk_row = dk.row(keys[j]);
      for (std::size_t c = 0; c < dq_row.size(); ++c) {
        dq_row[c] += ds * k_row[c];
        dk_row[c] += ds * q_row[c];
      }
    }
  }
}

void add_row_normalization_grad(std::span<const double> raw, std::span<const double> upstream,
                                std::span<double> d_raw) {
  const double n = norm(raw);
  double proj = 0.0;
  for (std::size_t c = 0; c < raw.size(); ++c) proj += raw[c] * upstream[c];
  proj /= n * n;
  for (std::size_t c = 0; c < raw.size(); ++c) d_raw[c] += (upstream[c] - raw[c] * proj) / n;
}

void backward_item(const detail::ItemTrace& trace, const EncoderParams& params,
                   const RegionMap& regions, std::span<const double> d_global,
                   const std::vector<std::span<const double>>& d_parts, EncoderParams& grads) {
  const auto& cfg = params.config;
  const std::size_t d = cfg.embed_dim;
  Matrix dx(trace.output.rows(), d);
  if (!d_global.empty()) add_row_normalization_grad(trace.output.row(0), d_global, dx.row(0));
  for (std::size_t p = 0; p < d_parts.size(); ++p) {
    if (!d_parts[p].empty())
      add_row_normalization_grad(trace.output.row(1 + p), d_parts[p], dx.row(1 + p));
  }

  const auto gplan = detail::global_plan(cfg.num_parts, cfg.num_patches());
  const auto pplan = detail::part_plan(cfg.num_parts, regions);
  for (std::size_t li = params.layers.size(); li-- > 0;) {
    const auto& layer = params.layers[li];
    auto& g = grads.layers[li];
    const auto& cache = trace.layers[li];

    // Feed-forward residual.
    accumulate_column_sums(g.ffn_out_bias, dx);
    add_scaled(g.ffn_out, matmul_at(cache.hidden, dx));
    Matrix d_hidden = matmul_bt(dx, layer.ffn_out);
    for (std::size_t r = 0; r < d_hidden.rows(); ++r)
      for (std::size_t c = 0; c < d_hidden.cols(); ++c)
        d_hidden(r, c) *= detail::gelu_derivative(cache.hidden_pre(r, c));
    accumulate_column_sums(g.ffn_in_bias, d_hidden);
    add_scaled(g.ffn_in, matmul_at(cache.normed2, d_hidden));
    const Matrix d_normed2 = matmul_bt(d_hidden, layer.ffn_in);
    add_scaled(dx, layer_norm_backward(d_normed2, cache.norm2, layer.norm2_gain, g.norm2_gain,
                                       g.norm2_bias));

    // Attention residual; dx now holds dL/d(after_attention) = dL/d(attention output).
    Matrix dq(cache.q.rows(), d), dk(cache.k.rows(), d), dv(cache.v.rows(), d);
    attention_backward(cache.q, cache.k, cache.v, gplan, cache.global, dx, dq, dk, dv);
    attention_backward(cache.q, cache.k, cache.v, pplan, cache.parts, dx, dq, dk, dv);
    add_scaled(g.query, matmul_at(cache.normed1, dq));
    add_scaled(g.key, matmul_at(cache.normed1, dk));
    add_scaled(g.value, matmul_at(cache.normed1, dv));
    Matrix d_normed1 = matmul_bt(dq, layer.query);
    add_scaled(d_normed1, matmul_bt(dk, layer.key));
    add_scaled(d_normed1, matmul_bt(dv, layer.value));
    add_scaled(dx, layer_norm_backward(d_normed1, cache.norm1, layer.norm1_gain, g.norm1_gain,
                                       g.norm1_bias));
  }

  // Sequence assembly and patch embedding.
  add_scaled(grads.pos_embed, dx);
  for (std::size_t c = 0; c < d; ++c) grads.cls_token(0, c) += dx(0, c);
  for (std::size_t p = 0; p < cfg.num_parts; ++p)
    for (std::size_t c = 0; c < d; ++c) grads.part_tokens(p, c) += dx(1 + p, c);
  Matrix d_embedded(cfg.num_patches(), d);
  for (std::size_t j = 0; j < cfg.num_patches(); ++j)
    std::ranges::copy(dx.row(1 + cfg.num_parts + j), d_embedded.row(j).begin());
  accumulate_column_sums(grads.patch_bias, d_embedded);
  add_scaled(grads.patch_proj, matmul_at(trace.raw_patches, d_embedded));
}

void add_params(EncoderParams& dst, const EncoderParams& src) {
  std::vector<const Matrix*> sources;
  for_each_param(src, [&](std::string_view, const Matrix& m) { sources.push_back(&m); });
  std::size_t i = 0;
  for_each_param(dst, [&](std::string_view, Matrix& m) { add_scaled(m, *sources[i++]); });
}

}  // namespace

EncoderParams encode_backward(std::span<const Image> images, const EncoderParams& params,
                              const Matrix& d_global, const LocalFeatures& d_local) {
  const auto& cfg = params.config;
  cfg.validate();
  const std::size_t n = images.size();
  if (!d_global.empty() && (d_global.rows() != n || d_global.cols() != cfg.embed_dim)) {
    throw ShapeError("encode_backward: global gradient is " + shape_string(d_global));
  }
  if (d_local.num_parts() != 0 &&
      (d_local.num_parts() != cfg.num_parts || d_local.items() != n ||
       d_local.dim() != cfg.embed_dim)) {
    throw ShapeError("encode_backward: local gradient shape mismatch");
  }
  const RegionMap regions = region_partition(cfg.num_patches(), cfg.grid_rows(), cfg.num_parts);
  const std::size_t chunks = (n + kChunk - 1) / kChunk;
  std::vector<EncoderParams> partial(chunks, params.zeros_like());
  parallel_for(chunks, [&](std::size_t chunk) {
    const std::size_t end = std::min(n, (chunk + 1) * kChunk);
    for (std::size_t i = chunk * kChunk; i < end; ++i) {
      const auto trace = detail::forward_item(images[i], params, regions, true);
      std::span<const double> dg;
      if (!d_global.empty()) dg = d_global.row(i);
      std::vector<std::span<const double>> dl(d_local.num_parts());
      for (std::size_t p = 0; p < d_local.num_parts(); ++p) dl[p] = d_local.parts[p].row(i);
      backward_item(trace, params, regions, dg, dl, partial[chunk]);
    }
  });
  EncoderParams total = params.zeros_like();
  for (const auto& p : partial) add_params(total, p);
  return total;
}

}  // namespace corrreid::encoder
