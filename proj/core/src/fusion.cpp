#include "corrreid/fusion.hpp"

#include <algorithm>
#include <cmath>

namespace corrreid::fusion {

ChannelTensor ChannelTensor::from_vector(std::span<const double> v) {
  ChannelTensor t(v.size(), 1, 1);
  std::ranges::copy(v, t.data_.begin());
  return t;
}

std::vector<double> ChannelTensor::cell(std::size_t index) const {
  std::vector<double> out(channels_);
  for (std::size_t c = 0; c < channels_; ++c) out[c] = data_[c * cells() + index];
  return out;
}

void ChannelTensor::set_cell(std::size_t index, std::span<const double> values) {
  for (std::size_t c = 0; c < channels_; ++c) data_[c * cells() + index] = values[c];
}

std::string to_string(SigmoidScope scope) {
  return scope == SigmoidScope::whole_sum ? "whole_sum" : "pooled_branch_only";
}

SigmoidScope sigmoid_scope_from_string(const std::string& text) {
  if (text == "whole_sum") return SigmoidScope::whole_sum;
  if (text == "pooled_branch_only") return SigmoidScope::pooled_branch_only;
  throw ConfigError("sigmoid_scope must be \"whole_sum\" or \"pooled_branch_only\", got \"" +
                    text + "\"");
}

McaParams McaParams::init(std::size_t channels, std::size_t ratio, SigmoidScope scope,
                          std::uint64_t seed) {
  if (ratio == 0 || channels % ratio != 0) {
    throw ConfigError("fusion.reduction " + std::to_string(ratio) + " must divide " +
                      std::to_string(channels) + " channels");
  }
  Rng rng(seed);
  McaParams p;
  p.ratio = ratio;
  p.scope = scope;
  p.squeeze = Matrix::random_normal(channels / ratio, channels, 1.0 / std::sqrt(double(channels)), rng);
  p.expand = Matrix::random_normal(channels, channels / ratio, 0.01, rng);
  return p;
}

void McaParams::validate() const {
  const std::size_t c = squeeze.cols();
  if (ratio == 0 || c % ratio != 0 || squeeze.rows() != c / ratio || expand.rows() != c ||
      expand.cols() != c / ratio) {
    throw ShapeError("MCA maps are " + shape_string(squeeze) + " and " + shape_string(expand) +
                     " for ratio " + std::to_string(ratio));
  }
  if (!all_finite(squeeze) || !all_finite(expand)) throw ConfigError("MCA maps are not finite");
}

namespace {

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct BranchTrace {
  std::vector<double> input;
  std::vector<double> hidden_pre;
  std::vector<double> output;
};

BranchTrace branch(std::span<const double> x, const McaParams& p) {
  BranchTrace t;
  t.input.assign(x.begin(), x.end());
  const std::size_t h = p.squeeze.rows();
  t.hidden_pre.assign(h, 0.0);
  for (std::size_t r = 0; r < h; ++r) t.hidden_pre[r] = dot(p.squeeze.row(r), x);
  t.output.assign(p.expand.rows(), 0.0);
  for (std::size_t c = 0; c < p.expand.rows(); ++c) {
    const auto row = p.expand.row(c);
    double s = 0.0;
    for (std::size_t r = 0; r < h; ++r) s += row[r] * std::max(0.0, t.hidden_pre[r]);
    t.output[c] = s;
  }
  return t;
}

// Accumulates parameter grads and returns d/d(input).
std::vector<double> branch_backward(const BranchTrace& t, std::span<const double> d_out,
                                    const McaParams& p, Matrix& d_squeeze, Matrix& d_expand) {
  const std::size_t h = p.squeeze.rows();
  std::vector<double> d_hidden(h, 0.0);
  for (std::size_t c = 0; c < p.expand.rows(); ++c) {
    for (std::size_t r = 0; r < h; ++r) {
      const double act = std::max(0.0, t.hidden_pre[r]);
      d_expand(c, r) += d_out[c] * act;
      d_hidden[r] += d_out[c] * p.expand(c, r);
    }
  }
  std::vector<double> d_in(t.input.size(), 0.0);
  for (std::size_t r = 0; r < h; ++r) {
    if (t.hidden_pre[r] <= 0.0) continue;
    const auto row = p.squeeze.row(r);
    for (std::size_t c = 0; c < t.input.size(); ++c) {
      d_squeeze(r, c) += d_hidden[r] * t.input[c];
      d_in[c] += d_hidden[r] * row[c];
    }
  }
  return d_in;
}

struct GateTrace {
  std::vector<BranchTrace> local;  // per cell
  BranchTrace pooled;
  ChannelTensor gate;
};

GateTrace gate_forward(const ChannelTensor& x, const McaParams& params) {
  params.validate();
  if (x.channels() != params.channels()) {
    throw ShapeError("gate input has " + std::to_string(x.channels()) + " channels, maps expect " +
                     std::to_string(params.channels()));
  }
  GateTrace t;
  t.pooled = branch(gap(x), params);
  t.gate = ChannelTensor(x.channels(), x.height(), x.width());
  for (std::size_t cell = 0; cell < x.cells(); ++cell) {
    t.local.push_back(branch(x.cell(cell), params));
    std::vector<double> m(x.channels());
    for (std::size_t c = 0; c < m.size(); ++c) {
      const double local = t.local.back().output[c];
      const double pooled = t.pooled.output[c];
      m[c] = params.scope == SigmoidScope::whole_sum ? sigmoid(local + pooled)
                                                     : local + sigmoid(pooled);
    }
    t.gate.set_cell(cell, m);
  }
  return t;
}

}  // namespace

std::vector<double> gap(const ChannelTensor& x) {
  std::vector<double> out(x.channels(), 0.0);
  if (x.cells() == 0) return out;
  for (std::size_t c = 0; c < x.channels(); ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.height(); ++i)
      for (std::size_t j = 0; j < x.width(); ++j) s += x.at(c, i, j);
    out[c] = s / double(x.cells());
  }
  return out;
}

ChannelTensor channel_gate(const ChannelTensor& x, const McaParams& params) {
  return gate_forward(x, params).gate;
}

namespace {

ChannelTensor sum(const ChannelTensor& u, const ChannelTensor& v) {
  if (!u.same_shape(v)) throw ShapeError("fuse: u and v differ in shape");
  ChannelTensor x = u;
  for (std::size_t i = 0; i < x.values().size(); ++i) x.values()[i] += v.values()[i];
  return x;
}

}  // namespace

ChannelTensor fuse(const ChannelTensor& u, const ChannelTensor& v, const McaParams& params) {
  const ChannelTensor gate = channel_gate(sum(u, v), params);
  ChannelTensor z = u;
  for (std::size_t i = 0; i < z.values().size(); ++i) {
    const double m = gate.values()[i];
    z.values()[i] = m * u.values()[i] + (1.0 - m) * v.values()[i];
  }
  return z;
}

FuseGradients fuse_backward(const ChannelTensor& u, const ChannelTensor& v, const McaParams& params,
                            const ChannelTensor& d_z) {
  if (!d_z.same_shape(u)) throw ShapeError("fuse_backward: upstream gradient shape mismatch");
  const ChannelTensor x = sum(u, v);
  const GateTrace trace = gate_forward(x, params);

  FuseGradients g{Matrix(params.squeeze.rows(), params.squeeze.cols()),
                  Matrix(params.expand.rows(), params.expand.cols()),
                  ChannelTensor(u.channels(), u.height(), u.width()),
                  ChannelTensor(u.channels(), u.height(), u.width())};
  ChannelTensor d_gate(u.channels(), u.height(), u.width());
  for (std::size_t i = 0; i < d_z.values().size(); ++i) {
    const double m = trace.gate.values()[i];
    const double dz = d_z.values()[i];
    g.u.values()[i] = dz * m;
    g.v.values()[i] = dz * (1.0 - m);
    d_gate.values()[i] = dz * (u.values()[i] - v.values()[i]);
  }

  // Gate derivative split into local (per cell) and pooled (summed) branches.
  const std::size_t channels = x.channels();
  std::vector<double> d_pooled(channels, 0.0);
  ChannelTensor d_x(channels, x.height(), x.width());
  for (std::size_t cell = 0; cell < x.cells(); ++cell) {
    const auto dm = d_gate.cell(cell);
    std::vector<double> d_local(channels);
    for (std::size_t c = 0; c < channels; ++c) {
      const double local = trace.local[cell].output[c];
      const double pooled = trace.pooled.output[c];
      if (params.scope == SigmoidScope::whole_sum) {
        const double s = sigmoid(local + pooled);
        const double d_pre = dm[c] * s * (1.0 - s);
        d_local[c] = d_pre;
        d_pooled[c] += d_pre;
      } else {
        const double s = sigmoid(pooled);
        d_local[c] = dm[c];
        d_pooled[c] += dm[c] * s * (1.0 - s);
      }
    }
    const auto d_in = branch_backward(trace.local[cell], d_local, params, g.squeeze, g.expand);
    d_x.set_cell(cell, d_in);
  }
  const auto d_gap = branch_backward(trace.pooled, d_pooled, params, g.squeeze, g.expand);
  const double inv_cells = 1.0 / double(x.cells());
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t i = 0; i < x.height(); ++i)
      for (std::size_t j = 0; j < x.width(); ++j) d_x.at(c, i, j) += d_gap[c] * inv_cells;

  for (std::size_t i = 0; i < d_x.values().size(); ++i) {
    g.u.values()[i] += d_x.values()[i];
    g.v.values()[i] += d_x.values()[i];
  }
  return g;
}

FeatureMatrix fuse_rows(const FeatureMatrix& u, const FeatureMatrix& v, const McaParams& params) {
  if (u.rows() != v.rows() || u.cols() != v.cols()) {
    throw ShapeError("fuse_rows: u is " + shape_string(u) + ", v is " + shape_string(v));
  }
  FeatureMatrix z(u.rows(), u.cols());
  for (std::size_t r = 0; r < u.rows(); ++r) {
    const auto fused =
        fuse(ChannelTensor::from_vector(u.row(r)), ChannelTensor::from_vector(v.row(r)), params);
    std::ranges::copy(fused.values(), z.row(r).begin());
  }
  return z;
}

FuseRowsGradients fuse_rows_backward(const FeatureMatrix& u, const FeatureMatrix& v,
                                     const McaParams& params, const Matrix& d_z) {
  if (u.rows() != v.rows() || u.cols() != v.cols() || d_z.rows() != u.rows() ||
      d_z.cols() != u.cols()) {
    throw ShapeError("fuse_rows_backward: shape mismatch");
  }
  FuseRowsGradients g{Matrix(params.squeeze.rows(), params.squeeze.cols()),
                      Matrix(params.expand.rows(), params.expand.cols()), Matrix(u.rows(), u.cols()),
                      Matrix(v.rows(), v.cols())};
  for (std::size_t r = 0; r < u.rows(); ++r) {
    const auto row = fuse_backward(ChannelTensor::from_vector(u.row(r)),
                                   ChannelTensor::from_vector(v.row(r)), params,
                                   ChannelTensor::from_vector(d_z.row(r)));
    add_scaled(g.squeeze, row.squeeze);
    add_scaled(g.expand, row.expand);
    std::ranges::copy(row.u.values(), g.u.row(r).begin());
    std::ranges::copy(row.v.values(), g.v.row(r).begin());
  }
  return g;
}

}  // namespace corrreid::fusion
