#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "corrreid/features.hpp"
#include "corrreid/numerics.hpp"

namespace corrreid::fusion {

/// C x H x W tensor, channel-major.
class ChannelTensor {
 public:
  ChannelTensor() = default;
  ChannelTensor(std::size_t channels, std::size_t height, std::size_t width, double fill = 0.0)
      : channels_(channels), height_(height), width_(width), data_(channels * height * width, fill) {}

  /// A feature vector viewed as C x 1 x 1.
  static ChannelTensor from_vector(std::span<const double> v);

  std::size_t channels() const { return channels_; }
  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t cells() const { return height_ * width_; }

  double& at(std::size_t c, std::size_t i, std::size_t j) { return data_[(c * height_ + i) * width_ + j]; }
  double at(std::size_t c, std::size_t i, std::size_t j) const {
    return data_[(c * height_ + i) * width_ + j];
  }
  /// Channel vector at flattened cell index.
  std::vector<double> cell(std::size_t index) const;
  void set_cell(std::size_t index, std::span<const double> values);

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  bool same_shape(const ChannelTensor& o) const {
    return channels_ == o.channels_ && height_ == o.height_ && width_ == o.width_;
  }

 private:
  std::size_t channels_ = 0;
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<double> data_;
};

/// Where the sigmoid sits in the gate. `pooled_branch_only` squashes only
/// the pooled branch, so the gate is unbounded; `whole_sum` squashes the sum
/// of both branches into (0, 1).
enum class SigmoidScope { pooled_branch_only, whole_sum };

std::string to_string(SigmoidScope scope);
SigmoidScope sigmoid_scope_from_string(const std::string& text);

struct McaParams {
  Matrix squeeze;  // C1: (C/r) x C
  Matrix expand;   // C2: C x (C/r)
  std::size_t ratio = 4;
  SigmoidScope scope = SigmoidScope::whole_sum;

  static McaParams init(std::size_t channels, std::size_t ratio, SigmoidScope scope,
                        std::uint64_t seed);
  std::size_t channels() const { return squeeze.cols(); }
  void validate() const;
};

/// Per-channel mean over spatial cells.
std::vector<double> gap(const ChannelTensor& x);

/// m(x): C2(relu(C1 x)) per cell combined with C2(relu(C1 gap(x))) broadcast.
ChannelTensor channel_gate(const ChannelTensor& x, const McaParams& params);

/// z = m(u + v) * u + (1 - m(u + v)) * v
ChannelTensor fuse(const ChannelTensor& u, const ChannelTensor& v, const McaParams& params);

struct FuseGradients {
  Matrix squeeze;
  Matrix expand;
  ChannelTensor u;
  ChannelTensor v;
};

FuseGradients fuse_backward(const ChannelTensor& u, const ChannelTensor& v, const McaParams& params,
                            const ChannelTensor& d_z);

/// Row-wise fusion of N x C feature matrices (each row a C x 1 x 1 tensor).
FeatureMatrix fuse_rows(const FeatureMatrix& u, const FeatureMatrix& v, const McaParams& params);

struct FuseRowsGradients {
  Matrix squeeze;
  Matrix expand;
  Matrix u;
  Matrix v;
};

FuseRowsGradients fuse_rows_backward(const FeatureMatrix& u, const FeatureMatrix& v,
                                     const McaParams& params, const Matrix& d_z);

}  // namespace corrreid::fusion
