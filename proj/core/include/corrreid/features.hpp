#pragma once

#include <cstddef>
#include <vector>

#include "corrreid/numerics.hpp"

namespace corrreid {

/// Raw image tensor, H x W x C, channel-last row-major.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c, double fill = 0.0)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

  double& at(std::size_t y, std::size_t x, std::size_t c) {
    return pixels[(y * width + x) * channels + c];
  }
  double at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }
  bool same_shape(const Image& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
  bool operator==(const Image&) const = default;
};

/// N x d matrix of per-item features (g, u, v or z).
using FeatureMatrix = Matrix;

/// Part-local features: one N x d matrix per part.
struct LocalFeatures {
  std::vector<Matrix> parts;

  LocalFeatures() = default;
  LocalFeatures(std::size_t num_parts, std::size_t items, std::size_t dim)
      : parts(num_parts, Matrix(items, dim)) {}

  std::size_t num_parts() const { return parts.size(); }
  std::size_t items() const { return parts.empty() ? 0 : parts.front().rows(); }
  std::size_t dim() const { return parts.empty() ? 0 : parts.front().cols(); }
  bool operator==(const LocalFeatures&) const = default;
};

}  // namespace corrreid
