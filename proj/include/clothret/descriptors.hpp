#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "clothret/error.hpp"

namespace clothret {

/// Channel-major C x H x W activation tensor.
class FeatureMap {
 public:
  FeatureMap(std::size_t channels, std::size_t height, std::size_t width, std::vector<double> values)
      : channels_(channels), height_(height), width_(width), values_(std::move(values)) {
    if (channels == 0 || height == 0 || width == 0) {
      throw Error(Errc::data, "feature map dimensions must be positive");
    }
    if (values_.size() != channels * height * width) {
      throw Error(Errc::dimension, "feature map has " + std::to_string(values_.size()) +
                                       " values, expected " + std::to_string(channels * height * width));
    }
    for (std::size_t c = 0; c < channels_; ++c) {
      for (const double v : channel(c)) {
        if (!std::isfinite(v)) {
          throw Error(Errc::data, "non-finite activation in channel " + std::to_string(c));
        }
        if (v < 0.0) {
          throw Error(Errc::data, "negative activation in channel " + std::to_string(c));
        }
      }
    }
  }

  std::size_t channels() const { return channels_; }
  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t cells() const { return height_ * width_; }

  std::span<const double> channel(std::size_t c) const {
    return std::span<const double>(values_).subspan(c * cells(), cells());
  }

  const std::vector<double>& values() const { return values_; }

 private:
  std::size_t channels_;
  std::size_t height_;
  std::size_t width_;
  std::vector<double> values_;
};

enum class PoolingKind { spoc, mac, gem };

struct PoolingSpec {
  PoolingKind kind = PoolingKind::gem;
  double p = 3.0;  // GeM exponent, ignored for the other kinds

  static PoolingSpec spoc() { return {PoolingKind::spoc, 1.0}; }
  static PoolingSpec mac() { return {PoolingKind::mac, 1.0}; }
  static PoolingSpec gem(double p = 3.0) { return {PoolingKind::gem, p}; }
};

namespace detail {

inline double pool_channel(std::span<const double> xs, const PoolingSpec& spec) {
  const double n = static_cast<double>(xs.size());
  switch (spec.kind) {
    case PoolingKind::spoc: {
      double sum = 0.0;
      for (const double x : xs) sum += x;
      return sum / n;
    }
    case PoolingKind::mac:
      return *std::max_element(xs.begin(), xs.end());
    case PoolingKind::gem: {
      if (spec.p == 1.0) return pool_channel(xs, PoolingSpec::spoc());
      // Factor out the maximum so large exponents neither overflow nor
      // underflow: (mean x^p)^(1/p) = m * (mean (x/m)^p)^(1/p).
      const double m = *std::max_element(xs.begin(), xs.end());
      if (m == 0.0) return 0.0;
      double sum = 0.0;
      for (const double x : xs) sum += std::pow(x / m, spec.p);
      return m * std::pow(sum / n, 1.0 / spec.p);
    }
  }
  return 0.0;
}

inline void normalize_in_place(std::span<double> v) {
  double sq = 0.0;
  for (const double x : v) sq += x * x;
  const double norm = std::sqrt(sq);
  for (double& x : v) x /= norm;
}

}  // namespace detail

/// Pools every channel of `map` to one value: SPoC is the spatial mean, MAC
/// the spatial max and GeM the generalized mean (mean of x^p)^(1/p).
inline std::vector<double> pool(const FeatureMap& map, const PoolingSpec& spec) {
  if (spec.kind == PoolingKind::gem && !(spec.p > 0.0 && std::isfinite(spec.p))) {
    throw Error(Errc::parameter, "GeM exponent p must be a positive finite number");
  }
  std::vector<double> out(map.channels());
  for (std::size_t c = 0; c < map.channels(); ++c) {
    out[c] = detail::pool_channel(map.channel(c), spec);
  }
  return out;
}

/// Combination of several global descriptors: each pooled vector is
/// L2-normalized, the pieces are concatenated in `specs` order and the result
/// is normalized again. Output length is channels x specs.size().
inline std::vector<double> combine_descriptors(const FeatureMap& map, const std::vector<PoolingSpec>& specs) {
  if (specs.empty()) {
    throw Error(Errc::parameter, "combine_descriptors needs at least one pooling spec");
  }
  std::vector<double> out;
  out.reserve(map.channels() * specs.size());
  for (std::size_t s = 0; s < specs.size(); ++s) {
    auto pooled = pool(map, specs[s]);
    double sq = 0.0;
    for (const double x : pooled) sq += x * x;
    if (!(sq > 0.0)) {
      throw Error(Errc::degenerate, "descriptor " + std::to_string(s) + " pooled to a zero vector");
    }
    detail::normalize_in_place(pooled);
    out.insert(out.end(), pooled.begin(), pooled.end());
  }
  detail::normalize_in_place(out);
  return out;
}

}  // namespace clothret
