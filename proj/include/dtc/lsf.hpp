#pragma once

// Task transform pair: mask -> signed, normalized level-set map, and the smooth
// sigmoid-based inverse mapping a level-set prediction back to a probability.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "dtc/autodiff.hpp"
#include "dtc/grid.hpp"

namespace dtc {

/// Slope of the smooth Heaviside used by the inverse transform.
struct Sharpness {
  double k = 1500.0;

  Sharpness() = default;
  explicit Sharpness(double value) : k(value) {
    if (!(value > 0.0) || !std::isfinite(value)) throw std::invalid_argument("sharpness must be positive and finite");
  }
};

struct LevelSetMap {
  Image values;
  double pos_max = 0.0;  // largest outside distance before normalization (pixels)
  double neg_max = 0.0;  // largest inside distance before normalization (pixels)

  friend bool operator==(const LevelSetMap&, const LevelSetMap&) = default;
};

enum class DistanceScale { normalized, raw };

enum class PixelClass : std::uint8_t { exterior, boundary, interior };

inline void require_binary(const Mask& mask) {
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask.cells[i] > 1)
      throw std::invalid_argument("mask value " + std::to_string(mask.cells[i]) + " at index " + std::to_string(i) +
                                  " is not binary");
}

/// Foreground pixels with at least one background 4-neighbour are boundary;
/// the image border counts as background.
inline Grid<PixelClass> classify_pixels(const Mask& mask) {
  Grid<PixelClass> out(mask.height, mask.width, PixelClass::exterior);
  const std::size_t h = mask.height, w = mask.width;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      if (!mask(y, x)) continue;
      const bool edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w || !mask(y - 1, x) || !mask(y + 1, x) ||
                        !mask(y, x - 1) || !mask(y, x + 1);
      out(y, x) = edge ? PixelClass::boundary : PixelClass::interior;
    }
  return out;
}

namespace detail {

// Lower envelope of parabolas (Felzenszwalb & Huttenlocher) over one line.
// `f` holds squared distances, with `far` marking cells without a site.
inline void squared_distance_1d(const double* f, std::size_t n, std::size_t stride, double* out,
                                std::vector<std::size_t>& v, std::vector<double>& z, std::vector<double>& line) {
  line.resize(n);
  for (std::size_t i = 0; i < n; ++i) line[i] = f[i * stride];
  v.resize(n);
  z.resize(n + 1);
  std::size_t k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (std::size_t q = 1; q < n; ++q) {
    const double fq = line[q] + static_cast<double>(q * q);
    auto intersect = [&](std::size_t p) {
      return (fq - (line[p] + static_cast<double>(p * p))) / (2.0 * static_cast<double>(q) - 2.0 * static_cast<double>(p));
    };
    // z[0] is -inf, so the scan always stops at k == 0.
    double s = intersect(v[k]);
    while (s <= z[k]) {
      --k;
      s = intersect(v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const double d = static_cast<double>(q) - static_cast<double>(v[k]);
    out[q * stride] = d * d + line[v[k]];
  }
}

}  // namespace detail

/// Exact squared Euclidean distance from every pixel to the nearest site.
/// Pixels are at distance `far` when there are no sites.
inline Grid<double> squared_distance_to(const Grid<std::uint8_t>& sites) {
  constexpr double far = 1e20;
  const std::size_t h = sites.height, w = sites.width;
  Grid<double> d(h, w);
  for (std::size_t i = 0; i < d.size(); ++i) d.cells[i] = sites.cells[i] ? 0.0 : far;
  if (h == 0 || w == 0) return d;
  std::vector<std::size_t> v;
  std::vector<double> z, line;
  Grid<double> tmp(h, w);
  for (std::size_t x = 0; x < w; ++x) detail::squared_distance_1d(&d(0, x), h, w, &tmp(0, x), v, z, line);
  for (std::size_t y = 0; y < h; ++y) detail::squared_distance_1d(&tmp(y, 0), w, 1, &d(y, 0), v, z, line);
  for (double& c : d.cells) c = std::min(c, far);
  return d;
}

/// Signed distance map of a binary mask: negative inside, zero on the
/// boundary, positive outside. Each sign is scaled by its own maximum unless
/// `scale` is raw. Masks without both classes give an all-zero map.
inline LevelSetMap signed_distance(const Mask& mask, DistanceScale scale = DistanceScale::normalized) {
  require_binary(mask);
  LevelSetMap out{Image(mask.height, mask.width, 0.0), 0.0, 0.0};
  const auto foreground = std::count(mask.cells.begin(), mask.cells.end(), std::uint8_t{1});
  if (foreground == 0 || static_cast<std::size_t>(foreground) == mask.size()) return out;

  const auto classes = classify_pixels(mask);
  Grid<std::uint8_t> not_interior(mask.height, mask.width);
  for (std::size_t i = 0; i < mask.size(); ++i) not_interior.cells[i] = classes.cells[i] != PixelClass::interior;

  const Grid<double> to_foreground = squared_distance_to(mask);
  const Grid<double> to_outside = squared_distance_to(not_interior);

  for (std::size_t i = 0; i < mask.size(); ++i) {
    switch (classes.cells[i]) {
      case PixelClass::exterior:
        out.values.cells[i] = std::sqrt(to_foreground.cells[i]);
        out.pos_max = std::max(out.pos_max, out.values.cells[i]);
        break;
      case PixelClass::interior:
        out.values.cells[i] = -std::sqrt(to_outside.cells[i]);
        out.neg_max = std::max(out.neg_max, -out.values.cells[i]);
        break;
      case PixelClass::boundary:
        break;
    }
  }
  if (scale == DistanceScale::normalized) {
    for (double& v : out.values.cells) {
      if (v > 0.0 && out.pos_max > 0.0) v /= out.pos_max;
      if (v < 0.0 && out.neg_max > 0.0) v /= out.neg_max;
    }
  }
  return out;
}

/// Smooth inverse transform sigma(-k z): inside (z < 0) maps towards 1.
inline Var inverse_transform(const Var& z, Sharpness k = {}) { return sigmoid(scale(z, -k.k)); }

inline Tensor inverse_transform(const Tensor& z, Sharpness k = {}) {
  Tensor out(z.shape());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = detail::stable_sigmoid(-k.k * z[i]);
  return out;
}

inline double inverse_transform(double z, Sharpness k = {}) { return detail::stable_sigmoid(-k.k * z); }

/// Closed-form derivative of inverse_transform: -k s (1 - s), s = sigma(-k z).
inline Tensor inverse_gradient(const Tensor& z, Sharpness k = {}) {
  Tensor out(z.shape());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double s = detail::stable_sigmoid(-k.k * z[i]);
    out[i] = -k.k * s * (1.0 - s);
  }
  return out;
}

}  // namespace dtc
