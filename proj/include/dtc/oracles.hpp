#pragma once

// Brute-force reference implementations. They share no code with the
// production paths they check (no EDT, no pixel classifier reuse) and are only
// meant for small inputs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "dtc/grid.hpp"

namespace dtc::oracle {

namespace detail {

inline bool on_contour(const Mask& m, std::size_t y, std::size_t x) {
  if (!m(y, x)) return false;
  if (y == 0 || x == 0 || y + 1 == m.height || x + 1 == m.width) return true;
  return !m(y - 1, x) || !m(y + 1, x) || !m(y, x - 1) || !m(y, x + 1);
}

struct Point {
  long y, x;
};

inline double nearest(const Point& p, const std::vector<Point>& set) {
  long best = std::numeric_limits<long>::max();
  for (const Point& q : set) best = std::min(best, (p.y - q.y) * (p.y - q.y) + (p.x - q.x) * (p.x - q.x));
  return std::sqrt(static_cast<double>(best));
}

}  // namespace detail

struct SignedDistance {
  Image values;
  double pos_max = 0.0;
  double neg_max = 0.0;
};

/// All-pairs signed distance: exterior pixels measure to the nearest
/// foreground pixel, interior pixels to the nearest non-interior pixel.
inline SignedDistance signed_distance(const Mask& m, bool normalize = true) {
  SignedDistance out{Image(m.height, m.width, 0.0), 0.0, 0.0};
  std::size_t fg = 0;
  for (auto v : m.cells) fg += v;
  if (fg == 0 || fg == m.size()) return out;

  std::vector<detail::Point> foreground, not_interior;
  for (std::size_t y = 0; y < m.height; ++y)
    for (std::size_t x = 0; x < m.width; ++x) {
      const detail::Point p{static_cast<long>(y), static_cast<long>(x)};
      if (m(y, x)) foreground.push_back(p);
      if (!m(y, x) || detail::on_contour(m, y, x)) not_interior.push_back(p);
    }
  for (std::size_t y = 0; y < m.height; ++y)
    for (std::size_t x = 0; x < m.width; ++x) {
      const detail::Point p{static_cast<long>(y), static_cast<long>(x)};
      double v = 0.0;
      if (!m(y, x))
        v = detail::nearest(p, foreground);
      else if (!detail::on_contour(m, y, x))
        v = -detail::nearest(p, not_interior);
      out.values(y, x) = v;
      if (v > 0) out.pos_max = std::max(out.pos_max, v);
      if (v < 0) out.neg_max = std::max(out.neg_max, -v);
    }
  if (normalize)
    for (double& v : out.values.cells) v = v > 0 ? v / out.pos_max : v < 0 ? v / out.neg_max : 0.0;
  return out;
}

struct SurfaceScores {
  double asd = 0.0;
  double hd95 = 0.0;
  bool degenerate = false;
};

/// All-pairs ASD and nearest-rank HD95 over both directed distance multisets.
inline SurfaceScores surface_distances(const Mask& pred, const Mask& gt) {
  auto contour = [](const Mask& m) {
    std::vector<detail::Point> pts;
    for (std::size_t y = 0; y < m.height; ++y)
      for (std::size_t x = 0; x < m.width; ++x)
        if (detail::on_contour(m, y, x)) pts.push_back({static_cast<long>(y), static_cast<long>(x)});
    return pts;
  };
  const auto a = contour(pred);
  const auto b = contour(gt);
  if (a.empty() && b.empty()) return {};
  if (a.empty() || b.empty()) {
    const double diag = std::sqrt(static_cast<double>(pred.height * pred.height + pred.width * pred.width));
    return {diag, diag, true};
  }
  std::vector<double> d;
  for (const auto& p : a) d.push_back(detail::nearest(p, b));
  for (const auto& p : b) d.push_back(detail::nearest(p, a));
  std::sort(d.begin(), d.end());
  double total = 0.0;
  for (double v : d) total += v;
  const std::size_t n = d.size();
  std::size_t rank = (95 * n + 99) / 100;  // ceil(0.95 n) in integers
  if (rank == 0) rank = 1;
  return {total / static_cast<double>(n), d[rank - 1], false};
}

/// Random h x w test mask: salt-and-pepper noise, rectangles or a disc.
inline Mask random_mask(std::mt19937_64& rng, std::size_t h, std::size_t w) {
  Mask m(h, w, 0);
  std::uniform_int_distribution<int> kind(0, 2);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  switch (kind(rng)) {
    case 0: {
      const double p = unit(rng);
      for (auto& c : m.cells) c = unit(rng) < p ? 1 : 0;
      break;
    }
    case 1: {
      const int shapes = 1 + static_cast<int>(unit(rng) * 3);
      for (int s = 0; s < shapes; ++s) {
        const std::size_t y0 = static_cast<std::size_t>(unit(rng) * h), x0 = static_cast<std::size_t>(unit(rng) * w);
        const std::size_t y1 = y0 + static_cast<std::size_t>(unit(rng) * (h - y0)) + 1;
        const std::size_t x1 = x0 + static_cast<std::size_t>(unit(rng) * (w - x0)) + 1;
        for (std::size_t y = y0; y < std::min(y1, h); ++y)
          for (std::size_t x = x0; x < std::min(x1, w); ++x) m(y, x) = 1;
      }
      break;
    }
    default: {
      const double cy = unit(rng) * h, cx = unit(rng) * w, r = unit(rng) * std::max(h, w) * 0.6;
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          if ((y + 0.5 - cy) * (y + 0.5 - cy) + (x + 0.5 - cx) * (x + 0.5 - cx) <= r * r) m(y, x) = 1;
      break;
    }
  }
  return m;
}

/// Random test mask with sides drawn from [1, max_side].
inline Mask random_mask(std::mt19937_64& rng, std::size_t max_side) {
  std::uniform_int_distribution<std::size_t> side(1, max_side);
  const std::size_t h = side(rng);
  const std::size_t w = side(rng);
  return random_mask(rng, h, w);
}

/// Random mask with both classes present and at least 2x2 pixels.
inline Mask random_nondegenerate_mask(std::mt19937_64& rng, std::size_t max_side) {
  while (true) {
    Mask m = random_mask(rng, max_side);
    std::size_t fg = 0;
    for (auto v : m.cells) fg += v;
    if (fg > 0 && fg < m.size()) return m;
  }
}

}  // namespace dtc::oracle
