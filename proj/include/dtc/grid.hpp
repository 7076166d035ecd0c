#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace dtc {

/// Row-major H x W raster.
template <typename T>
struct Grid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<T> cells;

  Grid() = default;
  Grid(std::size_t h, std::size_t w, T fill = T{}) : height(h), width(w), cells(h * w, fill) {}
  Grid(std::size_t h, std::size_t w, std::vector<T> values) : height(h), width(w), cells(std::move(values)) {
    if (cells.size() != h * w)
      throw std::invalid_argument("grid: " + std::to_string(h) + "x" + std::to_string(w) + " does not hold " +
                                  std::to_string(cells.size()) + " cells");
  }

  T& operator()(std::size_t y, std::size_t x) noexcept { return cells[y * width + x]; }
  const T& operator()(std::size_t y, std::size_t x) const noexcept { return cells[y * width + x]; }

  std::size_t size() const noexcept { return cells.size(); }
  bool same_shape(const Grid<auto>& other) const noexcept {
    return height == other.height && width == other.width;
  }

  friend bool operator==(const Grid&, const Grid&) = default;
};

using Mask = Grid<std::uint8_t>;
using Image = Grid<double>;

template <typename T>
Grid<T> flip_horizontal(const Grid<T>& g) {
  Grid<T> out(g.height, g.width);
  for (std::size_t y = 0; y < g.height; ++y)
    for (std::size_t x = 0; x < g.width; ++x) out(y, g.width - 1 - x) = g(y, x);
  return out;
}

template <typename T>
Grid<T> flip_vertical(const Grid<T>& g) {
  Grid<T> out(g.height, g.width);
  for (std::size_t y = 0; y < g.height; ++y)
    for (std::size_t x = 0; x < g.width; ++x) out(g.height - 1 - y, x) = g(y, x);
  return out;
}

/// Quarter turn counter-clockwise.
template <typename T>
Grid<T> rotate90(const Grid<T>& g) {
  Grid<T> out(g.width, g.height);
  for (std::size_t y = 0; y < g.height; ++y)
    for (std::size_t x = 0; x < g.width; ++x) out(g.width - 1 - x, y) = g(y, x);
  return out;
}

template <typename T>
Grid<T> shift(const Grid<T>& g, std::ptrdiff_t dy, std::ptrdiff_t dx, T fill = T{}) {
  Grid<T> out(g.height, g.width, fill);
  for (std::size_t y = 0; y < g.height; ++y)
    for (std::size_t x = 0; x < g.width; ++x) {
      const auto ty = static_cast<std::ptrdiff_t>(y) + dy;
      const auto tx = static_cast<std::ptrdiff_t>(x) + dx;
      if (ty >= 0 && tx >= 0 && ty < static_cast<std::ptrdiff_t>(g.height) && tx < static_cast<std::ptrdiff_t>(g.width))
        out(static_cast<std::size_t>(ty), static_cast<std::size_t>(tx)) = g(y, x);
    }
  return out;
}

}  // namespace dtc
