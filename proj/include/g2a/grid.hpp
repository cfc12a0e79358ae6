#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>

#include "g2a/common.hpp"

namespace g2a {

/// Regular voxel lattice. Voxel (i, j, k) spans
/// origin + [i, i+1) x [j, j+1) x [k, k+1) times `cell`; storage is x-fastest.
struct GridSpec {
  Vec3 origin;
  std::array<std::uint32_t, 3> dims{0, 0, 0};  // nx, ny, nz
  double cell = 10.0;

  std::size_t nx() const { return dims[0]; }
  std::size_t ny() const { return dims[1]; }
  std::size_t nz() const { return dims[2]; }
  std::size_t size() const { return nx() * ny() * nz(); }

  std::size_t index(std::size_t i, std::size_t j, std::size_t k) const { return i + nx() * (j + ny() * k); }

  Vec3 center(std::size_t i, std::size_t j, std::size_t k) const {
    return {origin.x + (static_cast<double>(i) + 0.5) * cell, origin.y + (static_cast<double>(j) + 0.5) * cell,
            origin.z + (static_cast<double>(k) + 0.5) * cell};
  }
  Vec3 center(std::size_t flat) const {
    return center(flat % nx(), (flat / nx()) % ny(), flat / (nx() * ny()));
  }

  /// Voxel containing p (half-open cells; the upper boundary of the lattice is
  /// included in the last voxel). nullopt outside the lattice.
  std::optional<std::size_t> locate(Vec3 p) const {
    auto axis = [&](double v, double o, std::size_t n) -> std::optional<std::size_t> {
      const double f = (v - o) / cell;
      if (!(f >= 0.0) || f > static_cast<double>(n)) return std::nullopt;
      return std::min(static_cast<std::size_t>(f), n - 1);
    };
    const auto i = axis(p.x, origin.x, nx());
    const auto j = axis(p.y, origin.y, ny());
    const auto k = axis(p.z, origin.z, nz());
    if (!i || !j || !k) return std::nullopt;
    return index(*i, *j, *k);
  }

  bool contains(Vec3 p) const { return locate(p).has_value(); }

  /// Sub-lattice starting at voxel offset (i0, j0, k0).
  GridSpec sub(std::array<std::uint32_t, 3> offset, std::array<std::uint32_t, 3> sub_dims) const {
    GridSpec g;
    g.origin = {origin.x + offset[0] * cell, origin.y + offset[1] * cell, origin.z + offset[2] * cell};
    g.dims = sub_dims;
    g.cell = cell;
    return g;
  }

  friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

}  // namespace g2a
