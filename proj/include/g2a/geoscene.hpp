#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "g2a/common.hpp"

namespace g2a {

/// Axis-aligned building box. `height` is measured from the terrain under the
/// footprint center.
struct Building {
  double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;
  double height = 0.0;

  friend bool operator==(const Building&, const Building&) = default;
};

struct Transmitter {
  std::string cell_id;
  Vec3 position;
  double tx_power_dbm = 20.0;
  double frequency_ghz = 3.5;

  friend bool operator==(const Transmitter&, const Transmitter&) = default;
};

/// Regular elevation grid anchored at (0, 0); sample (i, j) sits at
/// (i * spacing, j * spacing). Queries are bilinear and clamp to the grid.
struct Terrain {
  std::size_t nx = 2, ny = 2;
  double spacing = 1000.0;
  std::vector<double> elevation = std::vector<double>(4, 0.0);  // row-major, x fastest

  double at(double x, double y) const;
  static Terrain flat(double extent_x, double extent_y, double spacing);

  friend bool operator==(const Terrain&, const Terrain&) = default;
};

struct Scene {
  double extent_x = 0.0;
  double extent_y = 0.0;
  Terrain terrain;
  std::vector<Building> buildings;
  std::vector<Transmitter> transmitters;

  /// Base elevation of a building box (terrain under the footprint center).
  double building_base(const Building& b) const {
    return terrain.at(0.5 * (b.x0 + b.x1), 0.5 * (b.y0 + b.y1));
  }
  bool inside_building_footprint(double x, double y) const;

  /// Throws ConfigError describing the first violated invariant.
  void validate() const;

  friend bool operator==(const Scene&, const Scene&) = default;
};

struct SceneConfig {
  double extent_x = 1000.0;
  double extent_y = 1000.0;
  std::size_t building_count = 70;
  double building_min_side = 20.0;
  double building_max_side = 70.0;
  double building_min_height = 8.0;
  double building_max_height = 60.0;
  double street_gap = 8.0;  // minimum clearance between footprints
  std::size_t transmitter_count = 10;
  double mast_min_height = 25.0;
  double mast_max_height = 25.0;
  double tx_clearance = 15.0;  // keep-out radius around masts
  double tx_power_dbm = 20.0;
  double frequency_ghz = 3.5;
  double terrain_spacing = 50.0;
  double relief_amplitude = 0.0;  // 0 = flat ground
  double relief_wavelength = 400.0;
  std::size_t retry_budget = 20000;
};

/// Procedural scene: non-overlapping boxes and masts placed in open ground.
/// Deterministic in (seed, cfg).
Scene generate_scene(std::uint64_t seed, const SceneConfig& cfg);

/// Text scene format, see README. Numbers use the shortest exact decimal form.
void write_scene(const Scene& scene, std::ostream& os);
void save_scene(const Scene& scene, const std::filesystem::path& path);
Scene parse_scene(std::istream& is);
Scene ingest_scene(const std::filesystem::path& path);

/// Unordered transmitter pairs with horizontal separation <= max_dist, i < j.
struct AdjacencySet {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::vector<std::size_t> unpaired;
};

AdjacencySet build_adjacency(const Scene& scene, double max_dist);

}  // namespace g2a
