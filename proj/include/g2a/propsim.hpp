#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "g2a/geoscene.hpp"
#include "g2a/grid.hpp"

namespace g2a {

/// Per-transmitter RSRP volume in dBm. Values are single precision so the
/// in-memory map and its file image are the same bits.
struct RadioMap {
  std::string cell_id;
  GridSpec grid;
  std::vector<float> values;

  float at(std::size_t i, std::size_t j, std::size_t k) const { return values[grid.index(i, j, k)]; }

  /// Extract the sub-volume at voxel `offset`; throws ShapeError when it does
  /// not fit.
  RadioMap crop(std::array<std::uint32_t, 3> offset, std::array<std::uint32_t, 3> dims) const;

  friend bool operator==(const RadioMap&, const RadioMap&) = default;
};

/// Log-distance LOS/NLOS surrogate with wall penetration and correlated
/// log-normal shadowing.
struct PropagationParams {
  double pl_exponent_los = 2.0;
  double pl_exponent_nlos = 3.2;
  double reference_loss = 40.0;  // dB at 1 m
  double wall_penetration = 15.0;  // dB per counted crossing
  int max_counted_walls = 3;
  double shadowing_sigma = 0.0;  // dB
  double shadowing_corr_len = 50.0;  // m
  double rsrp_floor = -140.0;  // dBm
  std::uint64_t seed = 0;

  void validate() const;
};

/// The "real" domain used as target: steeper NLOS decay, lossier walls and
/// 4 dB shadowing on top of the simulation parameters.
PropagationParams shifted_domain(const PropagationParams& source);

/// Lattice covering the scene extent at `cell` pitch with `levels` vertical
/// layers starting at z = 0.
GridSpec scene_grid(const Scene& scene, double cell = 10.0, std::uint32_t levels = 20);

/// Building-crossing counter backed by a 2-D bucket grid over footprints.
/// Segments are walked cell by cell (Amanatides-Woo) and only buildings in
/// visited buckets are slab-tested.
class OcclusionIndex {
 public:
  explicit OcclusionIndex(const Scene& scene, double bucket_size = 50.0);

  /// Number of box-surface crossings of segment ab, capped at `cap`.
  int count_crossings(Vec3 a, Vec3 b, int cap) const;

 private:
  struct Box {
    double lo[3];
    double hi[3];
  };
  std::vector<Box> boxes_;
  std::size_t bx_ = 1, by_ = 1;
  double bucket_ = 50.0;
  std::vector<std::vector<std::uint32_t>> buckets_;
};

/// Wall crossings of segment ab (entry + exit per box), capped.
int trace_occlusion(const Scene& scene, Vec3 a, Vec3 b, int cap);

RadioMap compute_radio_map(const Scene& scene, const Transmitter& tx, const PropagationParams& params,
                           const GridSpec& grid);

/// One map per transmitter in scene order. `threads` only changes wall time.
std::vector<RadioMap> compute_all(const Scene& scene, const PropagationParams& params, const GridSpec& grid,
                                  unsigned threads = 1);

/// Zero-mean, unit-variance correlated field (before scaling by sigma), a
/// pure function of (seed, cell_id, voxel coordinate).
std::vector<double> shadowing_field(const GridSpec& grid, const PropagationParams& params,
                                    const std::string& cell_id);

// RMAP binary format: 64-byte header then nx*ny*nz little-endian float32,
// x fastest.
//   [0,4)   "RMAP"           [4,6)  u16 version = 1
//   [6,7)   u8 cell_id len   [7,16) cell_id bytes, zero padded (max 9)
//   [16,40) origin 3 x f64   [40,52) dims 3 x u32
//   [52,60) cell_size f64    [60,64) reserved, zero
inline constexpr std::size_t kRadioMapHeaderBytes = 64;
inline constexpr std::size_t kRadioMapMaxCellId = 9;

void write_radio_map(const RadioMap& map, std::ostream& os);
RadioMap read_radio_map(std::istream& is);
void save_radio_map(const RadioMap& map, const std::filesystem::path& path);
RadioMap load_radio_map(const std::filesystem::path& path);

}  // namespace g2a
