#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <limits>
#include <string>
#include <vector>

#include "g2a/geoscene.hpp"
#include "g2a/grid.hpp"
#include "g2a/propsim.hpp"

namespace g2a {

/// Distance thresholds and per-band retention probabilities of the
/// distance-biased mask.
struct MaskParams {
  double r1 = 150.0;
  double r2 = 400.0;
  double p_near = 0.8;
  double p_mid = 0.2;
  double p_far = 0.1;

  void validate() const;
  /// Retention probability for a voxel at distance d from its transmitter.
  double retention(double d) const { return d <= r1 ? p_near : (d <= r2 ? p_mid : p_far); }
  /// 0 = near, 1 = mid, 2 = far.
  int band(double d) const { return d <= r1 ? 0 : (d <= r2 ? 1 : 2); }

  friend bool operator==(const MaskParams&, const MaskParams&) = default;
};

struct Mask {
  GridSpec grid;
  std::vector<std::uint8_t> bits;

  std::size_t count() const;
};

/// RSRP normalization window; observed values map to [0, 1].
struct NormWindow {
  double lo = -140.0;
  double hi = -40.0;

  double span() const { return hi - lo; }
  double normalize(double dbm) const;  // clamped to [0, 1]
  double denormalize(double v) const { return lo + v * span(); }

  friend bool operator==(const NormWindow&, const NormWindow&) = default;
};

/// Two-channel observation grid: normalized value (0 where unobserved) and
/// the observation mask.
struct GridSample {
  GridSpec grid;
  std::vector<double> value;
  std::vector<double> mask;

  std::size_t observed() const;
};

enum class Domain { ground, aerial };

std::string_view domain_name(Domain d);

struct Measurement {
  Vec3 position;
  double rsrp_dbm = 0.0;
  std::string cell_id;
  Domain domain = Domain::ground;

  friend bool operator==(const Measurement&, const Measurement&) = default;
};

struct MeasurementSet {
  Domain domain = Domain::ground;
  std::vector<Measurement> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  /// Throws ConfigError if a sample violates the set's domain invariants.
  void validate() const;

  friend bool operator==(const MeasurementSet&, const MeasurementSet&) = default;
};

/// Planned UAV route: polyline sampled every `sample_spacing` meters.
struct Route {
  std::vector<Vec3> waypoints;
  double sample_spacing = 10.0;

  double length() const;
  /// Sample points at arc lengths 0, s, 2s, ... <= length.
  std::vector<Vec3> sample_points() const;
  std::vector<double> sample_arc_lengths() const;

  friend bool operator==(const Route&, const Route&) = default;
};

/// Horizontal rectangle routes must stay within.
struct Bounds2D {
  double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;
};

// --- operations -------------------------------------------------------------

Mask sample_mask(const GridSpec& grid, Vec3 tx_pos, const MaskParams& params, std::uint64_t seed);

GridSample apply_mask(const RadioMap& map, const Mask& mask, const NormWindow& norm);

/// Ground reports at 1.5 m above terrain. Voxels are drawn with replacement
/// with weight equal to their band retention probability; outdoor only.
struct GroundSamplingParams {
  MaskParams bands;
  double report_sigma = 2.0;  // dB
  double altitude = 1.5;  // m above terrain
};

MeasurementSet synthesize_ground(const RadioMap& map, const Scene& scene, const Vec3& tx_pos,
                                 std::size_t n_samples, std::uint64_t seed,
                                 const GroundSamplingParams& params = {});

std::vector<Route> generate_routes(const Bounds2D& bounds, std::size_t n_routes, double alt_lo, double alt_hi,
                                   std::uint64_t seed, double sample_spacing = 10.0);
std::vector<Route> generate_routes(const Scene& scene, std::size_t n_routes, double alt_lo, double alt_hi,
                                   std::uint64_t seed, double sample_spacing = 10.0);

/// UAV samples along routes from the target map. The kept count is capped at
/// floor(max_ratio * ground_count); pass max_ratio = infinity for no cap.
MeasurementSet sample_route_measurements(const RadioMap& target_map, const std::vector<Route>& routes,
                                         double keep_prob, std::uint64_t seed,
                                         double max_ratio = 1e-3, std::size_t ground_count = 0);

/// Averages measurements per voxel. Throws FormatError naming the first
/// sample outside the grid.
GridSample rasterize(const MeasurementSet& ms, const GridSpec& grid, const NormWindow& norm);

/// Subset of `ms` inside the grid volume.
MeasurementSet restrict_to(const MeasurementSet& ms, const GridSpec& grid);

/// Value of the voxel nearest to p (p is clamped into the lattice).
float lookup_nearest(const RadioMap& map, Vec3 p);

// Measurement CSV: header `x,y,z,cell_id,rsrp_dbm,domain`, coordinates with
// 3 decimals, RSRP with 2 decimals.
void write_measurements(const MeasurementSet& ms, std::ostream& os);
MeasurementSet read_measurements(std::istream& is);
void save_measurements(const MeasurementSet& ms, const std::filesystem::path& path);
MeasurementSet load_measurements(const std::filesystem::path& path);

/// Values rounded to the CSV precision (what a write/read round trip yields).
MeasurementSet quantized(const MeasurementSet& ms);

// Route text file: one route per line, `spacing x y z x y z ...`.
void write_routes(const std::vector<Route>& routes, std::ostream& os);
std::vector<Route> read_routes(std::istream& is);

}  // namespace g2a
