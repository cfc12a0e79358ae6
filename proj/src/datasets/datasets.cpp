#include "g2a/datasets.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

namespace g2a {

void MaskParams::validate() const {
  if (!(r1 > 0.0) || !(r1 < r2)) throw ConfigError("mask: require 0 < r1 < r2");
  if (!(0.0 < p_far && p_far < p_mid && p_mid < p_near && p_near < 1.0))
    throw ConfigError("mask: require 0 < p_far < p_mid < p_near < 1");
}

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

double NormWindow::normalize(double dbm) const { return std::clamp((dbm - lo) / span(), 0.0, 1.0); }

std::size_t GridSample::observed() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1.0));
}

std::string_view domain_name(Domain d) { return d == Domain::ground ? "ground" : "aerial"; }

void MeasurementSet::validate() const {
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& m = samples[i];
    if (m.domain != domain)
      throw ConfigError("measurement " + std::to_string(i) + ": domain differs from its set");
    if (!std::isfinite(m.rsrp_dbm)) throw ConfigError("measurement " + std::to_string(i) + ": rsrp not finite");
    if (m.domain == Domain::ground && !(m.position.z < 50.0))
      throw ConfigError("measurement " + std::to_string(i) + ": ground sample at or above 50 m");
  }
}

// ---------------------------------------------------------------------------
// Routes
// ---------------------------------------------------------------------------

double Route::length() const {
  double len = 0.0;
  for (std::size_t i = 1; i < waypoints.size(); ++i) len += distance(waypoints[i - 1], waypoints[i]);
  return len;
}

std::vector<double> Route::sample_arc_lengths() const {
  if (!(sample_spacing > 0.0)) throw ConfigError("route sample spacing must be positive");
  std::vector<double> s;
  const double total = length();
  for (std::size_t n = 0;; ++n) {
    const double a = static_cast<double>(n) * sample_spacing;
    if (a > total + 1e-9) break;
    s.push_back(a);
  }
  return s;
}

std::vector<Vec3> Route::sample_points() const {
  if (waypoints.size() < 2) throw ConfigError("route needs at least two waypoints");
  std::vector<Vec3> pts;
  std::size_t seg = 0;
  double seg_start = 0.0;
  for (double a : sample_arc_lengths()) {
    while (seg + 1 < waypoints.size() - 1 &&
           a > seg_start + distance(waypoints[seg], waypoints[seg + 1])) {
      seg_start += distance(waypoints[seg], waypoints[seg + 1]);
      ++seg;
    }
    const double len = distance(waypoints[seg], waypoints[seg + 1]);
    const double t = len > 0.0 ? std::clamp((a - seg_start) / len, 0.0, 1.0) : 0.0;
    pts.push_back(waypoints[seg] + t * (waypoints[seg + 1] - waypoints[seg]));
  }
  return pts;
}

std::vector<Route> generate_routes(const Bounds2D& bounds, std::size_t n_routes, double alt_lo, double alt_hi,
                                   std::uint64_t seed, double sample_spacing) {
  if (!(alt_lo >= 60.0 && alt_hi <= 200.0 && alt_lo <= alt_hi))
    throw ConfigError("route altitude band must lie within [60, 200] m");
  if (!(bounds.x0 < bounds.x1 && bounds.y0 < bounds.y1)) throw ConfigError("route bounds are empty");
  Rng rng(derive_seed(seed, "datasets.routes"));
  std::vector<Route> routes;
  for (std::size_t r = 0; r < n_routes; ++r) {
    Route route;
    route.sample_spacing = sample_spacing;
    const auto n_wp = 3 + rng.below(4);
    const double z = rng.uniform(alt_lo, alt_hi);
    for (std::size_t w = 0; w < n_wp; ++w)
      route.waypoints.push_back({rng.uniform(bounds.x0, bounds.x1), rng.uniform(bounds.y0, bounds.y1), z});
    routes.push_back(std::move(route));
  }
  return routes;
}

std::vector<Route> generate_routes(const Scene& scene, std::size_t n_routes, double alt_lo, double alt_hi,
                                   std::uint64_t seed, double sample_spacing) {
  return generate_routes(Bounds2D{0.0, 0.0, scene.extent_x, scene.extent_y}, n_routes, alt_lo, alt_hi, seed,
                         sample_spacing);
}

// ---------------------------------------------------------------------------
// Masks
// ---------------------------------------------------------------------------

Mask sample_mask(const GridSpec& grid, Vec3 tx_pos, const MaskParams& params, std::uint64_t seed) {
  params.validate();
  Mask m;
  m.grid = grid;
  m.bits.resize(grid.size());
  const std::uint64_t key = derive_seed(seed, "datasets.mask");
  for (std::size_t v = 0; v < grid.size(); ++v)
    m.bits[v] = hashed_uniform(key, v) < params.retention(distance(grid.center(v), tx_pos)) ? 1 : 0;
  return m;
}

GridSample apply_mask(const RadioMap& map, const Mask& mask, const NormWindow& norm) {
  if (!(map.grid == mask.grid)) throw ShapeError("apply_mask: mask grid differs from map grid");
  if (!(norm.lo < norm.hi)) throw ConfigError("normalization window requires lo < hi");
  GridSample s;
  s.grid = map.grid;
  s.value.assign(map.grid.size(), 0.0);
  s.mask.assign(map.grid.size(), 0.0);
  for (std::size_t v = 0; v < map.values.size(); ++v)
    if (mask.bits[v]) {
      s.value[v] = norm.normalize(map.values[v]);
      s.mask[v] = 1.0;
    }
  return s;
}

// ---------------------------------------------------------------------------
// Ground and aerial measurements
// ---------------------------------------------------------------------------

MeasurementSet synthesize_ground(const RadioMap& map, const Scene& scene, const Vec3& tx_pos,
                                 std::size_t n_samples, std::uint64_t seed, const GroundSamplingParams& params) {
  if (n_samples == 0) throw ConfigError("synthesize_ground: n_samples must be positive");
  params.bands.validate();
  const auto& g = map.grid;

  // Outdoor voxels of the lowest layer and their sampling weights.
  std::vector<std::size_t> voxels;
  std::vector<double> cumulative;
  double total = 0.0;
  for (std::size_t j = 0; j < g.ny(); ++j)
    for (std::size_t i = 0; i < g.nx(); ++i) {
      const Vec3 c = g.center(i, j, 0);
      if (scene.inside_building_footprint(c.x, c.y)) continue;
      const Vec3 p{c.x, c.y, scene.terrain.at(c.x, c.y) + params.altitude};
      total += params.bands.retention(distance(p, tx_pos));
      voxels.push_back(g.index(i, j, 0));
      cumulative.push_back(total);
    }
  if (n_samples > voxels.size())
    throw ConfigError("synthesize_ground: " + std::to_string(n_samples) + " samples requested but only " +
                      std::to_string(voxels.size()) + " outdoor voxels available");

  Rng rng(derive_seed(seed, "datasets.ground"));
  MeasurementSet out;
  out.domain = Domain::ground;
  out.samples.reserve(n_samples);
  for (std::size_t n = 0; n < n_samples; ++n) {
    const double u = rng.uniform() * total;
    const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
    const std::size_t v = voxels[std::min<std::size_t>(it - cumulative.begin(), voxels.size() - 1)];
    const Vec3 c = g.center(v);
    // Jitter inside the voxel footprint, staying outdoors.
    Vec3 p{c.x, c.y, 0.0};
    for (int attempt = 0; attempt < 8; ++attempt) {
      const double x = c.x + g.cell * (rng.uniform() - 0.5);
      const double y = c.y + g.cell * (rng.uniform() - 0.5);
      if (!scene.inside_building_footprint(x, y)) {
        p.x = x;
        p.y = y;
        break;
      }
    }
    p.z = scene.terrain.at(p.x, p.y) + params.altitude;
    const double noise = params.report_sigma > 0.0 ? params.report_sigma * rng.normal() : 0.0;
    out.samples.push_back({p, static_cast<double>(map.values[v]) + noise, map.cell_id, Domain::ground});
  }
  return out;
}

float lookup_nearest(const RadioMap& map, Vec3 p) {
  const auto& g = map.grid;
  auto axis = [&](double v, double o, std::size_t n) {
    const double f = std::floor((v - o) / g.cell);
    return static_cast<std::size_t>(std::clamp(f, 0.0, static_cast<double>(n - 1)));
  };
  return map.at(axis(p.x, g.origin.x, g.nx()), axis(p.y, g.origin.y, g.ny()), axis(p.z, g.origin.z, g.nz()));
}

MeasurementSet sample_route_measurements(const RadioMap& target_map, const std::vector<Route>& routes,
                                         double keep_prob, std::uint64_t seed, double max_ratio,
                                         std::size_t ground_count) {
  if (!(keep_prob > 0.0 && keep_prob <= 1.0)) throw ConfigError("keep_prob must lie in (0, 1]");
  Rng rng(derive_seed(seed, "datasets.route_keep"));
  MeasurementSet out;
  out.domain = Domain::aerial;
  for (const auto& route : routes)
    for (const auto& p : route.sample_points()) {
      if (keep_prob < 1.0 && !(rng.uniform() < keep_prob)) continue;
      out.samples.push_back({p, static_cast<double>(lookup_nearest(target_map, p)), target_map.cell_id,
                             Domain::aerial});
    }
  if (std::isfinite(max_ratio)) {
    const auto cap = static_cast<std::size_t>(std::floor(max_ratio * static_cast<double>(ground_count)));
    if (out.samples.size() > cap) {
      // Seeded partial shuffle of indices, then restore route order.
      Rng pick(derive_seed(seed, "datasets.route_cap"));
      std::vector<std::size_t> idx(out.samples.size());
      std::iota(idx.begin(), idx.end(), 0);
      for (std::size_t i = 0; i < cap; ++i) std::swap(idx[i], idx[i + pick.below(idx.size() - i)]);
      idx.resize(cap);
      std::sort(idx.begin(), idx.end());
      std::vector<Measurement> kept;
      kept.reserve(cap);
      for (auto i : idx) kept.push_back(out.samples[i]);
      out.samples = std::move(kept);
    }
  }
  return out;
}

GridSample rasterize(const MeasurementSet& ms, const GridSpec& grid, const NormWindow& norm) {
  if (!(norm.lo < norm.hi)) throw ConfigError("normalization window requires lo < hi");
  std::vector<double> sum(grid.size(), 0.0);
  std::vector<std::size_t> count(grid.size(), 0);
  for (std::size_t n = 0; n < ms.samples.size(); ++n) {
    const auto v = grid.locate(ms.samples[n].position);
    if (!v) throw FormatError("rasterize: measurement " + std::to_string(n) + " lies outside the grid");
    sum[*v] += ms.samples[n].rsrp_dbm;
    ++count[*v];
  }
  GridSample s;
  s.grid = grid;
  s.value.assign(grid.size(), 0.0);
  s.mask.assign(grid.size(), 0.0);
  for (std::size_t v = 0; v < grid.size(); ++v)
    if (count[v]) {
      s.value[v] = norm.normalize(sum[v] / static_cast<double>(count[v]));
      s.mask[v] = 1.0;
    }
  return s;
}

MeasurementSet restrict_to(const MeasurementSet& ms, const GridSpec& grid) {
  MeasurementSet out;
  out.domain = ms.domain;
  for (const auto& m : ms.samples)
    if (grid.contains(m.position)) out.samples.push_back(m);
  return out;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

namespace {

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  std::string s(buf);
  if (s == "-0.000" || s == "-0.00") s.erase(0, 1);
  return s;
}

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace

void write_measurements(const MeasurementSet& ms, std::ostream& os) {
  os << "x,y,z,cell_id,rsrp_dbm,domain\n";
  for (const auto& m : ms.samples)
    os << fixed(m.position.x, 3) << ',' << fixed(m.position.y, 3) << ',' << fixed(m.position.z, 3) << ','
       << m.cell_id << ',' << fixed(m.rsrp_dbm, 2) << ',' << domain_name(m.domain) << '\n';
}

MeasurementSet read_measurements(std::istream& is) {
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(is, line)) throw FormatError("measurement file is empty", 1);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "x,y,z,cell_id,rsrp_dbm,domain") throw FormatError("unexpected measurement header", 1);
  MeasurementSet ms;
  bool first = true;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 6)
      throw FormatError("expected 6 fields, got " + std::to_string(f.size()), line_no);
    Measurement m;
    m.position = {parse_double(f[0], "x", line_no), parse_double(f[1], "y", line_no),
                  parse_double(f[2], "z", line_no)};
    if (f[3].empty()) throw FormatError("field 'cell_id' is empty", line_no);
    m.cell_id = std::string(f[3]);
    m.rsrp_dbm = parse_double(f[4], "rsrp_dbm", line_no);
    if (f[5] == "ground")
      m.domain = Domain::ground;
    else if (f[5] == "aerial")
      m.domain = Domain::aerial;
    else
      throw FormatError("field 'domain' must be ground or aerial, got '" + std::string(f[5]) + "'", line_no);
    if (first) {
      ms.domain = m.domain;
      first = false;
    } else if (m.domain != ms.domain) {
      throw FormatError("mixed domains in one measurement set", line_no);
    }
    ms.samples.push_back(std::move(m));
  }
  return ms;
}

void save_measurements(const MeasurementSet& ms, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  write_measurements(ms, os);
  if (!os) throw Error("write failed: " + path.string());
}

MeasurementSet load_measurements(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifactError("cannot open measurement file " + path.string());
  auto ms = read_measurements(is);
  return ms;
}

MeasurementSet quantized(const MeasurementSet& ms) {
  std::stringstream ss;
  write_measurements(ms, ss);
  auto out = read_measurements(ss);
  out.domain = ms.domain;
  return out;
}

void write_routes(const std::vector<Route>& routes, std::ostream& os) {
  for (const auto& r : routes) {
    os << format_exact(r.sample_spacing);
    for (const auto& w : r.waypoints)
      os << ' ' << format_exact(w.x) << ' ' << format_exact(w.y) << ' ' << format_exact(w.z);
    os << '\n';
  }
}

std::vector<Route> read_routes(std::istream& is) {
  std::vector<Route> routes;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    std::istringstream ss(line);
    std::vector<std::string> tok;
    for (std::string t; ss >> t;) tok.push_back(t);
    if (tok.empty()) continue;
    if (tok.size() < 7 || (tok.size() - 1) % 3 != 0)
      throw FormatError("route record needs a spacing and at least two xyz waypoints", line_no);
    Route r;
    r.sample_spacing = parse_double(tok[0], "spacing", line_no);
    for (std::size_t i = 1; i < tok.size(); i += 3)
      r.waypoints.push_back({parse_double(tok[i], "x", line_no), parse_double(tok[i + 1], "y", line_no),
                             parse_double(tok[i + 2], "z", line_no)});
    routes.push_back(std::move(r));
  }
  return routes;
}

}  // namespace g2a
