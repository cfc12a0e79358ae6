#include "g2a/propsim.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <thread>

namespace g2a {

void PropagationParams::validate() const {
  if (!(pl_exponent_los >= 1.5)) throw ConfigError("prop.pl_exponent_los must be >= 1.5");
  if (!(pl_exponent_nlos >= pl_exponent_los))
    throw ConfigError("prop.pl_exponent_nlos must be >= prop.pl_exponent_los");
  if (!(wall_penetration >= 0.0)) throw ConfigError("prop.wall_penetration must be >= 0");
  if (max_counted_walls < 0) throw ConfigError("prop.max_counted_walls must be >= 0");
  if (!(shadowing_sigma >= 0.0)) throw ConfigError("prop.shadowing_sigma must be >= 0");
  if (!(shadowing_corr_len >= 0.0)) throw ConfigError("prop.shadowing_corr_len must be >= 0");
  if (!(rsrp_floor < -100.0)) throw ConfigError("prop.rsrp_floor must be below -100 dBm");
}

PropagationParams shifted_domain(const PropagationParams& source) {
  PropagationParams p = source;
  p.pl_exponent_nlos += 0.4;
  p.wall_penetration += 5.0;
  p.shadowing_sigma = 4.0;
  p.seed = derive_seed(source.seed, "prop.target_domain");
  return p;
}

GridSpec scene_grid(const Scene& scene, double cell, std::uint32_t levels) {
  if (!(cell > 0.0) || levels == 0) throw ConfigError("grid cell size and level count must be positive");
  GridSpec g;
  g.origin = {0.0, 0.0, 0.0};
  g.cell = cell;
  g.dims = {static_cast<std::uint32_t>(std::ceil(scene.extent_x / cell - 1e-9)),
            static_cast<std::uint32_t>(std::ceil(scene.extent_y / cell - 1e-9)), levels};
  return g;
}

RadioMap RadioMap::crop(std::array<std::uint32_t, 3> offset, std::array<std::uint32_t, 3> dims) const {
  for (int a = 0; a < 3; ++a)
    if (dims[a] == 0 || offset[a] + dims[a] > grid.dims[a]) throw ShapeError("radio map crop out of range");
  RadioMap out;
  out.cell_id = cell_id;
  out.grid = grid.sub(offset, dims);
  out.values.resize(out.grid.size());
  for (std::size_t k = 0; k < dims[2]; ++k)
    for (std::size_t j = 0; j < dims[1]; ++j)
      for (std::size_t i = 0; i < dims[0]; ++i)
        out.values[out.grid.index(i, j, k)] = at(i + offset[0], j + offset[1], k + offset[2]);
  return out;
}

// ---------------------------------------------------------------------------
// Occlusion
// ---------------------------------------------------------------------------

namespace {

/// Surface crossings of segment a + t (b - a), t in (0, 1), with one box.
int box_crossings(const double lo[3], const double hi[3], Vec3 a, Vec3 b) {
  const double pa[3] = {a.x, a.y, a.z};
  const double d[3] = {b.x - a.x, b.y - a.y, b.z - a.z};
  double t0 = -std::numeric_limits<double>::infinity();
  double t1 = std::numeric_limits<double>::infinity();
  for (int ax = 0; ax < 3; ++ax) {
    if (d[ax] == 0.0) {
      if (pa[ax] <= lo[ax] || pa[ax] >= hi[ax]) return 0;
      continue;
    }
    double ta = (lo[ax] - pa[ax]) / d[ax];
    double tb = (hi[ax] - pa[ax]) / d[ax];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (!(t0 < t1)) return 0;
  return (t0 > 0.0 && t0 < 1.0 ? 1 : 0) + (t1 > 0.0 && t1 < 1.0 ? 1 : 0);
}

}  // namespace

OcclusionIndex::OcclusionIndex(const Scene& scene, double bucket_size) : bucket_(bucket_size) {
  bx_ = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(scene.extent_x / bucket_)));
  by_ = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(scene.extent_y / bucket_)));
  buckets_.resize(bx_ * by_);
  auto clamp_x = [&](double v) {
    return static_cast<std::size_t>(std::clamp(std::floor(v / bucket_), 0.0, static_cast<double>(bx_ - 1)));
  };
  auto clamp_y = [&](double v) {
    return static_cast<std::size_t>(std::clamp(std::floor(v / bucket_), 0.0, static_cast<double>(by_ - 1)));
  };
  for (std::size_t n = 0; n < scene.buildings.size(); ++n) {
    const auto& b = scene.buildings[n];
    const double base = scene.building_base(b);
    boxes_.push_back({{b.x0, b.y0, base}, {b.x1, b.y1, base + b.height}});
    // Widen by one bucket-epsilon so segments grazing a bucket edge still see the box.
    const double eps = 1e-9 * bucket_;
    for (std::size_t j = clamp_y(b.y0 - eps); j <= clamp_y(b.y1 + eps); ++j)
      for (std::size_t i = clamp_x(b.x0 - eps); i <= clamp_x(b.x1 + eps); ++i)
        buckets_[j * bx_ + i].push_back(static_cast<std::uint32_t>(n));
  }
}

int OcclusionIndex::count_crossings(Vec3 a, Vec3 b, int cap) const {
  if (boxes_.empty() || cap <= 0) return 0;

  const double ax = a.x / bucket_, ay = a.y / bucket_;
  const double dx = (b.x - a.x) / bucket_, dy = (b.y - a.y) / bucket_;
  auto cell_of = [](double v, std::size_t n) {
    return static_cast<long>(std::clamp(std::floor(v), 0.0, static_cast<double>(n - 1)));
  };
  long ix = cell_of(ax, bx_), iy = cell_of(ay, by_);
  const long ix_end = cell_of(ax + dx, bx_), iy_end = cell_of(ay + dy, by_);
  const long step_x = dx > 0 ? 1 : (dx < 0 ? -1 : 0);
  const long step_y = dy > 0 ? 1 : (dy < 0 ? -1 : 0);
  constexpr double inf = std::numeric_limits<double>::infinity();
  double t_max_x = step_x ? ((static_cast<double>(ix) + (step_x > 0 ? 1.0 : 0.0)) - ax) / dx : inf;
  double t_max_y = step_y ? ((static_cast<double>(iy) + (step_y > 0 ? 1.0 : 0.0)) - ay) / dy : inf;
  const double t_delta_x = step_x ? 1.0 / std::abs(dx) : inf;
  const double t_delta_y = step_y ? 1.0 / std::abs(dy) : inf;

  std::vector<std::uint32_t> candidates;
  for (;;) {
    const auto& bucket = buckets_[static_cast<std::size_t>(iy) * bx_ + static_cast<std::size_t>(ix)];
    candidates.insert(candidates.end(), bucket.begin(), bucket.end());
    if (ix == ix_end && iy == iy_end) break;
    if (std::min(t_max_x, t_max_y) > 1.0) break;
    if (t_max_x < t_max_y) {
      ix += step_x;
      t_max_x += t_delta_x;
    } else {
      iy += step_y;
      t_max_y += t_delta_y;
    }
    if (ix < 0 || iy < 0 || ix >= static_cast<long>(bx_) || iy >= static_cast<long>(by_)) break;
  }
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

  int count = 0;
  for (auto id : candidates) {
    count += box_crossings(boxes_[id].lo, boxes_[id].hi, a, b);
    if (count >= cap) return cap;
  }
  return count;
}

int trace_occlusion(const Scene& scene, Vec3 a, Vec3 b, int cap) {
  return OcclusionIndex(scene).count_crossings(a, b, cap);
}

// ---------------------------------------------------------------------------
// Shadowing
// ---------------------------------------------------------------------------

std::vector<double> shadowing_field(const GridSpec& grid, const PropagationParams& params,
                                    const std::string& cell_id) {
  const std::uint64_t key = hash_combine(derive_seed(params.seed, "prop.shadowing"), fnv1a64(cell_id));
  const double sigma_vox = params.shadowing_corr_len / grid.cell;
  const long r = sigma_vox > 0.0 ? static_cast<long>(std::ceil(3.0 * sigma_vox)) : 0;

  std::vector<double> w(static_cast<std::size_t>(2 * r + 1), 1.0);
  if (r > 0) {
    double sum = 0.0;
    for (long t = -r; t <= r; ++t) sum += w[t + r] = std::exp(-0.5 * (t / sigma_vox) * (t / sigma_vox));
    for (auto& v : w) v /= sum;
  }
  double w2 = 0.0;
  for (double v : w) w2 += v * v;
  // Each pass scales the variance of white noise by sum(w^2).
  const double unit_scale = 1.0 / std::pow(w2, 1.5);

  // Noise is indexed by absolute lattice coordinates so overlapping grids agree.
  const long gx0 = std::lround(grid.origin.x / grid.cell) - r;
  const long gy0 = std::lround(grid.origin.y / grid.cell) - r;
  const long gz0 = std::lround(grid.origin.z / grid.cell) - r;
  const std::size_t px = grid.nx() + 2 * r, py = grid.ny() + 2 * r, pz = grid.nz() + 2 * r;
  constexpr long bias = 1L << 20;
  std::vector<double> buf(px * py * pz);
  for (std::size_t k = 0; k < pz; ++k)
    for (std::size_t j = 0; j < py; ++j)
      for (std::size_t i = 0; i < px; ++i) {
        const auto ci = static_cast<std::uint64_t>(gx0 + static_cast<long>(i) + bias);
        const auto cj = static_cast<std::uint64_t>(gy0 + static_cast<long>(j) + bias);
        const auto ck = static_cast<std::uint64_t>(gz0 + static_cast<long>(k) + bias);
        buf[(k * py + j) * px + i] = hashed_normal(key, ci | (cj << 21) | (ck << 42));
      }
  if (r == 0) {
    return buf;  // white noise, already unit variance
  }

  // Separable Gaussian passes, each shrinking one axis by 2r.
  std::vector<double> tx((px - 2 * r) * py * pz);
  const std::size_t qx = px - 2 * r;
  for (std::size_t k = 0; k < pz; ++k)
    for (std::size_t j = 0; j < py; ++j)
      for (std::size_t i = 0; i < qx; ++i) {
        double s = 0.0;
        for (long t = 0; t <= 2 * r; ++t) s += w[t] * buf[(k * py + j) * px + i + t];
        tx[(k * py + j) * qx + i] = s;
      }
  const std::size_t qy = py - 2 * r;
  std::vector<double> ty(qx * qy * pz);
  for (std::size_t k = 0; k < pz; ++k)
    for (std::size_t j = 0; j < qy; ++j)
      for (std::size_t i = 0; i < qx; ++i) {
        double s = 0.0;
        for (long t = 0; t <= 2 * r; ++t) s += w[t] * tx[(k * py + j + t) * qx + i];
        ty[(k * qy + j) * qx + i] = s;
      }
  std::vector<double> out(grid.size());
  for (std::size_t k = 0; k < grid.nz(); ++k)
    for (std::size_t j = 0; j < qy; ++j)
      for (std::size_t i = 0; i < qx; ++i) {
        double s = 0.0;
        for (long t = 0; t <= 2 * r; ++t) s += w[t] * ty[((k + t) * qy + j) * qx + i];
        out[grid.index(i, j, k)] = s * unit_scale;
      }
  return out;
}

// ---------------------------------------------------------------------------
// Radio maps
// ---------------------------------------------------------------------------

namespace {

RadioMap compute_with_index(const OcclusionIndex& index, const Transmitter& tx,
                            const PropagationParams& params, const GridSpec& grid) {
  RadioMap map;
  map.cell_id = tx.cell_id;
  map.grid = grid;
  map.values.resize(grid.size());
  std::vector<double> shadow;
  if (params.shadowing_sigma > 0.0) shadow = shadowing_field(grid, params, tx.cell_id);
  const double min_d = 0.5 * grid.cell;
  for (std::size_t v = 0; v < grid.size(); ++v) {
    const Vec3 c = grid.center(v);
    const double d = std::max(distance(c, tx.position), min_d);
    const int walls = index.count_crossings(tx.position, c, params.max_counted_walls);
    const double n = walls == 0 ? params.pl_exponent_los : params.pl_exponent_nlos;
    double rsrp = tx.tx_power_dbm - params.reference_loss - 10.0 * n * std::log10(d) -
                  params.wall_penetration * walls;
    if (!shadow.empty()) rsrp -= params.shadowing_sigma * shadow[v];
    map.values[v] = static_cast<float>(std::clamp(rsrp, params.rsrp_floor, tx.tx_power_dbm));
  }
  return map;
}

}  // namespace

RadioMap compute_radio_map(const Scene& scene, const Transmitter& tx, const PropagationParams& params,
                           const GridSpec& grid) {
  params.validate();
  if (grid.size() == 0) throw ConfigError("radio map grid is empty");
  return compute_with_index(OcclusionIndex(scene), tx, params, grid);
}

std::vector<RadioMap> compute_all(const Scene& scene, const PropagationParams& params, const GridSpec& grid,
                                  unsigned threads) {
  params.validate();
  const OcclusionIndex index(scene);
  std::vector<RadioMap> maps(scene.transmitters.size());
  const unsigned workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(maps.size())));
  if (workers <= 1) {
    for (std::size_t i = 0; i < maps.size(); ++i)
      maps[i] = compute_with_index(index, scene.transmitters[i], params, grid);
    return maps;
  }
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < maps.size(); i += workers)
        maps[i] = compute_with_index(index, scene.transmitters[i], params, grid);
    });
  for (auto& t : pool) t.join();
  return maps;
}

// ---------------------------------------------------------------------------
// RMAP I/O
// ---------------------------------------------------------------------------

void write_radio_map(const RadioMap& map, std::ostream& os) {
  if (map.cell_id.size() > kRadioMapMaxCellId)
    throw ConfigError("cell id '" + map.cell_id + "' exceeds " + std::to_string(kRadioMapMaxCellId) +
                      " bytes for the radio-map header");
  if (map.values.size() != map.grid.size()) throw ShapeError("radio map value count does not match dims");
  os.write("RMAP", 4);
  write_le<std::uint16_t>(os, 1);
  write_le<std::uint8_t>(os, static_cast<std::uint8_t>(map.cell_id.size()));
  char id[kRadioMapMaxCellId] = {};
  std::memcpy(id, map.cell_id.data(), map.cell_id.size());
  os.write(id, kRadioMapMaxCellId);
  write_le(os, map.grid.origin.x);
  write_le(os, map.grid.origin.y);
  write_le(os, map.grid.origin.z);
  for (auto d : map.grid.dims) write_le<std::uint32_t>(os, d);
  write_le(os, map.grid.cell);
  write_le<std::uint32_t>(os, 0);
  for (float v : map.values) write_le(os, v);
}

RadioMap read_radio_map(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string_view(magic, 4) != "RMAP") throw FormatError("radio map: bad magic");
  if (read_le<std::uint16_t>(is) != 1) throw FormatError("radio map: unsupported version");
  const auto len = read_le<std::uint8_t>(is);
  if (len > kRadioMapMaxCellId) throw FormatError("radio map: cell id length out of range");
  char id[kRadioMapMaxCellId];
  is.read(id, kRadioMapMaxCellId);
  if (!is) throw FormatError("radio map: truncated header");
  RadioMap map;
  map.cell_id.assign(id, len);
  map.grid.origin.x = read_le<double>(is);
  map.grid.origin.y = read_le<double>(is);
  map.grid.origin.z = read_le<double>(is);
  for (auto& d : map.grid.dims) d = read_le<std::uint32_t>(is);
  map.grid.cell = read_le<double>(is);
  read_le<std::uint32_t>(is);
  if (!(map.grid.cell > 0.0)) throw FormatError("radio map: non-positive cell size");
  map.values.resize(map.grid.size());
  for (auto& v : map.values) v = read_le<float>(is);
  return map;
}

void save_radio_map(const RadioMap& map, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  write_radio_map(map, os);
  if (!os) throw Error("write failed: " + path.string());
}

RadioMap load_radio_map(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifactError("cannot open radio map " + path.string());
  return read_radio_map(is);
}

}  // namespace g2a
