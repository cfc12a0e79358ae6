#include "g2a/geoscene.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace g2a {

double Terrain::at(double x, double y) const {
  const double fx = std::clamp(x / spacing, 0.0, static_cast<double>(nx - 1));
  const double fy = std::clamp(y / spacing, 0.0, static_cast<double>(ny - 1));
  const auto i0 = std::min(static_cast<std::size_t>(fx), nx - 2);
  const auto j0 = std::min(static_cast<std::size_t>(fy), ny - 2);
  const double tx = fx - static_cast<double>(i0);
  const double ty = fy - static_cast<double>(j0);
  auto e = [&](std::size_t i, std::size_t j) { return elevation[j * nx + i]; };
  return (1 - tx) * (1 - ty) * e(i0, j0) + tx * (1 - ty) * e(i0 + 1, j0) +
         (1 - tx) * ty * e(i0, j0 + 1) + tx * ty * e(i0 + 1, j0 + 1);
}

Terrain Terrain::flat(double extent_x, double extent_y, double spacing) {
  Terrain t;
  t.spacing = spacing;
  t.nx = static_cast<std::size_t>(std::ceil(extent_x / spacing)) + 1;
  t.ny = static_cast<std::size_t>(std::ceil(extent_y / spacing)) + 1;
  t.elevation.assign(t.nx * t.ny, 0.0);
  return t;
}

bool Scene::inside_building_footprint(double x, double y) const {
  return std::any_of(buildings.begin(), buildings.end(), [&](const Building& b) {
    return x >= b.x0 && x <= b.x1 && y >= b.y0 && y <= b.y1;
  });
}

void Scene::validate() const {
  if (!(extent_x > 0.0) || !(extent_y > 0.0)) throw ConfigError("scene extent must be positive");
  if (terrain.nx < 2 || terrain.ny < 2 || !(terrain.spacing > 0.0))
    throw ConfigError("terrain grid needs at least 2x2 samples and positive spacing");
  if (terrain.elevation.size() != terrain.nx * terrain.ny)
    throw ConfigError("terrain elevation count does not match its grid");
  for (double e : terrain.elevation)
    if (!std::isfinite(e)) throw ConfigError("terrain elevation not finite");
  for (std::size_t i = 0; i < buildings.size(); ++i) {
    const auto& b = buildings[i];
    const std::string tag = "building " + std::to_string(i);
    if (!(b.x0 < b.x1) || !(b.y0 < b.y1)) throw ConfigError(tag + ": degenerate footprint");
    if (!(b.height >= 0.0)) throw ConfigError(tag + ": negative height");
    if (b.x0 < 0.0 || b.y0 < 0.0 || b.x1 > extent_x || b.y1 > extent_y)
      throw ConfigError(tag + ": footprint outside scene extent");
  }
  if (transmitters.empty()) throw ConfigError("at least one transmitter required");
  for (std::size_t i = 0; i < transmitters.size(); ++i) {
    const auto& t = transmitters[i];
    const std::string tag = "transmitter " + std::to_string(i);
    if (t.cell_id.empty() || t.cell_id.find_first_of(" \t\r\n,") != std::string::npos)
      throw ConfigError(tag + ": cell id must be a non-empty token");
    const auto& p = t.position;
    if (p.x < 0.0 || p.y < 0.0 || p.x > extent_x || p.y > extent_y)
      throw ConfigError(tag + ": position outside scene extent");
    if (p.z < terrain.at(p.x, p.y)) throw ConfigError(tag + ": below terrain");
    if (t.tx_power_dbm < 0.0 || t.tx_power_dbm > 60.0)
      throw ConfigError(tag + ": tx_power outside [0, 60] dBm");
    if (!(t.frequency_ghz > 0.4 && t.frequency_ghz < 6.0))
      throw ConfigError(tag + ": frequency outside (0.4, 6.0) GHz");
  }
}

// ---------------------------------------------------------------------------

namespace {

bool footprints_clash(const Building& a, const Building& b, double gap) {
  return a.x0 < b.x1 + gap && b.x0 < a.x1 + gap && a.y0 < b.y1 + gap && b.y0 < a.y1 + gap;
}

bool near_footprint(const Building& b, double x, double y, double clearance) {
  return x > b.x0 - clearance && x < b.x1 + clearance && y > b.y0 - clearance &&
         y < b.y1 + clearance;
}

}  // namespace

Scene generate_scene(std::uint64_t seed, const SceneConfig& cfg) {
  if (cfg.extent_x < 100.0 || cfg.extent_y < 100.0)
    throw ConfigError("scene extent must be at least 100 m per axis");
  if (cfg.transmitter_count == 0) throw ConfigError("at least one transmitter required");
  if (!(cfg.building_min_side > 0.0) || cfg.building_max_side < cfg.building_min_side)
    throw ConfigError("building side range invalid");
  if (cfg.building_min_height < 0.0 || cfg.building_max_height < cfg.building_min_height)
    throw ConfigError("building height range invalid");
  if (cfg.mast_min_height < 0.0 || cfg.mast_max_height < cfg.mast_min_height)
    throw ConfigError("mast height range invalid");

  Scene scene;
  scene.extent_x = cfg.extent_x;
  scene.extent_y = cfg.extent_y;
  scene.terrain = Terrain::flat(cfg.extent_x, cfg.extent_y, cfg.terrain_spacing);
  if (cfg.relief_amplitude != 0.0) {
    Rng phase_rng(derive_seed(seed, "scene.relief"));
    const double px = phase_rng.uniform(0.0, 2.0 * M_PI);
    const double py = phase_rng.uniform(0.0, 2.0 * M_PI);
    const double k = 2.0 * M_PI / cfg.relief_wavelength;
    auto& t = scene.terrain;
    for (std::size_t j = 0; j < t.ny; ++j)
      for (std::size_t i = 0; i < t.nx; ++i) {
        const double x = static_cast<double>(i) * t.spacing;
        const double y = static_cast<double>(j) * t.spacing;
        t.elevation[j * t.nx + i] =
            cfg.relief_amplitude * (1.0 + 0.5 * (std::sin(k * x + px) + std::sin(k * y + py)));
      }
  }

  // Masts first so buildings can keep clear of them.
  Rng tx_rng(derive_seed(seed, "scene.transmitters"));
  const double margin = std::min(50.0, 0.1 * std::min(cfg.extent_x, cfg.extent_y));
  for (std::size_t i = 0; i < cfg.transmitter_count; ++i) {
    Transmitter tx;
    char id[16];
    std::snprintf(id, sizeof(id), "cell%02zu", i);
    tx.cell_id = id;
    const double x = tx_rng.uniform(margin, cfg.extent_x - margin);
    const double y = tx_rng.uniform(margin, cfg.extent_y - margin);
    const double mast = tx_rng.uniform(cfg.mast_min_height, cfg.mast_max_height);
    tx.position = {x, y, scene.terrain.at(x, y) + mast};
    tx.tx_power_dbm = cfg.tx_power_dbm;
    tx.frequency_ghz = cfg.frequency_ghz;
    scene.transmitters.push_back(std::move(tx));
  }

  Rng b_rng(derive_seed(seed, "scene.buildings"));
  std::size_t attempts = 0;
  while (scene.buildings.size() < cfg.building_count) {
    if (++attempts > cfg.retry_budget)
      throw ConfigError("could not place " + std::to_string(cfg.building_count) +
                        " buildings within the retry budget (placed " +
                        std::to_string(scene.buildings.size()) + ")");
    const double w = b_rng.uniform(cfg.building_min_side, cfg.building_max_side);
    const double d = b_rng.uniform(cfg.building_min_side, cfg.building_max_side);
    Building b;
    b.x0 = b_rng.uniform(0.0, cfg.extent_x - w);
    b.y0 = b_rng.uniform(0.0, cfg.extent_y - d);
    b.x1 = b.x0 + w;
    b.y1 = b.y0 + d;
    b.height = b_rng.uniform(cfg.building_min_height, cfg.building_max_height);
    const bool clash = std::any_of(scene.buildings.begin(), scene.buildings.end(),
                                   [&](const Building& o) { return footprints_clash(b, o, cfg.street_gap); });
    const bool blocks_mast =
        std::any_of(scene.transmitters.begin(), scene.transmitters.end(), [&](const Transmitter& t) {
          return near_footprint(b, t.position.x, t.position.y, cfg.tx_clearance);
        });
    if (clash || blocks_mast) continue;
    scene.buildings.push_back(b);
  }
  scene.validate();
  return scene;
}

// ---------------------------------------------------------------------------
// Scene text format
//
//   g2a-scene 1
//   extent <x> <y>
//   terrain <nx> <ny> <spacing>
//   <nx elevations>            (ny rows)
//   buildings <count>
//   <x0> <y0> <x1> <y1> <height>
//   transmitters <count>
//   <cell_id> <x> <y> <z> <tx_power_dbm> <frequency_ghz>
// ---------------------------------------------------------------------------

void write_scene(const Scene& scene, std::ostream& os) {
  auto f = [](double v) { return format_exact(v); };
  os << "g2a-scene 1\n";
  os << "extent " << f(scene.extent_x) << ' ' << f(scene.extent_y) << '\n';
  const auto& t = scene.terrain;
  os << "terrain " << t.nx << ' ' << t.ny << ' ' << f(t.spacing) << '\n';
  for (std::size_t j = 0; j < t.ny; ++j) {
    for (std::size_t i = 0; i < t.nx; ++i) os << (i ? " " : "") << f(t.elevation[j * t.nx + i]);
    os << '\n';
  }
  os << "buildings " << scene.buildings.size() << '\n';
  for (const auto& b : scene.buildings)
    os << f(b.x0) << ' ' << f(b.y0) << ' ' << f(b.x1) << ' ' << f(b.y1) << ' ' << f(b.height) << '\n';
  os << "transmitters " << scene.transmitters.size() << '\n';
  for (const auto& tx : scene.transmitters)
    os << tx.cell_id << ' ' << f(tx.position.x) << ' ' << f(tx.position.y) << ' ' << f(tx.position.z)
       << ' ' << f(tx.tx_power_dbm) << ' ' << f(tx.frequency_ghz) << '\n';
}

void save_scene(const Scene& scene, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  write_scene(scene, os);
  if (!os) throw Error("write failed: " + path.string());
}

namespace {

class LineReader {
 public:
  explicit LineReader(std::istream& is) : is_(is) {}

  /// Next non-empty line split on whitespace; throws at EOF naming `expect`.
  std::vector<std::string> next(std::string_view expect) {
    std::string line;
    while (std::getline(is_, line)) {
      ++line_no_;
      std::istringstream ss(line);
      std::vector<std::string> tokens;
      for (std::string tok; ss >> tok;) tokens.push_back(tok);
      if (!tokens.empty()) return tokens;
    }
    throw FormatError("unexpected end of file, expected " + std::string(expect), line_no_ + 1);
  }

  bool at_end() {
    std::string rest;
    while (std::getline(is_, rest)) {
      ++line_no_;
      if (rest.find_first_not_of(" \t\r") != std::string::npos) return false;
    }
    return true;
  }

  std::size_t line() const { return line_no_; }

 private:
  std::istream& is_;
  std::size_t line_no_ = 0;
};

void expect_arity(const std::vector<std::string>& tok, std::size_t n, std::string_view what,
                  std::size_t line) {
  if (tok.size() != n)
    throw FormatError(std::string(what) + ": expected " + std::to_string(n) + " fields, got " +
                          std::to_string(tok.size()),
                      line);
}

std::size_t parse_count(const std::string& token, std::string_view field, std::size_t line) {
  const auto v = parse_int(token, field, line);
  if (v < 0) throw FormatError("field '" + std::string(field) + "' must be non-negative", line);
  return static_cast<std::size_t>(v);
}

}  // namespace

Scene parse_scene(std::istream& is) {
  LineReader in(is);
  Scene scene;

  auto tok = in.next("header");
  if (tok.size() != 2 || tok[0] != "g2a-scene" || tok[1] != "1")
    throw FormatError("header: expected 'g2a-scene 1'", in.line());

  tok = in.next("extent");
  if (tok.empty() || tok[0] != "extent") throw FormatError("expected 'extent' record", in.line());
  expect_arity(tok, 3, "extent", in.line());
  scene.extent_x = parse_double(tok[1], "extent_x", in.line());
  scene.extent_y = parse_double(tok[2], "extent_y", in.line());

  tok = in.next("terrain");
  if (tok.empty() || tok[0] != "terrain") throw FormatError("expected 'terrain' record", in.line());
  expect_arity(tok, 4, "terrain", in.line());
  auto& t = scene.terrain;
  t.nx = parse_count(tok[1], "terrain.nx", in.line());
  t.ny = parse_count(tok[2], "terrain.ny", in.line());
  t.spacing = parse_double(tok[3], "terrain.spacing", in.line());
  if (t.nx < 2 || t.ny < 2) throw FormatError("terrain grid needs at least 2x2 samples", in.line());
  t.elevation.assign(t.nx * t.ny, 0.0);
  for (std::size_t j = 0; j < t.ny; ++j) {
    tok = in.next("terrain row");
    expect_arity(tok, t.nx, "terrain row " + std::to_string(j), in.line());
    for (std::size_t i = 0; i < t.nx; ++i)
      t.elevation[j * t.nx + i] = parse_double(tok[i], "elevation", in.line());
  }

  tok = in.next("buildings");
  if (tok.empty() || tok[0] != "buildings") throw FormatError("expected 'buildings' record", in.line());
  expect_arity(tok, 2, "buildings", in.line());
  const auto nb = parse_count(tok[1], "buildings.count", in.line());
  for (std::size_t k = 0; k < nb; ++k) {
    tok = in.next("building record");
    const std::string tag = "building " + std::to_string(k);
    expect_arity(tok, 5, tag, in.line());
    Building b{parse_double(tok[0], tag + ".x0", in.line()), parse_double(tok[1], tag + ".y0", in.line()),
               parse_double(tok[2], tag + ".x1", in.line()), parse_double(tok[3], tag + ".y1", in.line()),
               parse_double(tok[4], tag + ".height", in.line())};
    if (!(b.x0 < b.x1) || !(b.y0 < b.y1))
      throw FormatError(tag + ": footprint requires x0 < x1 and y0 < y1", in.line());
    if (b.height < 0.0) throw FormatError(tag + ": negative height", in.line());
    if (b.x0 < 0.0 || b.y0 < 0.0 || b.x1 > scene.extent_x || b.y1 > scene.extent_y)
      throw FormatError(tag + ": footprint outside scene extent", in.line());
    scene.buildings.push_back(b);
  }

  std::vector<std::string> tx_header;
  try {
    tx_header = in.next("transmitters");
  } catch (const FormatError&) {
    throw FormatError("missing transmitters block: at least one transmitter required", in.line());
  }
  if (tx_header[0] != "transmitters") throw FormatError("expected 'transmitters' record", in.line());
  expect_arity(tx_header, 2, "transmitters", in.line());
  const auto nt = parse_count(tx_header[1], "transmitters.count", in.line());
  if (nt == 0) throw FormatError("at least one transmitter required", in.line());
  for (std::size_t k = 0; k < nt; ++k) {
    tok = in.next("transmitter record");
    const std::string tag = "transmitter " + std::to_string(k);
    expect_arity(tok, 6, tag, in.line());
    Transmitter tx;
    tx.cell_id = tok[0];
    tx.position = {parse_double(tok[1], tag + ".x", in.line()), parse_double(tok[2], tag + ".y", in.line()),
                   parse_double(tok[3], tag + ".z", in.line())};
    tx.tx_power_dbm = parse_double(tok[4], tag + ".tx_power", in.line());
    tx.frequency_ghz = parse_double(tok[5], tag + ".frequency", in.line());
    scene.transmitters.push_back(std::move(tx));
  }
  if (!in.at_end()) throw FormatError("trailing content after transmitters block", in.line());

  try {
    scene.validate();
  } catch (const ConfigError& e) {
    throw FormatError(e.what());
  }
  return scene;
}

Scene ingest_scene(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifactError("cannot open scene file " + path.string());
  return parse_scene(is);
}

AdjacencySet build_adjacency(const Scene& scene, double max_dist) {
  if (!(max_dist > 0.0)) throw ConfigError("adjacency max_dist must be positive");
  AdjacencySet out;
  const auto& txs = scene.transmitters;
  std::vector<bool> paired(txs.size(), false);
  for (std::size_t i = 0; i < txs.size(); ++i)
    for (std::size_t j = i + 1; j < txs.size(); ++j)
      if ((txs[i].position - txs[j].position).horizontal_norm() <= max_dist) {
        out.pairs.emplace_back(i, j);
        paired[i] = paired[j] = true;
      }
  for (std::size_t i = 0; i < txs.size(); ++i)
    if (!paired[i]) out.unpaired.push_back(i);
  return out;
}

}  // namespace g2a
