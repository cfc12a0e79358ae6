#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "g2a/pipeline.hpp"

namespace g2a {

void BenchmarkConfig::validate() const {
  source.validate();
  if (!(cell > 0.0)) throw ConfigError("scene.cell must be positive");
  if (levels == 0) throw ConfigError("scene.levels must be positive");
  for (int a = 0; a < 3; ++a)
    if (crop[a] == 0) throw ConfigError("scene.crop dimensions must be positive");
  if (crop[2] > levels) throw ConfigError("scene.crop_z exceeds scene.levels");
  if (pairs == 0) throw ConfigError("scene.pairs must be positive");
  if (!(max_pair_distance > 0.0)) throw ConfigError("scene.max_pair_distance must be positive");
  if (ground_per_cell == 0) throw ConfigError("eval.ground_per_cell must be positive");
  if (!(aerial_ratio > 0.0)) throw ConfigError("eval.aerial_ratio must be positive");
  if (!(route_spacing > 0.0)) throw ConfigError("eval.route_spacing must be positive");
  if (!(route_margin >= 0.0)) throw ConfigError("eval.route_margin must be non-negative");
  if (route_alt_hi > crop[2] * cell) throw ConfigError("eval.route_alt_hi lies above the crop");
  if (!(norm.lo < norm.hi)) throw ConfigError("eval.norm_lo must be below eval.norm_hi");
}

std::vector<std::pair<std::size_t, std::size_t>> select_pairs(const Scene& scene, double max_dist,
                                                              std::size_t count) {
  auto pairs = build_adjacency(scene, max_dist).pairs;
  auto sep = [&](const std::pair<std::size_t, std::size_t>& q) {
    return (scene.transmitters[q.first].position - scene.transmitters[q.second].position).horizontal_norm();
  };
  std::stable_sort(pairs.begin(), pairs.end(), [&](const auto& a, const auto& b) { return sep(a) < sep(b); });
  std::vector<bool> used(scene.transmitters.size(), false);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const auto& [i, j] : pairs) {
    if (out.size() == count) break;
    if (used[i] || used[j]) continue;
    used[i] = used[j] = true;
    out.emplace_back(i, j);
  }
  if (out.size() < count)
    throw ConfigError("only " + std::to_string(out.size()) + " disjoint transmitter pairs within " +
                      format_exact(max_dist) + " m; " + std::to_string(count) + " requested");
  return out;
}

GridSpec pair_crop(const GridSpec& full, Vec3 a, Vec3 b, std::array<std::uint32_t, 3> dims) {
  for (int k = 0; k < 3; ++k)
    if (dims[k] > full.dims[k]) throw ShapeError("crop larger than the scene lattice");
  const Vec3 mid = 0.5 * (a + b);
  auto start = [&](double v, double o, std::uint32_t n, std::uint32_t d) {
    const double c = std::round((v - o) / full.cell - 0.5 * d);
    return static_cast<std::uint32_t>(std::clamp(c, 0.0, static_cast<double>(n - d)));
  };
  return full.sub({start(mid.x, full.origin.x, full.dims[0], dims[0]),
                   start(mid.y, full.origin.y, full.dims[1], dims[1]), 0},
                  dims);
}

namespace {

GridSpec ground_layer(const GridSpec& full) {
  GridSpec g = full;
  g.dims[2] = 1;
  return g;
}

Bounds2D route_bounds(const GridSpec& g, double margin) {
  return {g.origin.x + margin, g.origin.y + margin, g.origin.x + g.nx() * g.cell - margin,
          g.origin.y + g.ny() * g.cell - margin};
}

std::uint64_t stream_seed(std::uint64_t seed, std::string_view tag, std::size_t tx) {
  return hash_combine(derive_seed(seed, tag), tx);
}

}  // namespace

MeasurementSet draw_ground(const Benchmark& b, const PairData& p, int stream, std::uint64_t seed) {
  const Transmitter& tx = b.scene.transmitters[p.tx(stream)];
  const RadioMap layer = compute_radio_map(b.scene, tx, b.target_params, ground_layer(b.full_grid));
  GroundSamplingParams gp;
  const MeasurementSet all =
      synthesize_ground(layer, b.scene, tx.position, b.cfg.ground_per_cell, stream_seed(seed, "ground", p.tx(stream)), gp);
  return quantized(all);
}

Scene benchmark_scene(const BenchmarkConfig& cfg) {
  cfg.validate();
  return generate_scene(derive_seed(cfg.seed, "bench.scene"), cfg.scene);
}

Benchmark build_benchmark(const BenchmarkConfig& cfg, unsigned threads) {
  return build_benchmark(cfg, benchmark_scene(cfg), threads);
}

Benchmark build_benchmark(const BenchmarkConfig& cfg, Scene scene, unsigned threads) {
  cfg.validate();
  Benchmark b;
  b.cfg = cfg;
  b.scene = std::move(scene);
  b.full_grid = scene_grid(b.scene, cfg.cell, cfg.levels);
  b.source_params = cfg.source;
  b.source_params.seed = derive_seed(cfg.seed, "bench.shadowing");
  b.target_params = shifted_domain(b.source_params);

  for (const auto& [i, j] : select_pairs(b.scene, cfg.max_pair_distance, cfg.pairs)) {
    PairData p;
    p.tx_i = i;
    p.tx_j = j;
    p.grid = pair_crop(b.full_grid, b.scene.transmitters[i].position, b.scene.transmitters[j].position, cfg.crop);
    b.pairs.push_back(std::move(p));
  }

  // Maps for every stream, spread over the worker threads via compute_all on
  // a scene holding just the paired transmitters of one crop.
  for (auto& p : b.pairs) {
    Scene sub = b.scene;
    sub.transmitters = {b.scene.transmitters[p.tx_i], b.scene.transmitters[p.tx_j]};
    auto src = compute_all(sub, b.source_params, p.grid, threads);
    auto tgt = compute_all(sub, b.target_params, p.grid, threads);
    p.source_i = std::move(src[0]);
    p.source_j = std::move(src[1]);
    p.target_i = std::move(tgt[0]);
    p.target_j = std::move(tgt[1]);
  }

  for (auto& p : b.pairs) {
    p.ground_i = draw_ground(b, p, 0, derive_seed(cfg.seed, "bench.ground"));
    p.ground_j = draw_ground(b, p, 1, derive_seed(cfg.seed, "bench.ground"));
    const Bounds2D bounds = route_bounds(p.grid, cfg.route_margin);
    p.train_routes = generate_routes(bounds, cfg.train_routes, cfg.route_alt_lo, cfg.route_alt_hi,
                                     stream_seed(cfg.seed, "bench.train_routes", p.tx_i), cfg.route_spacing);
    p.test_routes = generate_routes(bounds, cfg.test_routes, cfg.route_alt_lo, cfg.route_alt_hi,
                                    stream_seed(cfg.seed, "bench.test_routes", p.tx_i), cfg.route_spacing);
    p.aerial_i = quantized(sample_route_measurements(p.target_i, p.train_routes, 1.0,
                                                     stream_seed(cfg.seed, "bench.aerial", p.tx_i),
                                                     cfg.aerial_ratio, p.ground_i.size()));
    p.aerial_j = quantized(sample_route_measurements(p.target_j, p.train_routes, 1.0,
                                                     stream_seed(cfg.seed, "bench.aerial", p.tx_j),
                                                     cfg.aerial_ratio, p.ground_j.size()));
  }
  return b;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

namespace {

template <typename F>
void write_file(const std::filesystem::path& path, F&& body) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  body(os);
  if (!os) throw Error("write failed: " + path.string());
}

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifactError("missing " + path.string());
  return is;
}

std::string map_name(const std::string& kind, const std::string& cell) { return "maps/" + kind + "_" + cell + ".rmap"; }

}  // namespace

void save_benchmark(const Benchmark& b, const std::filesystem::path& dir, unsigned parts) {
  if (parts & part_scene) {
    std::filesystem::create_directories(dir);
    save_scene(b.scene, dir / "scene.txt");
  }
  if (parts & part_maps) {
    std::filesystem::create_directories(dir / "maps");
    write_file(dir / "pairs.txt", [&](std::ostream& os) {
      os << "# tx_i tx_j crop_i0 crop_j0 crop_k0 nx ny nz\n";
      for (const auto& p : b.pairs) {
        const auto& g = p.grid;
        os << p.tx_i << ' ' << p.tx_j << ' ' << format_exact((g.origin.x - b.full_grid.origin.x) / g.cell) << ' '
           << format_exact((g.origin.y - b.full_grid.origin.y) / g.cell) << ' '
           << format_exact((g.origin.z - b.full_grid.origin.z) / g.cell) << ' ' << g.dims[0] << ' ' << g.dims[1]
           << ' ' << g.dims[2] << '\n';
      }
    });
  }
  if (parts & part_data) std::filesystem::create_directories(dir / "data");
  for (std::size_t k = 0; k < b.pairs.size(); ++k) {
    const auto& p = b.pairs[k];
    for (int s = 0; s < 2; ++s) {
      const std::string& cell = b.scene.transmitters[p.tx(s)].cell_id;
      if (parts & part_maps) {
        save_radio_map(p.source(s), dir / map_name("source", cell));
        save_radio_map(p.target(s), dir / map_name("target", cell));
      }
      if (parts & part_data) {
        save_measurements(p.ground(s), dir / ("data/ground_" + cell + ".csv"));
        save_measurements(p.aerial(s), dir / ("data/aerial_" + cell + ".csv"));
      }
    }
    if (!(parts & part_data)) continue;
    write_file(dir / ("data/routes_train_p" + std::to_string(k) + ".txt"),
               [&](std::ostream& os) { write_routes(p.train_routes, os); });
    write_file(dir / ("data/routes_test_p" + std::to_string(k) + ".txt"),
               [&](std::ostream& os) { write_routes(p.test_routes, os); });
  }
}

Benchmark load_benchmark(const BenchmarkConfig& cfg, const std::filesystem::path& dir) {
  cfg.validate();
  Benchmark b;
  b.cfg = cfg;
  b.scene = ingest_scene(dir / "scene.txt");
  b.full_grid = scene_grid(b.scene, cfg.cell, cfg.levels);
  b.source_params = cfg.source;
  b.source_params.seed = derive_seed(cfg.seed, "bench.shadowing");
  b.target_params = shifted_domain(b.source_params);

  auto is = open_input(dir / "pairs.txt");
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::vector<std::string> tok;
    for (std::string t; ss >> t;) tok.push_back(t);
    if (tok.size() != 8) throw FormatError("pair record needs 8 fields", line_no);
    PairData p;
    p.tx_i = static_cast<std::size_t>(parse_double(tok[0], "tx_i", line_no));
    p.tx_j = static_cast<std::size_t>(parse_double(tok[1], "tx_j", line_no));
    if (p.tx_i >= b.scene.transmitters.size() || p.tx_j >= b.scene.transmitters.size())
      throw FormatError("pair references a transmitter missing from the scene", line_no);
    std::array<std::uint32_t, 3> off{}, dims{};
    for (int a = 0; a < 3; ++a) {
      off[a] = static_cast<std::uint32_t>(parse_double(tok[2 + a], "crop offset", line_no));
      dims[a] = static_cast<std::uint32_t>(parse_double(tok[5 + a], "crop dims", line_no));
    }
    p.grid = b.full_grid.sub(off, dims);
    b.pairs.push_back(std::move(p));
  }
  for (std::size_t k = 0; k < b.pairs.size(); ++k) {
    auto& p = b.pairs[k];
    auto load_ms = [&](const std::string& name) {
      auto in = open_input(dir / name);
      try {
        return read_measurements(in);
      } catch (const FormatError& e) {
        throw FormatError(name + ": " + e.what());
      }
    };
    auto load_map = [&](const std::string& name) {
      RadioMap m = load_radio_map(dir / name);
      if (!(m.grid == p.grid)) throw FormatError(name + ": grid differs from the pair table");
      return m;
    };
    const std::string& ci = b.scene.transmitters[p.tx_i].cell_id;
    const std::string& cj = b.scene.transmitters[p.tx_j].cell_id;
    p.source_i = load_map(map_name("source", ci));
    p.source_j = load_map(map_name("source", cj));
    p.target_i = load_map(map_name("target", ci));
    p.target_j = load_map(map_name("target", cj));
    p.ground_i = load_ms("data/ground_" + ci + ".csv");
    p.ground_j = load_ms("data/ground_" + cj + ".csv");
    p.aerial_i = load_ms("data/aerial_" + ci + ".csv");
    p.aerial_j = load_ms("data/aerial_" + cj + ".csv");
    for (auto* ms : {&p.aerial_i, &p.aerial_j})
      if (ms->empty()) ms->domain = Domain::aerial;
    auto routes = [&](const std::string& name) {
      auto in = open_input(dir / name);
      return read_routes(in);
    };
    p.train_routes = routes("data/routes_train_p" + std::to_string(k) + ".txt");
    p.test_routes = routes("data/routes_test_p" + std::to_string(k) + ".txt");
  }
  if (b.pairs.empty()) throw FormatError("pair table is empty");
  return b;
}

}  // namespace g2a
