#include <doctest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "g2a/datasets.hpp"

using namespace g2a;

namespace {

Scene open_scene(double extent = 1000.0) {
  Scene s;
  s.extent_x = s.extent_y = extent;
  s.terrain = Terrain::flat(extent, extent, extent / 2);
  s.transmitters.push_back({"c1", {500.0, 500.0, 25.0}});
  return s;
}

GridSpec flat_grid(std::uint32_t n, std::uint32_t nz = 4) {
  GridSpec g;
  g.dims = {n, n, nz};
  g.cell = 10.0;
  return g;
}

RadioMap ramp_map(const GridSpec& g, const std::string& id = "c1") {
  RadioMap m;
  m.cell_id = id;
  m.grid = g;
  for (std::size_t v = 0; v < g.size(); ++v) m.values.push_back(static_cast<float>(-130.0 + 0.01 * v));
  return m;
}

}  // namespace

TEST_CASE("mask parameters") {
  MaskParams p;
  CHECK_NOTHROW(p.validate());
  CHECK(p.retention(150.0) == 0.8);
  CHECK(p.retention(150.1) == 0.2);
  CHECK(p.retention(400.0) == 0.2);
  CHECK(p.retention(400.1) == 0.1);
  MaskParams bad = p;
  bad.p_mid = 0.9;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = p;
  bad.r2 = 100.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("mask retention per band matches its probability") {
  const GridSpec g = flat_grid(100, 4);
  const Vec3 tx{500.0, 500.0, 25.0};
  const MaskParams p;
  const Mask m = sample_mask(g, tx, p, 21);
  CHECK(m.bits == sample_mask(g, tx, p, 21).bits);
  std::size_t kept[3] = {0, 0, 0}, total[3] = {0, 0, 0};
  for (std::size_t v = 0; v < g.size(); ++v) {
    const int b = p.band(distance(g.center(v), tx));
    ++total[b];
    kept[b] += m.bits[v];
  }
  const double prob[3] = {p.p_near, p.p_mid, p.p_far};
  for (int b = 0; b < 3; ++b) {
    REQUIRE(total[b] > 1000);
    const double n = static_cast<double>(total[b]);
    const double sd = std::sqrt(n * prob[b] * (1 - prob[b]));
    CHECK(std::abs(static_cast<double>(kept[b]) - n * prob[b]) < 4.0 * sd);
  }
}

TEST_CASE("mask count is binomial over seeds") {
  // 200 voxels all inside the near band: count ~ Binomial(200, 0.8).
  GridSpec g = flat_grid(10, 2);
  const Vec3 tx{50.0, 50.0, 10.0};
  const MaskParams p;
  double mean = 0.0, sq = 0.0;
  const int trials = 1000;
  for (int s = 0; s < trials; ++s) {
    const double c = static_cast<double>(sample_mask(g, tx, p, s).count());
    mean += c;
    sq += c * c;
  }
  mean /= trials;
  const double var = sq / trials - mean * mean;
  CHECK(std::abs(mean - 160.0) < 4.0 * std::sqrt(32.0 / trials));
  CHECK(var == doctest::Approx(32.0).epsilon(0.2));
}

TEST_CASE("apply_mask keeps normalized values only where observed") {
  const GridSpec g = flat_grid(8, 2);
  const RadioMap map = ramp_map(g);
  const Mask m = sample_mask(g, {40, 40, 5}, MaskParams{}, 3);
  const NormWindow norm;
  const GridSample s = apply_mask(map, m, norm);
  CHECK(s.observed() == m.count());
  for (std::size_t v = 0; v < g.size(); ++v) {
    if (m.bits[v]) {
      CHECK(s.value[v] == doctest::Approx((map.values[v] + 140.0) / 100.0));
      CHECK(s.mask[v] == 1.0);
    } else {
      CHECK(s.value[v] == 0.0);
      CHECK(s.mask[v] == 0.0);
    }
  }
  Mask other = m;
  other.grid.cell = 5.0;
  CHECK_THROWS_AS(apply_mask(map, other, norm), ShapeError);
  CHECK(norm.normalize(-200.0) == 0.0);
  CHECK(norm.normalize(0.0) == 1.0);
}

TEST_CASE("ground samples follow the band weights") {
  const Scene s = open_scene();
  const GridSpec g = flat_grid(100, 2);
  const RadioMap map = ramp_map(g);
  const Vec3 tx = s.transmitters[0].position;
  GroundSamplingParams gp;
  gp.report_sigma = 0.0;

  // Oracle: expected share of each band is its summed weight over the total.
  double w[3] = {0, 0, 0};
  for (std::size_t j = 0; j < g.ny(); ++j)
    for (std::size_t i = 0; i < g.nx(); ++i) {
      const Vec3 c = g.center(i, j, 0);
      const double d = distance({c.x, c.y, gp.altitude}, tx);
      w[gp.bands.band(d)] += gp.bands.retention(d);
    }
  const double wt = w[0] + w[1] + w[2];

  const std::size_t n = 8000;
  const MeasurementSet ms = synthesize_ground(map, s, tx, n, 5, gp);
  REQUIRE(ms.size() == n);
  CHECK_NOTHROW(ms.validate());
  std::size_t hits[3] = {0, 0, 0};
  for (const auto& m : ms.samples) {
    CHECK(m.position.z == doctest::Approx(1.5));
    const auto v = g.locate(m.position);
    REQUIRE(v);
    const Vec3 c = g.center(*v);
    ++hits[gp.bands.band(distance({c.x, c.y, gp.altitude}, tx))];
    CHECK(m.rsrp_dbm == doctest::Approx(map.values[*v]));
  }
  for (int b = 0; b < 3; ++b) {
    const double p = w[b] / wt;
    const double sd = std::sqrt(n * p * (1 - p));
    CHECK(std::abs(static_cast<double>(hits[b]) - n * p) < 4.0 * sd);
    CHECK(std::abs(static_cast<double>(hits[b]) / n - p) < 0.03);
  }
}

TEST_CASE("ground samples avoid building footprints") {
  Scene s = open_scene(200.0);
  s.transmitters[0].position = {100, 100, 25};
  s.buildings.push_back({40, 40, 160, 160, 20});
  const GridSpec g = flat_grid(20, 2);
  const MeasurementSet ms = synthesize_ground(ramp_map(g), s, {100, 100, 25}, 250, 1);
  for (const auto& m : ms.samples) CHECK_FALSE(s.inside_building_footprint(m.position.x, m.position.y));
  CHECK_THROWS_AS(synthesize_ground(ramp_map(g), s, {100, 100, 25}, 100000, 1), ConfigError);
  CHECK_THROWS_AS(synthesize_ground(ramp_map(g), s, {100, 100, 25}, 0, 1), ConfigError);
}

TEST_CASE("routes") {
  const Bounds2D b{0, 0, 500, 400};
  const auto routes = generate_routes(b, 30, 60, 150, 9);
  REQUIRE(routes.size() == 30);
  CHECK(routes == generate_routes(b, 30, 60, 150, 9));
  for (const auto& r : routes) {
    CHECK(r.waypoints.size() >= 3);
    CHECK(r.waypoints.size() <= 6);
    for (const auto& p : r.sample_points()) {
      CHECK(p.x >= 0.0);
      CHECK(p.x <= 500.0);
      CHECK(p.y <= 400.0);
      CHECK(p.z >= 60.0);
      CHECK(p.z <= 150.0);
    }
  }
  CHECK_THROWS_AS(generate_routes(b, 1, 40, 150, 9), ConfigError);
  CHECK_THROWS_AS(generate_routes(b, 1, 60, 250, 9), ConfigError);

  Route r;
  r.waypoints = {{0, 0, 100}, {30, 0, 100}, {30, 25, 100}};
  r.sample_spacing = 10.0;
  CHECK(r.length() == 55.0);
  CHECK(r.sample_arc_lengths() == std::vector<double>{0, 10, 20, 30, 40, 50});
  const auto pts = r.sample_points();
  REQUIRE(pts.size() == 6);
  CHECK(pts[3] == Vec3{30, 0, 100});
  CHECK(pts[4] == Vec3{30, 10, 100});
  CHECK(pts[5] == Vec3{30, 20, 100});

  std::stringstream ss;
  write_routes(routes, ss);
  const auto back = read_routes(ss);
  REQUIRE(back.size() == routes.size());
  for (std::size_t i = 0; i < back.size(); ++i)
    for (std::size_t w = 0; w < back[i].waypoints.size(); ++w)
      CHECK(distance(back[i].waypoints[w], routes[i].waypoints[w]) < 1e-6);
}

TEST_CASE("route measurements and the aerial cap") {
  GridSpec g = flat_grid(50, 20);
  const RadioMap map = ramp_map(g);
  const auto routes = generate_routes(Bounds2D{0, 0, 500, 500}, 5, 60, 150, 2);
  std::size_t total_points = 0;
  for (const auto& r : routes) total_points += r.sample_points().size();

  const auto all = sample_route_measurements(map, routes, 1.0, 3, std::numeric_limits<double>::infinity());
  CHECK(all.size() == total_points);
  CHECK(all.domain == Domain::aerial);
  for (const auto& m : all.samples) CHECK(m.rsrp_dbm == lookup_nearest(map, m.position));

  const auto capped = sample_route_measurements(map, routes, 1.0, 3, 1e-3, 20000);
  CHECK(capped.size() == 20);
  // The kept samples are a subsequence of the uncapped set.
  std::size_t k = 0;
  for (const auto& m : all.samples)
    if (k < capped.size() && m == capped.samples[k]) ++k;
  CHECK(k == capped.size());

  const auto thinned = sample_route_measurements(map, routes, 0.5, 3, std::numeric_limits<double>::infinity());
  CHECK(std::abs(static_cast<double>(thinned.size()) - 0.5 * total_points) <
        4.0 * std::sqrt(0.25 * total_points));
  CHECK_THROWS_AS(sample_route_measurements(map, routes, 0.0, 3), ConfigError);
}

TEST_CASE("rasterize averages per voxel") {
  const GridSpec g = flat_grid(4, 2);
  MeasurementSet ms;
  ms.samples.push_back({{1, 1, 1}, -100.0, "c1"});
  ms.samples.push_back({{9, 9, 9}, -80.0, "c1"});
  ms.samples.push_back({{35, 15, 12}, -60.0, "c1"});
  const NormWindow norm;
  const GridSample s = rasterize(ms, g, norm);
  CHECK(s.observed() == 2);
  CHECK(s.value[0] == doctest::Approx(0.5));
  CHECK(s.value[g.index(3, 1, 1)] == doctest::Approx(0.8));
  ms.samples.push_back({{45, 1, 1}, -60.0, "c1"});
  CHECK_THROWS_WITH_AS(rasterize(ms, g, norm), doctest::Contains("measurement 3"), FormatError);
  CHECK(restrict_to(ms, g).size() == 3);
}

TEST_CASE("measurement CSV round trip and errors") {
  const Scene s = open_scene();
  const MeasurementSet ms = synthesize_ground(ramp_map(flat_grid(100, 2)), s, {500, 500, 25}, 200, 4);
  std::stringstream ss;
  write_measurements(ms, ss);
  const std::string text = ss.str();
  CHECK(text.rfind("x,y,z,cell_id,rsrp_dbm,domain\n", 0) == 0);
  std::istringstream in(text);
  const MeasurementSet back = read_measurements(in);
  CHECK(back == quantized(ms));
  std::ostringstream again;
  write_measurements(back, again);
  CHECK(again.str() == text);

  auto parse = [](const std::string& t) {
    std::istringstream is(t);
    return read_measurements(is);
  };
  const std::string header = "x,y,z,cell_id,rsrp_dbm,domain\n";
  CHECK_THROWS_AS(parse(""), FormatError);
  CHECK_THROWS_AS(parse("x,y,z\n"), FormatError);
  try {
    parse(header + "1,2,1.5,c1,-80,ground\n1,2,1.5,c1,-80\n");
    FAIL("expected a parse error");
  } catch (const FormatError& e) {
    CHECK(e.line() == 3);
  }
  CHECK_THROWS_WITH_AS(parse(header + "1,2,1.5,c1,abc,ground\n"), doctest::Contains("rsrp_dbm"), FormatError);
  CHECK_THROWS_WITH_AS(parse(header + "1,2,1.5,c1,-80,space\n"), doctest::Contains("domain"), FormatError);
  CHECK_THROWS_AS(parse(header + "1,2,1.5,c1,-80,ground\n1,2,100,c1,-80,aerial\n"), FormatError);
  CHECK_THROWS_AS(load_measurements("/nonexistent/m.csv"), MissingArtifactError);
}
