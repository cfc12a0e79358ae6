#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "g2a/neural/optim.hpp"
#include "g2a/pipeline.hpp"

using namespace g2a;

namespace {

BenchmarkConfig small_config(std::uint64_t seed = 3) {
  BenchmarkConfig c;
  c.crop = {16, 16, 8};
  c.levels = 8;
  c.pairs = 2;
  c.ground_per_cell = 3000;
  c.aerial_ratio = 5e-3;
  c.train_routes = 2;
  c.test_routes = 2;
  c.route_alt_lo = 60.0;
  c.route_alt_hi = 75.0;
  c.route_margin = 10.0;
  c.seed = seed;
  return c;
}

const Benchmark& small_bench() {
  static const Benchmark b = build_benchmark(small_config());
  return b;
}

TrainConfig small_train() {
  TrainConfig t;
  t.arch.depth = 2;
  t.arch.base_channels = 4;
  t.arch.disc_hidden = 8;
  t.pretrain_epochs = 2;
  t.adda_epochs = 2;
  t.disc_warmup_epochs = 1;
  t.finetune_epochs = 2;
  t.seed = 11;
  return t;
}

nn::DualTxModel small_model(std::uint64_t seed) { return nn::DualTxModel::create(small_train().arch, NormWindow{}, seed); }

double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

double mean_sq(const nn::Tensor& y, std::size_t n, const std::vector<double>& t) {
  double s = 0.0;
  const double* p = y.sample(n);
  for (std::size_t v = 0; v < t.size(); ++v) s += (p[v] - t[v]) * (p[v] - t[v]);
  return s / static_cast<double>(t.size());
}

std::vector<double> normalized(const RadioMap& m) {
  std::vector<double> v;
  for (float x : m.values) v.push_back(NormWindow{}.normalize(x));
  return v;
}

std::uint64_t sum_of(std::vector<nn::Param*> ps) { return nn::checksum(std::move(ps)); }

}  // namespace

TEST_CASE("train config validation names the key") {
  TrainConfig t;
  t.finetune_lr = 0.0;
  try {
    t.validate();
    FAIL("accepted");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("train.finetune_lr") != std::string::npos);
  }
  t = TrainConfig{};
  t.beta2 = 1.0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("pair selection is greedy, disjoint and closest first") {
  const Benchmark& b = small_bench();
  REQUIRE(b.pairs.size() == 2);
  CHECK(b.pairs[0].tx_i != b.pairs[1].tx_i);
  CHECK(b.pairs[0].tx_j != b.pairs[1].tx_j);
  auto sep = [&](const PairData& p) { return (b.tx_position(p, 0) - b.tx_position(p, 1)).horizontal_norm(); };
  CHECK(sep(b.pairs[0]) <= sep(b.pairs[1]));
  CHECK_THROWS_AS(select_pairs(b.scene, 1.0, 1), ConfigError);
}

TEST_CASE("pair crops stay inside the lattice") {
  GridSpec full;
  full.dims = {100, 100, 20};
  full.cell = 10.0;
  const GridSpec g = pair_crop(full, {5, 5, 25}, {40, 20, 25}, {48, 48, 16});
  CHECK(g.origin.x == 0.0);
  CHECK(g.origin.y == 0.0);
  const GridSpec h = pair_crop(full, {500, 500, 25}, {600, 500, 25}, {48, 48, 16});
  CHECK(h.origin.x == doctest::Approx(310.0));
  CHECK(h.dims == std::array<std::uint32_t, 3>{48, 48, 16});
  CHECK_THROWS_AS(pair_crop(full, {0, 0, 0}, {1, 1, 1}, {200, 48, 16}), ShapeError);
}

TEST_CASE("benchmark contents") {
  const Benchmark& b = small_bench();
  for (const auto& p : b.pairs) {
    CHECK(p.ground_i.size() == 3000);
    CHECK(p.aerial_i.size() <= 15);
    CHECK(p.aerial_i.domain == Domain::aerial);
    for (const auto& m : p.aerial_j.samples) CHECK(p.grid.contains(m.position));
    for (const auto& r : p.test_routes)
      for (const auto& w : r.waypoints) CHECK(p.grid.contains(w));
    // Target maps come from the shifted simulator.
    CHECK(p.target_i.values != p.source_i.values);
  }
  CHECK(b.target_params.pl_exponent_nlos == doctest::Approx(shifted_domain(b.source_params).pl_exponent_nlos));
}

TEST_CASE("benchmark is independent of the thread count") {
  const Benchmark a = build_benchmark(small_config(), 1);
  const Benchmark c = build_benchmark(small_config(), 3);
  for (std::size_t k = 0; k < a.pairs.size(); ++k) {
    CHECK(a.pairs[k].source_i.values == c.pairs[k].source_i.values);
    CHECK(a.pairs[k].target_j.values == c.pairs[k].target_j.values);
    CHECK(a.pairs[k].ground_i.samples == c.pairs[k].ground_i.samples);
  }
}

TEST_CASE("benchmark save and load round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "g2a_bench_rt";
  const auto dir2 = std::filesystem::temp_directory_path() / "g2a_bench_rt2";
  std::filesystem::remove_all(dir);
  std::filesystem::remove_all(dir2);
  const Benchmark& b = small_bench();
  save_benchmark(b, dir);
  const Benchmark l = load_benchmark(b.cfg, dir);
  REQUIRE(l.pairs.size() == b.pairs.size());
  for (std::size_t k = 0; k < b.pairs.size(); ++k) {
    CHECK(l.pairs[k].grid == b.pairs[k].grid);
    CHECK(l.pairs[k].target_i.values == b.pairs[k].target_i.values);
    CHECK(l.pairs[k].ground_j.samples == b.pairs[k].ground_j.samples);
    CHECK(l.pairs[k].aerial_i.samples == b.pairs[k].aerial_i.samples);
    CHECK(l.pairs[k].test_routes == b.pairs[k].test_routes);
  }
  save_benchmark(l, dir2);
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel_path = std::filesystem::relative(e.path(), dir);
    std::ifstream x(e.path(), std::ios::binary), y(dir2 / rel_path, std::ios::binary);
    std::stringstream sx, sy;
    sx << x.rdbuf();
    sy << y.rdbuf();
    CHECK_MESSAGE(sx.str() == sy.str(), rel_path.string());
  }
  std::filesystem::remove_all(dir);
  std::filesystem::remove_all(dir2);
}

TEST_CASE("pretrain loss matches an independent recomputation") {
  const Benchmark& b = small_bench();
  const PairData& p = b.pairs[0];
  const auto fi = normalized(p.source_i), fj = normalized(p.source_j);
  for (std::uint64_t s = 0; s < 10; ++s) {
    nn::DualTxModel m = small_model(100 + s);
    const GridSample xi = masked_source_input(b, p, 0, MaskParams{}, s, 0);
    const GridSample xj = masked_source_input(b, p, 1, MaskParams{}, s, 0);
    for (bool dual : {true, false}) {
      const auto yi = nn::decode(m.decoder(0), nn::encode(m.source_encoder, nn::to_tensor(xi)));
      const auto yj = nn::decode(m.decoder(dual ? 1 : 0), nn::encode(m.source_encoder, nn::to_tensor(xj)));
      const double oracle = mean_sq(yi, 0, fi) + mean_sq(yj, 0, fj);
      CHECK(rel(pretrain_pair_loss(m, xi, xj, fi, fj, dual, false), oracle) < 1e-10);
    }
  }
}

TEST_CASE("pretrain loss analytic values") {
  const Benchmark& b = small_bench();
  const PairData& p = b.pairs[0];
  nn::DualTxModel m = small_model(7);
  const GridSample xi = masked_source_input(b, p, 0, MaskParams{}, 1, 0);
  const GridSample xj = masked_source_input(b, p, 1, MaskParams{}, 1, 0);
  const auto yi = nn::decode(m.decoder_i, nn::encode(m.source_encoder, nn::to_tensor(xi)));
  const auto yj = nn::decode(m.decoder_j, nn::encode(m.source_encoder, nn::to_tensor(xj)));
  std::vector<double> ti(yi.values().begin(), yi.values().end()), tj(yj.values().begin(), yj.values().end());
  CHECK(pretrain_pair_loss(m, xi, xj, ti, tj, true, false) == 0.0);
  for (double& v : ti) v -= 1.0;
  for (double& v : tj) v += 1.0;
  CHECK(pretrain_pair_loss(m, xi, xj, ti, tj, true, false) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("adversarial losses match independent recomputation") {
  const Benchmark& b = small_bench();
  const PairData& p = b.pairs[1];
  for (std::uint64_t s = 0; s < 10; ++s) {
    nn::DualTxModel m = small_model(200 + s);
    const GridSample si = masked_source_input(b, p, 0, MaskParams{}, s, 1);
    const GridSample sj = masked_source_input(b, p, 1, MaskParams{}, s, 1);
    const auto xs = nn::to_tensor({&si, &sj});
    const GridSample gi = ground_input(b, p, 0), gj = ground_input(b, p, 1);
    const auto xt = nn::to_tensor({&gi, &gj});
    const auto zs = nn::encode(m.source_encoder, xs).z, zt = nn::encode(m.target_encoder, xt).z;
    const auto ps = nn::discriminate(m.discriminator, zs), pt = nn::discriminate(m.discriminator, zt);
    double ld = 0.0, le = 0.0;
    for (double q : ps) ld -= std::log(q) / ps.size();
    for (double q : pt) {
      ld -= std::log(1.0 - q) / pt.size();
      le -= std::log(q) / pt.size();
    }
    CHECK(rel(discriminator_loss(m, zs, zt, false), ld) < 1e-10);
    CHECK(rel(encoder_adversarial_loss(m, xt, false), le) < 1e-10);
  }
}

TEST_CASE("adversarial analytic values") {
  nn::DualTxModel m = small_model(3);
  auto& fc2 = m.discriminator.fc2;
  std::fill(fc2.weight.value.begin(), fc2.weight.value.end(), 0.0);
  std::fill(fc2.bias.value.begin(), fc2.bias.value.end(), 0.0);
  nn::Tensor z({2, m.arch.bottleneck_channels(), 2, 2, 2}, 0.3);
  CHECK(std::abs(discriminator_loss(m, z, z, false) - 2.0 * std::log(2.0)) < 1e-12);
  // A confident discriminator saying "source" makes the encoder objective vanish.
  fc2.bias.value[0] = 800.0;
  GridSpec g;
  g.dims = {8, 8, 4};
  const GridSample x = rasterize(MeasurementSet{}, g, NormWindow{});
  CHECK(encoder_adversarial_loss(m, nn::to_tensor(x), false) == 0.0);
}

TEST_CASE("finetune loss matches an independent summation over aerial samples") {
  const Benchmark& b = small_bench();
  const PairData& p = b.pairs[0];
  const auto ti = aerial_targets(p.aerial_i, p.grid, b.norm()), tj = aerial_targets(p.aerial_j, p.grid, b.norm());
  REQUIRE_FALSE(ti.empty());
  for (std::uint64_t s = 0; s < 10; ++s) {
    nn::DualTxModel m = small_model(300 + s);
    const auto ci = nn::encode(m.target_encoder, nn::to_tensor(ground_input(b, p, 0)));
    const auto cj = nn::encode(m.target_encoder, nn::to_tensor(ground_input(b, p, 1)));
    const auto yi = nn::decode(m.decoder_i, ci), yj = nn::decode(m.decoder_j, cj);
    double oi = 0.0, oj = 0.0;
    for (std::size_t n = 0; n < p.aerial_i.size(); ++n) {
      const double d = yi[*p.grid.locate(p.aerial_i.samples[n].position)] -
                       b.norm().normalize(p.aerial_i.samples[n].rsrp_dbm);
      oi += d * d / p.aerial_i.size();
    }
    for (std::size_t n = 0; n < p.aerial_j.size(); ++n) {
      const double d = yj[*p.grid.locate(p.aerial_j.samples[n].position)] -
                       b.norm().normalize(p.aerial_j.samples[n].rsrp_dbm);
      oj += d * d / p.aerial_j.size();
    }
    CHECK(rel(finetune_pair_loss(m, ci, cj, ti, tj, true, false), oi + oj) < 1e-10);
  }
}

TEST_CASE("finetune loss analytic values") {
  const Benchmark& b = small_bench();
  const PairData& p = b.pairs[0];
  nn::DualTxModel m = small_model(9);
  const auto c = nn::encode(m.target_encoder, nn::to_tensor(ground_input(b, p, 0)));
  const auto y = nn::decode(m.decoder_i, c);
  VoxelTargets exact{{5, 77}, {y[5], y[77]}};
  CHECK(finetune_pair_loss(m, c, c, exact, {}, true, false) == 0.0);
  VoxelTargets off{{40}, {y[40] - 2.0 / (b.norm().hi - b.norm().lo)}};
  CHECK(finetune_pair_loss(m, c, c, off, {}, true, false) == doctest::Approx(std::pow(2.0 / 100.0, 2)).epsilon(1e-9));
}

TEST_CASE("one discriminator step at a small learning rate lowers its loss") {
  const Benchmark& b = small_bench();
  const PairData& p = b.pairs[0];
  nn::DualTxModel m = small_model(21);
  const GridSample si = masked_source_input(b, p, 0, MaskParams{}, 2, 0), sj = masked_source_input(b, p, 1, MaskParams{}, 2, 0);
  const GridSample gi = ground_input(b, p, 0), gj = ground_input(b, p, 1);
  const auto zs = nn::encode(m.source_encoder, nn::to_tensor({&si, &sj})).z;
  const auto zt = nn::encode(m.target_encoder, nn::to_tensor({&gi, &gj})).z;
  nn::AdamConfig ac;
  ac.lr = 1e-5;
  nn::Adam opt(m.discriminator.params(), ac);
  opt.zero_grad();
  const double before = discriminator_loss(m, zs, zt, true);
  opt.step();
  CHECK(discriminator_loss(m, zs, zt, false) < before);
}

TEST_CASE("stages leave the blocks they do not own untouched") {
  const Benchmark& b = small_bench();
  const TrainConfig t = small_train();
  nn::DualTxModel m = nn::DualTxModel::create(t.arch, b.norm(), 5);
  auto snapshot = [&] {
    return std::array<std::uint64_t, 5>{sum_of(m.source_encoder.params()), sum_of(m.target_encoder.params()),
                                        sum_of(m.decoder_i.params()), sum_of(m.decoder_j.params()),
                                        sum_of(m.discriminator.params())};
  };
  auto s0 = snapshot();
  pretrain(m, b, t);
  auto s1 = snapshot();
  CHECK(s1[0] != s0[0]);
  CHECK(s1[1] == s0[1]);
  CHECK(s1[2] != s0[2]);
  CHECK(s1[3] != s0[3]);
  CHECK(s1[4] == s0[4]);
  adapt(m, b, t);
  auto s2 = snapshot();
  CHECK(s2[0] == s1[0]);
  CHECK(s2[1] != s1[1]);
  CHECK(s2[2] == s1[2]);
  CHECK(s2[3] == s1[3]);
  CHECK(s2[4] != s1[4]);
  finetune(m, b, t);
  auto s3 = snapshot();
  CHECK(s3[0] == s2[0]);
  CHECK(s3[1] == s2[1]);
  CHECK(s3[2] != s2[2]);
  CHECK(s3[3] != s2[3]);
  CHECK(s3[4] == s2[4]);

  TrainConfig single = t;
  single.dual_cell = false;
  const auto dj = sum_of(m.decoder_j.params());
  finetune(m, b, single);
  CHECK(sum_of(m.decoder_j.params()) == dj);
}

TEST_CASE("stage reports have one entry per epoch") {
  const Benchmark& b = small_bench();
  TrainConfig t = small_train();
  t.adda_epochs = 3;
  const PipelineResult r = run_pipeline(b, t);
  REQUIRE(r.reports.size() == 3);
  CHECK(r.reports[0].losses.size() == t.pretrain_epochs);
  CHECK(r.reports[1].losses.size() == 3);
  CHECK(r.reports[1].aux.at("disc_accuracy").size() == 3);
  CHECK(r.reports[1].aux.at("encoder_loss").size() == 3);
  CHECK(r.reports[1].scalars.count("heldout_acc_before") == 1);
  CHECK(r.reports[2].losses.size() == t.finetune_epochs);
  for (const auto& rep : r.reports)
    for (double l : rep.losses) CHECK(std::isfinite(l));
}

TEST_CASE("pipeline runs are reproducible byte for byte") {
  const Benchmark& b = small_bench();
  const TrainConfig t = small_train();
  auto run = [&] {
    const PipelineResult r = run_pipeline(b, t);
    std::ostringstream rep, ck;
    write_reports(r.reports, rep);
    nn::write_checkpoint(r.model, ck);
    return std::pair{rep.str(), ck.str()};
  };
  const auto a = run(), c = run();
  CHECK(a.first == c.first);
  CHECK(a.second == c.second);
  CHECK(a.first.find("stage adapt") != std::string::npos);
}

TEST_CASE("any toggle combination runs") {
  const Benchmark& b = small_bench();
  TrainConfig t = small_train();
  t.pretrain_epochs = t.adda_epochs = t.finetune_epochs = 1;
  for (int mask = 0; mask < 16; ++mask) {
    t.pretrain = mask & 1;
    t.adda = mask & 2;
    t.finetune = mask & 4;
    t.dual_cell = mask & 8;
    PipelineResult r = run_pipeline(b, t);
    CHECK(r.reports.size() == static_cast<std::size_t>(t.pretrain + t.adda + t.finetune));
    const auto src = r.model.source_encoder.params(), tgt = r.model.target_encoder.params();
    if (!t.adda)
      for (std::size_t i = 0; i < src.size(); ++i) CHECK(src[i]->value == tgt[i]->value);
  }
}

TEST_CASE("route prediction") {
  const Benchmark& b = small_bench();
  const PairData& p = b.pairs[0];
  nn::DualTxModel m = small_model(4);
  const GridSample g = ground_input(b, p, 0);
  const Route& r = p.test_routes[0];
  const auto prof = predict_route(m, g, r, 0);
  CHECK(prof.size() == r.sample_points().size());
  const RadioMap full = predict_map(m, g, 0, "c");
  const auto pts = r.sample_points();
  for (std::size_t k = 0; k < pts.size(); ++k) CHECK(prof[k] == lookup_nearest(full, pts[k]));

  auto& head = m.decoder_i.head;
  std::fill(head.weight.value.begin(), head.weight.value.end(), 0.0);
  head.bias.value[0] = 0.25;
  for (double v : predict_route(m, g, r, 0)) CHECK(v == doctest::Approx(b.norm().denormalize(0.25)).epsilon(1e-6));

  Route bad = r;
  bad.waypoints.push_back({-50.0, -50.0, 40.0});
  try {
    predict_route(m, g, bad, 0);
    FAIL("accepted");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find(std::to_string(bad.waypoints.size() - 1)) != std::string::npos);
  }
}

TEST_CASE("finetune warns and skips streams without aerial samples") {
  Benchmark b = small_bench();
  b.pairs[0].aerial_j.samples.clear();
  TrainConfig t = small_train();
  nn::DualTxModel m = nn::DualTxModel::create(t.arch, b.norm(), 2);
  const StageReport r = finetune(m, b, t);
  REQUIRE(r.warnings.size() == 1);
  CHECK(r.warnings[0].find("pair 0 stream 1") != std::string::npos);
}

TEST_CASE("stage report text format") {
  StageReport r;
  r.stage = "adapt";
  r.checksum = 42;
  r.losses = {1.5, 0.25};
  r.aux["disc_accuracy"] = {0.5, 0.75};
  r.scalars["heldout_acc_before"] = 0.875;
  r.wall_seconds = 123.0;
  std::ostringstream os;
  r.write(os);
  CHECK(os.str() ==
        "stage adapt\nchecksum 42\nscalar heldout_acc_before 0.875\nepoch loss disc_accuracy\n1 1.5 0.5\n2 0.25 0.75\n");
}
