#include "g2a/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

namespace g2a {

double route_rmse(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size())
    throw ShapeError("route_rmse: " + std::to_string(pred.size()) + " predictions for " +
                     std::to_string(truth.size()) + " truth values");
  if (pred.empty()) throw ShapeError("route_rmse: empty profile");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - truth[i]) * (pred[i] - truth[i]);
  return std::sqrt(s / static_cast<double>(pred.size()));
}

Aggregate aggregate(std::span<const double> v) {
  if (v.empty()) throw ConfigError("aggregate: no routes");
  Aggregate a;
  a.best = *std::min_element(v.begin(), v.end());
  a.worst = *std::max_element(v.begin(), v.end());
  // Sorted summation so the mean does not depend on route order.
  std::vector<double> sorted(v.begin(), v.end());
  std::sort(sorted.begin(), sorted.end());
  a.mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) / static_cast<double>(v.size());
  a.mean = std::clamp(a.mean, a.best, a.worst);
  return a;
}

double improvement_pct(double ours, double baseline) {
  if (!(baseline > 0.0)) throw ConfigError("improvement_pct: baseline mean must be positive");
  return 100.0 * (baseline - ours) / baseline;
}

RouteReport RouteReport::make(std::string method, std::vector<double> per_route) {
  RouteReport r;
  r.method = std::move(method);
  r.agg = aggregate(per_route);
  r.per_route = std::move(per_route);
  return r;
}

void EvalConfig::validate() const {
  if (kriging_neighbors < 3) throw ConfigError("eval.kriging_neighbors must be at least 3");
  if (variogram_bins < 5) throw ConfigError("eval.variogram_bins must be at least 5");
  if (variogram_max_points < 30) throw ConfigError("eval.variogram_max_points must be at least 30");
  if (gp_max_points == 0) throw ConfigError("eval.gp_max_points must be positive");
  if (!(gp_noise_ratio > 0.0)) throw ConfigError("eval.gp_noise_ratio must be positive");
}

std::vector<double> truth_profile(const PairData& p, int stream, const Route& route) {
  return profile_from_map(p.target(stream), route);
}

RouteReport evaluate_routes(const std::string& method, const Benchmark& bench, const StreamPredictor& predict) {
  std::vector<double> rmse;
  for (std::size_t k = 0; k < bench.pairs.size(); ++k) {
    const PairData& p = bench.pairs[k];
    for (int s = 0; s < 2; ++s) {
      const auto profiles = predict(k, s);
      if (profiles.size() != p.test_routes.size()) throw ShapeError(method + ": one profile per test route expected");
      for (std::size_t r = 0; r < p.test_routes.size(); ++r)
        rmse.push_back(route_rmse(profiles[r], truth_profile(p, s, p.test_routes[r])));
    }
  }
  return RouteReport::make(method, std::move(rmse));
}

RouteReport evaluate_model(const std::string& method, const nn::DualTxModel& model, const Benchmark& bench,
                           bool dual_cell) {
  return evaluate_routes(method, bench, [&](std::size_t k, int s) {
    const PairData& p = bench.pairs[k];
    const RadioMap map = predict_map(model, ground_input(bench, p, s), decoder_for(s, dual_cell), "");
    std::vector<std::vector<double>> out;
    for (const auto& r : p.test_routes) out.push_back(profile_from_map(map, r));
    return out;
  });
}

Observations stream_observations(const PairData& p, int stream) {
  return Observations::merge(p.aerial(stream), restrict_to(p.ground(stream), p.grid));
}

namespace {

// Flattens every test route's sample points, then splits predictions back.
std::vector<std::vector<double>> per_route(const PairData& p,
                                           const std::function<std::vector<double>(const std::vector<Vec3>&)>& f) {
  std::vector<Vec3> pts;
  std::vector<std::size_t> counts;
  for (const auto& r : p.test_routes) {
    const auto q = r.sample_points();
    pts.insert(pts.end(), q.begin(), q.end());
    counts.push_back(q.size());
  }
  const auto values = f(pts);
  std::vector<std::vector<double>> out;
  std::size_t at = 0;
  for (auto c : counts) {
    out.emplace_back(values.begin() + static_cast<std::ptrdiff_t>(at), values.begin() + static_cast<std::ptrdiff_t>(at + c));
    at += c;
  }
  return out;
}

}  // namespace

RouteReport evaluate_kriging(const Benchmark& bench, const EvalConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  return evaluate_routes("kriging", bench, [&](std::size_t k, int s) {
    const PairData& p = bench.pairs[k];
    const Observations obs = stream_observations(p, s);
    VariogramFitOptions vo;
    vo.n_bins = cfg.variogram_bins;
    vo.max_points = cfg.variogram_max_points;
    vo.seed = hash_combine(derive_seed(seed, "kriging"), p.tx(s));
    const VariogramModel vg = fit_variogram(obs, vo);
    return per_route(p, [&](const std::vector<Vec3>& q) { return kriging_predict(obs, vg, q, cfg.kriging_neighbors).values; });
  });
}

RouteReport evaluate_gp(const Benchmark& bench, const EvalConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  return evaluate_routes("gp", bench, [&](std::size_t k, int s) {
    const PairData& p = bench.pairs[k];
    const Observations obs = stream_observations(p, s);
    GpOptions go;
    go.max_points = cfg.gp_max_points;
    go.noise_ratio = cfg.gp_noise_ratio;
    go.seed = hash_combine(derive_seed(seed, "gp"), p.tx(s));
    const GpModel m = gp_condition(obs, gp_fit(obs, go), go);
    return per_route(p, [&](const std::vector<Vec3>& q) { return gp_predict(m, q); });
  });
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

std::vector<AblationRow> standard_rows(const TrainConfig& base) {
  struct Switches {
    const char* label;
    bool pretrain, adda, finetune, dual;
  };
  static constexpr Switches kRows[] = {
      {"full", true, true, true, true},          {"no_adda", true, false, true, true},
      {"no_finetune", true, true, false, true},  {"single_cell", true, true, true, false},
      {"no_pretrain", false, false, true, true}, {"pretrain_only", true, false, false, true},
  };
  std::vector<AblationRow> rows;
  for (const auto& s : kRows) {
    AblationRow r;
    r.label = s.label;
    r.cfg = base;
    r.cfg.pretrain = s.pretrain;
    r.cfg.adda = s.adda;
    r.cfg.finetune = s.finetune;
    r.cfg.dual_cell = s.dual;
    rows.push_back(std::move(r));
  }
  return rows;
}

namespace {

TrainConfig without_toggles(TrainConfig c) {
  c.pretrain = c.adda = c.finetune = c.dual_cell = true;
  return c;
}

struct Snapshot {
  nn::DualTxModel model;
  std::vector<StageReport> stages;
};

}  // namespace

void ablation_suite(const Benchmark& bench, std::vector<AblationRow>& rows) {
  if (rows.empty()) throw ConfigError("ablation needs at least one row");
  for (const auto& r : rows) {
    r.cfg.validate();
    if (!(without_toggles(r.cfg) == without_toggles(rows[0].cfg)))
      throw ConfigError("ablation row " + r.label + " differs from row " + rows[0].label + " beyond its toggles");
  }
  // Keys name the stage prefix; dual_cell matters only to stages that train decoders.
  std::map<std::string, Snapshot> cache;
  const TrainConfig& c0 = rows[0].cfg;
  cache.emplace("", Snapshot{nn::DualTxModel::create(c0.arch, bench.norm(), derive_seed(c0.seed, "model")), {}});
  for (auto& row : rows) {
    const TrainConfig& c = row.cfg;
    const std::string dual = c.dual_cell ? "D" : "S";
    const std::string k1 = c.pretrain ? "P" + dual : "-";
    const std::string k2 = k1 + (c.adda ? "A" : "-");
    const std::string k3 = k2 + (c.finetune ? "F" + dual : "-");
    if (!cache.count(k1)) {
      Snapshot s = cache.at("");
      if (c.pretrain) s.stages.push_back(pretrain(s.model, bench, c));
      cache.emplace(k1, std::move(s));
    }
    if (!cache.count(k2)) {
      Snapshot s = cache.at(k1);
      if (c.adda)
        s.stages.push_back(adapt(s.model, bench, c));
      else
        init_target_encoder(s.model);
      cache.emplace(k2, std::move(s));
    }
    if (!cache.count(k3)) {
      Snapshot s = cache.at(k2);
      if (c.finetune) s.stages.push_back(finetune(s.model, bench, c));
      cache.emplace(k3, std::move(s));
    }
    const Snapshot& done = cache.at(k3);
    row.stages = done.stages;
    row.report = evaluate_model(row.label, done.model, bench, c.dual_cell);
  }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

namespace {

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[i] = digits[v & 15];
  return s;
}

void write_header(std::ostream& os, std::uint64_t digest, const SeedBlock& seeds) {
  os << "config_digest " << hex64(digest) << '\n';
  os << "seed_benchmark " << seeds.benchmark << '\n';
  os << "seed_train " << seeds.train << '\n';
}

void write_stats(std::ostream& os, const RouteReport& r) {
  os << "routes " << r.per_route.size() << '\n';
  os << "best " << format_exact(r.agg.best) << '\n';
  os << "mean " << format_exact(r.agg.mean) << '\n';
  os << "worst " << format_exact(r.agg.worst) << '\n';
  os << "route_rmse";
  for (double v : r.per_route) os << ' ' << format_exact(v);
  os << '\n';
}

template <typename F>
void write_csv(const std::filesystem::path& path, F&& body) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  body(os);
  if (!os) throw Error("write failed: " + path.string());
}

}  // namespace

void write_route_reports(std::ostream& os, const std::vector<RouteReport>& reports, std::uint64_t digest,
                         const SeedBlock& seeds) {
  write_header(os, digest, seeds);
  for (const auto& r : reports) {
    os << "\nmethod " << r.method << '\n';
    write_stats(os, r);
  }
}

RouteReportFile read_route_reports(std::istream& is) {
  RouteReportFile f;
  std::string line;
  std::size_t line_no = 0;
  auto next = [&](const std::string& key) {
    while (std::getline(is, line)) {
      ++line_no;
      if (line.empty()) continue;
      std::istringstream ss(line);
      std::string k;
      ss >> k;
      if (k != key) throw FormatError("expected '" + key + "'", line_no);
      std::vector<std::string> rest;
      for (std::string t; ss >> t;) rest.push_back(t);
      return rest;
    }
    throw FormatError("report ends before '" + key + "'", line_no);
  };
  auto one = [&](const std::string& key) {
    auto v = next(key);
    if (v.size() != 1) throw FormatError("'" + key + "' takes one value", line_no);
    return v[0];
  };
  auto count = [&](const std::string& key) {
    const std::string v = one(key);
    char* end = nullptr;
    const unsigned long long n = std::strtoull(v.c_str(), &end, 10);
    if (v.empty() || *end) throw FormatError("bad integer for " + key, line_no);
    return static_cast<std::uint64_t>(n);
  };
  {
    const std::string d = one("config_digest");
    char* end = nullptr;
    f.config_digest = std::strtoull(d.c_str(), &end, 16);
    if (d.size() != 16 || *end) throw FormatError("bad config digest", line_no);
  }
  f.seeds.benchmark = count("seed_benchmark");
  f.seeds.train = count("seed_train");
  for (;;) {
    while (is.peek() == '\n') {
      is.get();
      ++line_no;
    }
    if (is.peek() == std::char_traits<char>::eof()) break;
    const std::string method = one("method");
    const std::uint64_t n = count("routes");
    double stats[3];
    const char* names[3] = {"best", "mean", "worst"};
    for (int s = 0; s < 3; ++s) stats[s] = parse_double(one(names[s]), names[s], line_no);
    std::vector<double> per;
    for (const auto& t : next("route_rmse")) per.push_back(parse_double(t, "route_rmse", line_no));
    if (per.size() != n) throw FormatError("route count does not match the rmse list", line_no);
    RouteReport r = RouteReport::make(method, std::move(per));
    if (r.agg.best != stats[0] || r.agg.mean != stats[1] || r.agg.worst != stats[2])
      throw FormatError("aggregates do not match the rmse list for " + method, line_no);
    f.reports.push_back(std::move(r));
  }
  return f;
}

void write_ablation(std::ostream& os, const std::vector<AblationRow>& rows, std::uint64_t digest,
                    const SeedBlock& seeds) {
  write_header(os, digest, seeds);
  for (const auto& row : rows) {
    const TrainConfig& c = row.cfg;
    os << "\nrow " << row.label << '\n';
    os << "pretrain " << c.pretrain << " adda " << c.adda << " finetune " << c.finetune << " dual_cell " << c.dual_cell
       << '\n';
    os << "seed " << c.seed << '\n';
    std::string diff;
    auto note = [&](bool on, const char* key) {
      if (!on) diff += std::string(diff.empty() ? "" : " ") + key + "=0";
    };
    note(c.pretrain, "train.pretrain");
    note(c.adda, "train.adda");
    note(c.finetune, "train.finetune");
    note(c.dual_cell, "train.dual_cell");
    os << "diff " << (diff.empty() ? "none" : diff) << '\n';
    write_stats(os, row.report);
  }
}

void emit_profile(const Route& route, std::span<const double> pred, std::span<const double> truth,
                  const std::filesystem::path& path) {
  const auto arc = route.sample_arc_lengths();
  if (pred.size() != arc.size() || truth.size() != arc.size())
    throw ShapeError("emit_profile: profile lengths do not match the route's " + std::to_string(arc.size()) +
                     " sample points");
  write_csv(path, [&](std::ostream& os) {
    os << "arc_m,pred_dbm,truth_dbm\n";
    for (std::size_t i = 0; i < arc.size(); ++i)
      os << format_exact(arc[i]) << ',' << format_exact(pred[i]) << ',' << format_exact(truth[i]) << '\n';
  });
}

void emit_slice(const RadioMap& map, std::size_t level, const std::filesystem::path& path) {
  const GridSpec& g = map.grid;
  if (level >= g.nz())
    throw ConfigError("emit_slice: level " + std::to_string(level) + " outside [0, " + std::to_string(g.nz()) + ")");
  write_csv(path, [&](std::ostream& os) {
    for (std::size_t j = 0; j < g.ny(); ++j) {
      for (std::size_t i = 0; i < g.nx(); ++i) {
        if (i) os << ',';
        os << format_exact(map.values[g.index(i, j, level)]);
      }
      os << '\n';
    }
  });
}

}  // namespace g2a
