#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "g2a/baselines.hpp"
#include "g2a/pipeline.hpp"

namespace g2a {

double route_rmse(std::span<const double> pred, std::span<const double> truth);

struct Aggregate {
  double best = 0.0, mean = 0.0, worst = 0.0;
};
Aggregate aggregate(std::span<const double> per_route);

/// 100 (baseline - ours) / baseline.
double improvement_pct(double ours_mean, double baseline_mean);

struct RouteReport {
  std::string method;
  std::vector<double> per_route;  // dB, in (pair, stream, route) order
  Aggregate agg;

  static RouteReport make(std::string method, std::vector<double> per_route);
};

/// Baseline and harness settings.
struct EvalConfig {
  std::size_t kriging_neighbors = 32;
  std::size_t variogram_bins = 15;
  std::size_t variogram_max_points = 2000;
  std::size_t gp_max_points = 2000;
  double gp_noise_ratio = 0.1;

  void validate() const;
};

/// Truth is the target-domain map sampled at the route points.
std::vector<double> truth_profile(const PairData& p, int stream, const Route& route);

/// Calls `predict` once per (pair, stream) and scores every test route.
using StreamPredictor = std::function<std::vector<std::vector<double>>(std::size_t pair, int stream)>;
RouteReport evaluate_routes(const std::string& method, const Benchmark& bench, const StreamPredictor& predict);

RouteReport evaluate_model(const std::string& method, const nn::DualTxModel& model, const Benchmark& bench,
                           bool dual_cell);

/// Crop-restricted ground plus the aerial samples of one stream, aerial first.
Observations stream_observations(const PairData& p, int stream);

RouteReport evaluate_kriging(const Benchmark& bench, const EvalConfig& cfg, std::uint64_t seed);
RouteReport evaluate_gp(const Benchmark& bench, const EvalConfig& cfg, std::uint64_t seed);

// --- ablation ---------------------------------------------------------------

struct AblationRow {
  std::string label;
  TrainConfig cfg;
  RouteReport report;
  std::vector<StageReport> stages;
};

/// The six switch rows of the ablation table, all-on first.
std::vector<AblationRow> standard_rows(const TrainConfig& base);

/// Trains and scores each row. Rows must differ only in their toggles;
/// shared stage prefixes are trained once and reused.
void ablation_suite(const Benchmark& bench, std::vector<AblationRow>& rows);

// --- reports and figure data ------------------------------------------------

struct SeedBlock {
  std::uint64_t benchmark = 0;
  std::uint64_t train = 0;
};

void write_route_reports(std::ostream& os, const std::vector<RouteReport>& reports, std::uint64_t config_digest,
                         const SeedBlock& seeds);
struct RouteReportFile {
  std::uint64_t config_digest = 0;
  SeedBlock seeds;
  std::vector<RouteReport> reports;
};
/// Inverse of write_route_reports; aggregates are checked against the list.
RouteReportFile read_route_reports(std::istream& is);

void write_ablation(std::ostream& os, const std::vector<AblationRow>& rows, std::uint64_t config_digest,
                    const SeedBlock& seeds);

/// CSV rows: arc length (m), predicted dBm, truth dBm.
void emit_profile(const Route& route, std::span<const double> pred, std::span<const double> truth,
                  const std::filesystem::path& path);
/// One altitude level as ny rows of nx comma-separated dBm values.
void emit_slice(const RadioMap& map, std::size_t level, const std::filesystem::path& path);

}  // namespace g2a
