#pragma once

#include <cstdint>
#include <vector>

#include "g2a/datasets.hpp"
#include "g2a/pipeline.hpp"

namespace g2a {

/// Point observations pooled across ground and aerial sets.
struct Observations {
  std::vector<Vec3> points;
  std::vector<double> values;
  std::size_t pinned = 0;  // leading entries every subsample keeps

  std::size_t size() const { return points.size(); }
  /// `first` entries come first and are pinned.
  static Observations merge(const MeasurementSet& first, const MeasurementSet& rest);
  static Observations of(const MeasurementSet& ms);
};

/// Seeded subset of at most `cap` entries; pinned entries are always kept and
/// the original order is preserved.
Observations subsample(const Observations& obs, std::size_t cap, std::uint64_t seed);

// --- kriging ------------------------------------------------------------------

/// Exponential variogram; gamma(0) = nugget.
struct VariogramModel {
  double nugget = 0.0;
  double sill = 1.0;
  double range = 100.0;

  void validate() const;
  double gamma(double h) const { return nugget + (sill - nugget) * (1.0 - std::exp(-h / range)); }
  /// Covariance implied by the variogram; C(0) = sill.
  double covariance(double h) const { return h == 0.0 ? sill : sill - gamma(h); }
};

struct VariogramFitOptions {
  std::size_t n_bins = 15;
  std::size_t max_points = 2000;  // pairs are O(n^2); larger sets are subsampled
  std::uint64_t seed = 1;
};

VariogramModel fit_variogram(const Observations& obs, const VariogramFitOptions& opt = {});

struct KrigingWeights {
  std::vector<std::size_t> neighbors;
  std::vector<double> weights;
  bool fallback = false;  // inverse-distance weights were used
};

KrigingWeights kriging_weights(const Observations& obs, const VariogramModel& vg, Vec3 query, std::size_t k);

struct KrigingResult {
  std::vector<double> values;
  std::size_t fallbacks = 0;
};

KrigingResult kriging_predict(const Observations& obs, const VariogramModel& vg, const std::vector<Vec3>& queries,
                              std::size_t k = 32);

// --- gaussian process ---------------------------------------------------------

struct GpHyperparams {
  double length_scale = 100.0;
  double signal_variance = 1.0;
  double noise_variance = 0.1;

  void validate() const;
};

struct GpOptions {
  std::vector<double> length_scales{50.0, 100.0, 200.0, 400.0};
  std::vector<double> variance_factors{0.5, 1.0, 2.0};  // times the sample variance
  double noise_ratio = 0.1;  // noise variance relative to signal variance
  std::size_t max_points = 2000;
  std::uint64_t seed = 1;
};

struct GpModel {
  GpHyperparams hp;
  Observations train;  // the subsample actually conditioned on
  double mean = 0.0;  // constant prior mean (training average)
  std::vector<double> alpha;  // (K + noise I)^-1 (y - mean)
  double jitter = 0.0;
  double log_marginal = 0.0;
};

/// Log marginal likelihood search over the candidate grid.
GpHyperparams gp_fit(const Observations& obs, const GpOptions& opt = {});
GpModel gp_condition(const Observations& obs, const GpHyperparams& hp, const GpOptions& opt = {});
std::vector<double> gp_predict(const GpModel& model, const std::vector<Vec3>& queries);
std::vector<double> gp_predict(const Observations& obs, const GpHyperparams& hp, const std::vector<Vec3>& queries,
                               const GpOptions& opt = {});

// --- autoencoder ----------------------------------------------------------------

/// Single-stream network (one decoder, no attention) trained from scratch on
/// rasterized ground input against aerial samples; encoder and decoder both
/// learn.
struct AutoencoderResult {
  nn::DualTxModel model;
  StageReport report;
};

nn::ArchSpec autoencoder_arch(const nn::ArchSpec& base);
AutoencoderResult train_autoencoder(const Benchmark& bench, const TrainConfig& cfg);
double autoencoder_pair_loss(nn::DualTxModel& model, const GridSample& g_i, const GridSample& g_j,
                             const VoxelTargets& t_i, const VoxelTargets& t_j, bool accumulate);

}  // namespace g2a
