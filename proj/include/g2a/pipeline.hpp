#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "g2a/datasets.hpp"
#include "g2a/geoscene.hpp"
#include "g2a/neural/model.hpp"
#include "g2a/propsim.hpp"

namespace g2a {

/// Training run switches and hyperparameters. The four toggles are
/// independent; any combination runs.
struct TrainConfig {
  bool pretrain = true;
  bool adda = true;
  bool finetune = true;
  bool dual_cell = true;

  std::size_t pretrain_epochs = 50;
  std::size_t adda_epochs = 30;
  std::size_t finetune_epochs = 50;
  std::size_t disc_warmup_epochs = 30;
  std::size_t autoencoder_epochs = 50;
  double pretrain_lr = 1e-3;
  double adda_lr = 1e-4;  // discriminator
  double adda_encoder_lr = 1e-5;
  double disc_warmup_lr = 3e-3;
  double finetune_lr = 1e-4;
  double autoencoder_lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::size_t batch_pairs = 1;  // pairs accumulated per optimizer step

  MaskParams mask;
  nn::ArchSpec arch = default_arch();
  std::uint64_t seed = 1;

  static nn::ArchSpec default_arch() {
    nn::ArchSpec a;
    a.base_channels = 8;
    return a;
  }
  void validate() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Per-stage record. Wall time is kept out of the serialized form so reports
/// are reproducible byte for byte.
struct StageReport {
  std::string stage;
  std::vector<double> losses;  // one per epoch
  std::map<std::string, std::vector<double>> aux;  // extra per-epoch curves
  std::map<std::string, double> scalars;
  std::vector<std::string> warnings;
  std::uint64_t checksum = 0;
  double wall_seconds = 0.0;

  void write(std::ostream& os) const;
};

class DivergenceError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

// --- benchmark --------------------------------------------------------------

struct BenchmarkConfig {
  SceneConfig scene;
  PropagationParams source;  // the simulator; the target is shifted_domain(source)
  double cell = 10.0;
  std::uint32_t levels = 20;
  std::array<std::uint32_t, 3> crop{48, 48, 16};
  std::size_t pairs = 4;
  double max_pair_distance = 450.0;
  std::size_t ground_per_cell = 7500;
  double aerial_ratio = 1e-3;
  std::size_t train_routes = 4;  // per pair
  std::size_t test_routes = 5;  // per pair
  double route_alt_lo = 60.0;
  double route_alt_hi = 150.0;
  double route_spacing = 10.0;
  double route_margin = 20.0;  // keep routes this far inside the crop
  NormWindow norm;
  std::uint64_t seed = 1;

  void validate() const;
};

/// One transmitter pair and everything measured or simulated for it, all on
/// the pair's crop grid.
struct PairData {
  std::size_t tx_i = 0, tx_j = 0;
  GridSpec grid;
  RadioMap source_i, source_j;  // simulator maps (pretraining)
  RadioMap target_i, target_j;  // shifted-domain maps (ground truth)
  MeasurementSet ground_i, ground_j;  // D_g over the whole scene
  MeasurementSet aerial_i, aerial_j;  // D_a from the training routes
  std::vector<Route> train_routes, test_routes;

  const RadioMap& source(int s) const { return s == 0 ? source_i : source_j; }
  const RadioMap& target(int s) const { return s == 0 ? target_i : target_j; }
  const MeasurementSet& ground(int s) const { return s == 0 ? ground_i : ground_j; }
  const MeasurementSet& aerial(int s) const { return s == 0 ? aerial_i : aerial_j; }
  std::size_t tx(int s) const { return s == 0 ? tx_i : tx_j; }
};

struct Benchmark {
  BenchmarkConfig cfg;
  PropagationParams source_params, target_params;  // seeded
  Scene scene;
  GridSpec full_grid;
  std::vector<PairData> pairs;

  NormWindow norm() const { return cfg.norm; }
  Vec3 tx_position(const PairData& p, int s) const { return scene.transmitters[p.tx(s)].position; }
};

/// Disjoint adjacent pairs, closest first.
std::vector<std::pair<std::size_t, std::size_t>> select_pairs(const Scene& scene, double max_dist,
                                                              std::size_t count);

/// Crop of the scene lattice centered on the pair midpoint, clamped inside.
GridSpec pair_crop(const GridSpec& full, Vec3 a, Vec3 b, std::array<std::uint32_t, 3> dims);

Scene benchmark_scene(const BenchmarkConfig& cfg);
Benchmark build_benchmark(const BenchmarkConfig& cfg, unsigned threads = 1);
/// Same, on a scene loaded from disk instead of the generated one.
Benchmark build_benchmark(const BenchmarkConfig& cfg, Scene scene, unsigned threads = 1);

/// Writes scene, maps, measurements, routes and the pair table under `dir`;
/// load_benchmark rebuilds an identical Benchmark from those files.
/// `parts` selects a subset: scene.txt, maps plus pair table, or data/.
enum BenchmarkPart : unsigned { part_scene = 1, part_maps = 2, part_data = 4, part_all = 7 };
void save_benchmark(const Benchmark& b, const std::filesystem::path& dir, unsigned parts = part_all);
Benchmark load_benchmark(const BenchmarkConfig& cfg, const std::filesystem::path& dir);

/// Ground draws for a cell over the whole scene ground layer.
MeasurementSet draw_ground(const Benchmark& b, const PairData& p, int stream, std::uint64_t seed);

// --- training stages --------------------------------------------------------

/// Source-domain masked input for one stream at a given epoch.
GridSample masked_source_input(const Benchmark& b, const PairData& p, int stream, const MaskParams& mask,
                               std::uint64_t seed, std::size_t epoch);
/// Ground set of one stream restricted to the pair crop and rasterized.
GridSample ground_input(const Benchmark& b, const PairData& p, int stream);

/// Decoder serving a stream under the dual-cell toggle.
inline int decoder_for(int stream, bool dual_cell) { return dual_cell ? stream : 0; }

/// Two-stream masked reconstruction loss on one pair; grads accumulate into
/// the source encoder and the decoders when `accumulate` is set.
double pretrain_pair_loss(nn::DualTxModel& model, const GridSample& x_i, const GridSample& x_j,
                          const std::vector<double>& full_i, const std::vector<double>& full_j, bool dual_cell,
                          bool accumulate);

/// Discriminator objective on pooled features: source labeled 1, target 0.
double discriminator_loss(nn::DualTxModel& model, const nn::Tensor& z_source, const nn::Tensor& z_target,
                          bool accumulate);

/// Target-encoder objective: the discriminator should call target features
/// source. Grads accumulate into the target encoder when `accumulate` is set
/// (the discriminator's grads are also touched and must be cleared).
double encoder_adversarial_loss(nn::DualTxModel& model, const nn::Tensor& x_target, bool accumulate);

/// Aerial samples of one stream as (voxel, normalized value) targets.
struct VoxelTargets {
  std::vector<std::size_t> voxels;
  std::vector<double> values;
  bool empty() const { return voxels.empty(); }
};
VoxelTargets aerial_targets(const MeasurementSet& aerial, const GridSpec& grid, const NormWindow& norm);

/// Sparse two-stream loss at aerial voxels, decoders driven by the frozen
/// target encoder's output.
double finetune_pair_loss(nn::DualTxModel& model, const nn::Encoded& code_i, const nn::Encoded& code_j,
                          const VoxelTargets& t_i, const VoxelTargets& t_j, bool dual_cell, bool accumulate);

StageReport pretrain(nn::DualTxModel& model, const Benchmark& bench, const TrainConfig& cfg);
/// Copies the source encoder into the target encoder.
void init_target_encoder(nn::DualTxModel& model);
StageReport adapt(nn::DualTxModel& model, const Benchmark& bench, const TrainConfig& cfg);
StageReport finetune(nn::DualTxModel& model, const Benchmark& bench, const TrainConfig& cfg);

/// Fraction of held-out source and target inputs the discriminator labels
/// correctly (threshold 0.5).
double heldout_disc_accuracy(const nn::DualTxModel& model, const Benchmark& bench, const TrainConfig& cfg,
                             std::uint64_t draw_seed);

/// Runs the enabled stages in order; the model starts from `create`.
struct PipelineResult {
  nn::DualTxModel model;
  std::vector<StageReport> reports;
};
PipelineResult run_pipeline(const Benchmark& bench, const TrainConfig& cfg);

// --- inference --------------------------------------------------------------

/// Full predicted map (dBm) of one stream from rasterized ground data.
RadioMap predict_map(const nn::DualTxModel& model, const GridSample& ground, int decoder, const std::string& cell_id);

/// RSRP profile at the route sample points. Throws ConfigError listing the
/// waypoints outside the grid.
std::vector<double> predict_route(const nn::DualTxModel& model, const GridSample& ground, const Route& route,
                                  int decoder);
std::vector<double> profile_from_map(const RadioMap& map, const Route& route);

void write_reports(const std::vector<StageReport>& reports, std::ostream& os);

}  // namespace g2a
