#include <algorithm>
#include <chrono>
#include <cmath>
#include <optional>
#include <ostream>

#include "g2a/neural/optim.hpp"
#include "g2a/pipeline.hpp"

namespace g2a {

using nn::Tensor;

void TrainConfig::validate() const {
  auto positive = [](double v, const char* key) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string(key) + " must be positive");
  };
  positive(pretrain_lr, "train.pretrain_lr");
  positive(adda_lr, "train.adda_lr");
  positive(adda_encoder_lr, "train.adda_encoder_lr");
  positive(disc_warmup_lr, "train.disc_warmup_lr");
  positive(finetune_lr, "train.finetune_lr");
  positive(autoencoder_lr, "train.autoencoder_lr");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("train.beta1 must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train.beta2 must lie in [0, 1)");
  if (batch_pairs == 0) throw ConfigError("train.batch_pairs must be positive");
  mask.validate();
  arch.validate();
}

void StageReport::write(std::ostream& os) const {
  os << "stage " << stage << '\n';
  os << "checksum " << checksum << '\n';
  for (const auto& [k, v] : scalars) os << "scalar " << k << ' ' << format_exact(v) << '\n';
  for (const auto& w : warnings) os << "warning " << w << '\n';
  os << "epoch loss";
  for (const auto& [k, _] : aux) os << ' ' << k;
  os << '\n';
  for (std::size_t e = 0; e < losses.size(); ++e) {
    os << e + 1 << ' ' << format_exact(losses[e]);
    for (const auto& [_, curve] : aux) os << ' ' << format_exact(curve.at(e));
    os << '\n';
  }
}

void write_reports(const std::vector<StageReport>& reports, std::ostream& os) {
  for (std::size_t i = 0; i < reports.size(); ++i) {
    if (i) os << '\n';
    reports[i].write(os);
  }
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

nn::AdamConfig adam(const TrainConfig& cfg, double lr) {
  nn::AdamConfig a;
  a.lr = lr;
  a.beta1 = cfg.beta1;
  a.beta2 = cfg.beta2;
  return a;
}

void append(std::vector<nn::Param*>& out, std::vector<nn::Param*> more) { out.insert(out.end(), more.begin(), more.end()); }

std::vector<nn::Param*> decoder_params(nn::DualTxModel& m, bool dual_cell) {
  std::vector<nn::Param*> ps = m.decoder_i.params();
  if (dual_cell) append(ps, m.decoder_j.params());
  return ps;
}

// Aborts once the loss has stayed above 10x its first value for 3 epochs.
class DivergenceGuard {
 public:
  // floor: a lower bound on the reference loss, for stages whose loss is
  // meant to rise.
  explicit DivergenceGuard(std::string stage, double floor = 0.0) : stage_(std::move(stage)), floor_(floor) {}
  void observe(double loss) {
    if (!std::isfinite(loss)) throw DivergenceError(stage_ + ": loss is not finite");
    if (!first_) {
      first_ = std::max(loss, floor_);
      return;
    }
    over_ = loss > 10.0 * *first_ ? over_ + 1 : 0;
    if (over_ >= 3)
      throw DivergenceError(stage_ + ": loss above 10x its initial value for 3 consecutive epochs");
  }

 private:
  std::string stage_;
  double floor_;
  std::optional<double> first_;
  int over_ = 0;
};

std::vector<double> normalized(const RadioMap& m, const NormWindow& norm) {
  std::vector<double> v(m.values.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = norm.normalize(m.values[i]);
  return v;
}

// Both streams of a pair stacked as a batch of two.
Tensor pair_tensor(const GridSample& a, const GridSample& b) { return nn::to_tensor({&a, &b}); }

Tensor source_batch(const Benchmark& b, const PairData& p, const TrainConfig& cfg, std::uint64_t seed,
                    std::size_t epoch) {
  return pair_tensor(masked_source_input(b, p, 0, cfg.mask, seed, epoch),
                     masked_source_input(b, p, 1, cfg.mask, seed, epoch));
}

std::size_t count_correct(const std::vector<double>& probs, bool source) {
  std::size_t n = 0;
  for (double q : probs) n += source ? q > 0.5 : q < 0.5;
  return n;
}

}  // namespace

// ---------------------------------------------------------------------------
// Inputs
// ---------------------------------------------------------------------------

GridSample masked_source_input(const Benchmark& b, const PairData& p, int stream, const MaskParams& mask,
                               std::uint64_t seed, std::size_t epoch) {
  const std::uint64_t key = hash_combine(hash_combine(derive_seed(seed, "pretrain.mask"), epoch), p.tx(stream));
  return apply_mask(p.source(stream), sample_mask(p.grid, b.tx_position(p, stream), mask, key), b.norm());
}

GridSample ground_input(const Benchmark& b, const PairData& p, int stream) {
  return rasterize(restrict_to(p.ground(stream), p.grid), p.grid, b.norm());
}

VoxelTargets aerial_targets(const MeasurementSet& aerial, const GridSpec& grid, const NormWindow& norm) {
  VoxelTargets t;
  for (std::size_t n = 0; n < aerial.samples.size(); ++n) {
    const auto v = grid.locate(aerial.samples[n].position);
    if (!v) throw FormatError("aerial sample " + std::to_string(n) + " lies outside the pair grid");
    t.voxels.push_back(*v);
    t.values.push_back(norm.normalize(aerial.samples[n].rsrp_dbm));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

double pretrain_pair_loss(nn::DualTxModel& model, const GridSample& x_i, const GridSample& x_j,
                          const std::vector<double>& full_i, const std::vector<double>& full_j, bool dual_cell,
                          bool accumulate) {
  double total = 0.0;
  const GridSample* xs[2] = {&x_i, &x_j};
  const std::vector<double>* fulls[2] = {&full_i, &full_j};
  for (int s = 0; s < 2; ++s) {
    nn::EncoderTrace et;
    nn::DecoderTrace dt;
    nn::Decoder& dec = model.decoder(decoder_for(s, dual_cell));
    const nn::Encoded code = nn::encode(model.source_encoder, nn::to_tensor(*xs[s]), accumulate ? &et : nullptr);
    const Tensor y = nn::decode(dec, code, accumulate ? &dt : nullptr);
    Tensor g;
    total += nn::mse_full(y, *fulls[s], accumulate ? &g : nullptr);
    if (accumulate) {
      const nn::Encoded gc = nn::backward(dec, dt, g);
      nn::backward(model.source_encoder, et, gc.z, gc.skips);
    }
  }
  return total;
}

double discriminator_loss(nn::DualTxModel& model, const Tensor& z_source, const Tensor& z_target, bool accumulate) {
  nn::DiscriminatorTrace ts, tt;
  const Tensor ls = nn::discriminator_logits(model.discriminator, z_source, accumulate ? &ts : nullptr);
  const Tensor lt = nn::discriminator_logits(model.discriminator, z_target, accumulate ? &tt : nullptr);
  Tensor gs, gt;
  const double loss = nn::bce_with_logits(ls, true, accumulate ? &gs : nullptr) +
                      nn::bce_with_logits(lt, false, accumulate ? &gt : nullptr);
  if (accumulate) {
    nn::backward(model.discriminator, ts, gs);
    nn::backward(model.discriminator, tt, gt);
  }
  return loss;
}

double encoder_adversarial_loss(nn::DualTxModel& model, const Tensor& x_target, bool accumulate) {
  nn::EncoderTrace et;
  nn::DiscriminatorTrace dt;
  const nn::Encoded code = nn::encode(model.target_encoder, x_target, accumulate ? &et : nullptr);
  const Tensor logits = nn::discriminator_logits(model.discriminator, code.z, accumulate ? &dt : nullptr);
  Tensor g;
  const double loss = nn::bce_with_logits(logits, true, accumulate ? &g : nullptr);
  if (accumulate) {
    const Tensor gz = nn::backward(model.discriminator, dt, g);
    nn::backward(model.target_encoder, et, gz, {});
  }
  return loss;
}

double finetune_pair_loss(nn::DualTxModel& model, const nn::Encoded& code_i, const nn::Encoded& code_j,
                          const VoxelTargets& t_i, const VoxelTargets& t_j, bool dual_cell, bool accumulate) {
  double total = 0.0;
  const nn::Encoded* codes[2] = {&code_i, &code_j};
  const VoxelTargets* ts[2] = {&t_i, &t_j};
  for (int s = 0; s < 2; ++s) {
    if (ts[s]->empty()) continue;
    nn::Decoder& dec = model.decoder(decoder_for(s, dual_cell));
    nn::DecoderTrace dt;
    const Tensor y = nn::decode(dec, *codes[s], accumulate ? &dt : nullptr);
    Tensor g;
    total += nn::mse_at(y, ts[s]->voxels, ts[s]->values, accumulate ? &g : nullptr);
    if (accumulate) nn::backward(dec, dt, g, false);
  }
  return total;
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

StageReport pretrain(nn::DualTxModel& model, const Benchmark& bench, const TrainConfig& cfg) {
  cfg.validate();
  const auto t0 = Clock::now();
  StageReport rep;
  rep.stage = "pretrain";
  std::vector<nn::Param*> ps = model.source_encoder.params();
  append(ps, decoder_params(model, cfg.dual_cell));
  nn::Adam opt(ps, adam(cfg, cfg.pretrain_lr));

  std::vector<std::array<std::vector<double>, 2>> full;
  for (const auto& p : bench.pairs)
    full.push_back({normalized(p.source_i, bench.norm()), normalized(p.source_j, bench.norm())});

  DivergenceGuard guard("pretrain");
  for (std::size_t e = 0; e < cfg.pretrain_epochs; ++e) {
    double total = 0.0;
    std::size_t pending = 0;
    opt.zero_grad();
    for (std::size_t k = 0; k < bench.pairs.size(); ++k) {
      const PairData& p = bench.pairs[k];
      const GridSample xi = masked_source_input(bench, p, 0, cfg.mask, cfg.seed, e);
      const GridSample xj = masked_source_input(bench, p, 1, cfg.mask, cfg.seed, e);
      total += pretrain_pair_loss(model, xi, xj, full[k][0], full[k][1], cfg.dual_cell, true);
      if (++pending == cfg.batch_pairs || k + 1 == bench.pairs.size()) {
        opt.step();
        opt.zero_grad();
        pending = 0;
      }
    }
    const double loss = total / static_cast<double>(bench.pairs.size());
    guard.observe(loss);
    rep.losses.push_back(loss);
  }
  rep.checksum = nn::checksum(model.params());
  rep.wall_seconds = seconds_since(t0);
  return rep;
}

void init_target_encoder(nn::DualTxModel& model) {
  auto from = model.source_encoder.params();
  auto to = model.target_encoder.params();
  for (std::size_t i = 0; i < from.size(); ++i) to[i]->value = from[i]->value;
}

double heldout_disc_accuracy(const nn::DualTxModel& model, const Benchmark& bench, const TrainConfig& cfg,
                             std::uint64_t draw_seed) {
  std::size_t correct = 0, total = 0;
  constexpr std::size_t kDraws = 4;
  for (std::size_t d = 0; d < kDraws; ++d) {
    const std::uint64_t seed = hash_combine(derive_seed(draw_seed, "heldout"), d);
    for (const auto& p : bench.pairs) {
      const Tensor xs = source_batch(bench, p, cfg, seed, 0);
      PairData fresh = p;
      fresh.ground_i = draw_ground(bench, p, 0, seed);
      fresh.ground_j = draw_ground(bench, p, 1, seed);
      const Tensor xt = pair_tensor(ground_input(bench, fresh, 0), ground_input(bench, fresh, 1));
      correct += count_correct(nn::discriminate(model.discriminator, nn::encode(model.source_encoder, xs).z), true);
      correct += count_correct(nn::discriminate(model.discriminator, nn::encode(model.target_encoder, xt).z), false);
      total += 4;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

StageReport adapt(nn::DualTxModel& model, const Benchmark& bench, const TrainConfig& cfg) {
  cfg.validate();
  const auto t0 = Clock::now();
  StageReport rep;
  rep.stage = "adapt";
  init_target_encoder(model);
  nn::Adam opt_d(model.discriminator.params(), adam(cfg, cfg.adda_lr));
  nn::Adam opt_e(model.target_encoder.params(), adam(cfg, cfg.adda_encoder_lr));

  std::vector<Tensor> targets;
  for (const auto& p : bench.pairs) targets.push_back(pair_tensor(ground_input(bench, p, 0), ground_input(bench, p, 1)));
  const std::uint64_t adda_seed = derive_seed(cfg.seed, "adapt");
  const std::uint64_t heldout_seed = derive_seed(cfg.seed, "adapt.heldout");

  // The discriminator first learns the untouched gap so the game starts from
  // an informed critic.
  double warm = 0.0;
  opt_d.set_lr(cfg.disc_warmup_lr);
  for (std::size_t w = 0; w < cfg.disc_warmup_epochs; ++w) {
    warm = 0.0;
    for (std::size_t k = 0; k < bench.pairs.size(); ++k) {
      const Tensor zs = nn::encode(model.source_encoder, source_batch(bench, bench.pairs[k], cfg, adda_seed, w)).z;
      const Tensor zt = nn::encode(model.target_encoder, targets[k]).z;
      opt_d.zero_grad();
      warm += discriminator_loss(model, zs, zt, true);
      opt_d.step();
    }
    warm /= static_cast<double>(bench.pairs.size());
  }
  opt_d.set_lr(cfg.adda_lr);
  rep.scalars["warmup_disc_loss"] = warm;
  rep.scalars["heldout_acc_before"] = heldout_disc_accuracy(model, bench, cfg, heldout_seed);

  // A warmed-up critic starts well below chance and is supposed to climb.
  DivergenceGuard guard("adapt", 2.0 * std::log(2.0));
  auto& enc_curve = rep.aux["encoder_loss"];
  auto& acc_curve = rep.aux["disc_accuracy"];
  int low_streak = 0;
  for (std::size_t e = 0; e < cfg.adda_epochs; ++e) {
    double ld = 0.0, le = 0.0;
    std::size_t correct = 0, seen = 0;
    for (std::size_t k = 0; k < bench.pairs.size(); ++k) {
      const Tensor zs = nn::encode(model.source_encoder,
                                   source_batch(bench, bench.pairs[k], cfg, adda_seed, cfg.disc_warmup_epochs + e))
                            .z;
      const Tensor zt = nn::encode(model.target_encoder, targets[k]).z;
      correct += count_correct(nn::discriminate(model.discriminator, zs), true);
      correct += count_correct(nn::discriminate(model.discriminator, zt), false);
      seen += zs.batch() + zt.batch();

      opt_d.zero_grad();
      ld += discriminator_loss(model, zs, zt, true);
      opt_d.step();

      opt_e.zero_grad();
      le += encoder_adversarial_loss(model, targets[k], true);
      opt_e.step();
    }
    const double n = static_cast<double>(bench.pairs.size());
    ld /= n;
    le /= n;
    guard.observe(ld);
    rep.losses.push_back(ld);
    enc_curve.push_back(le);
    acc_curve.push_back(static_cast<double>(correct) / static_cast<double>(seen));
    low_streak = ld < 1e-3 ? low_streak + 1 : 0;
    if (low_streak >= 5) {
      opt_d.set_lr(0.5 * opt_d.lr());
      rep.warnings.push_back("epoch " + std::to_string(e + 1) + ": discriminator loss below 1e-3 for 5 epochs, lr halved to " +
                             format_exact(opt_d.lr()));
      low_streak = 0;
    }
  }
  // Discriminator grads were polluted by the encoder steps; leave them clean.
  opt_d.zero_grad();
  rep.scalars["heldout_acc_after"] = heldout_disc_accuracy(model, bench, cfg, heldout_seed);
  rep.checksum = nn::checksum(model.params());
  rep.wall_seconds = seconds_since(t0);
  return rep;
}

StageReport finetune(nn::DualTxModel& model, const Benchmark& bench, const TrainConfig& cfg) {
  cfg.validate();
  const auto t0 = Clock::now();
  StageReport rep;
  rep.stage = "finetune";
  nn::Adam opt(decoder_params(model, cfg.dual_cell), adam(cfg, cfg.finetune_lr));

  std::vector<std::array<nn::Encoded, 2>> codes;
  std::vector<std::array<VoxelTargets, 2>> targets;
  for (std::size_t k = 0; k < bench.pairs.size(); ++k) {
    const PairData& p = bench.pairs[k];
    codes.push_back({nn::encode(model.target_encoder, nn::to_tensor(ground_input(bench, p, 0))),
                     nn::encode(model.target_encoder, nn::to_tensor(ground_input(bench, p, 1)))});
    targets.push_back({aerial_targets(p.aerial_i, p.grid, bench.norm()), aerial_targets(p.aerial_j, p.grid, bench.norm())});
    for (int s = 0; s < 2; ++s)
      if (targets[k][s].empty())
        rep.warnings.push_back("pair " + std::to_string(k) + " stream " + std::to_string(s) +
                               ": no aerial samples, term skipped");
  }

  DivergenceGuard guard("finetune");
  for (std::size_t e = 0; e < cfg.finetune_epochs; ++e) {
    double total = 0.0;
    for (std::size_t k = 0; k < bench.pairs.size(); ++k) {
      opt.zero_grad();
      total += finetune_pair_loss(model, codes[k][0], codes[k][1], targets[k][0], targets[k][1], cfg.dual_cell, true);
      opt.step();
    }
    const double loss = total / static_cast<double>(bench.pairs.size());
    guard.observe(loss);
    rep.losses.push_back(loss);
  }
  rep.checksum = nn::checksum(model.params());
  rep.wall_seconds = seconds_since(t0);
  return rep;
}

PipelineResult run_pipeline(const Benchmark& bench, const TrainConfig& cfg) {
  cfg.validate();
  PipelineResult r{nn::DualTxModel::create(cfg.arch, bench.norm(), derive_seed(cfg.seed, "model")), {}};
  if (cfg.pretrain) r.reports.push_back(pretrain(r.model, bench, cfg));
  if (cfg.adda)
    r.reports.push_back(adapt(r.model, bench, cfg));
  else
    init_target_encoder(r.model);
  if (cfg.finetune) r.reports.push_back(finetune(r.model, bench, cfg));
  return r;
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

RadioMap predict_map(const nn::DualTxModel& model, const GridSample& ground, int decoder, const std::string& cell_id) {
  const Tensor y = nn::decode(model.decoder(decoder), nn::encode(model.target_encoder, nn::to_tensor(ground)));
  RadioMap m;
  m.cell_id = cell_id;
  m.grid = ground.grid;
  m.values.resize(y.size());
  for (std::size_t v = 0; v < y.size(); ++v) m.values[v] = static_cast<float>(model.norm.denormalize(y[v]));
  return m;
}

std::vector<double> profile_from_map(const RadioMap& map, const Route& route) {
  std::vector<double> out;
  for (const auto& p : route.sample_points()) out.push_back(lookup_nearest(map, p));
  return out;
}

std::vector<double> predict_route(const nn::DualTxModel& model, const GridSample& ground, const Route& route,
                                  int decoder) {
  std::string bad;
  for (std::size_t w = 0; w < route.waypoints.size(); ++w)
    if (!ground.grid.contains(route.waypoints[w])) bad += (bad.empty() ? "" : ", ") + std::to_string(w);
  if (!bad.empty()) throw ConfigError("route waypoints outside the prediction grid: " + bad);
  return profile_from_map(predict_map(model, ground, decoder, ""), route);
}

}  // namespace g2a
