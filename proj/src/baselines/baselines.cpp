#include "g2a/baselines.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "g2a/neural/optim.hpp"

namespace g2a {

Observations Observations::of(const MeasurementSet& ms) {
  Observations o;
  for (const auto& m : ms.samples) {
    o.points.push_back(m.position);
    o.values.push_back(m.rsrp_dbm);
  }
  return o;
}

Observations Observations::merge(const MeasurementSet& first, const MeasurementSet& rest) {
  Observations o = of(first);
  o.pinned = o.size();
  for (const auto& m : rest.samples) {
    o.points.push_back(m.position);
    o.values.push_back(m.rsrp_dbm);
  }
  return o;
}

Observations subsample(const Observations& obs, std::size_t cap, std::uint64_t seed) {
  if (obs.size() <= cap) return obs;
  const std::size_t pinned = std::min(obs.pinned, cap);
  std::vector<std::size_t> idx(obs.size() - pinned);
  std::iota(idx.begin(), idx.end(), pinned);
  Rng rng(derive_seed(seed, "baselines.subsample"));
  const std::size_t want = cap - pinned;
  for (std::size_t i = 0; i < want; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
  idx.resize(want);
  std::sort(idx.begin(), idx.end());
  Observations out;
  out.pinned = pinned;
  for (std::size_t i = 0; i < pinned; ++i) {
    out.points.push_back(obs.points[i]);
    out.values.push_back(obs.values[i]);
  }
  for (auto i : idx) {
    out.points.push_back(obs.points[i]);
    out.values.push_back(obs.values[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Variogram
// ---------------------------------------------------------------------------

void VariogramModel::validate() const {
  if (!(nugget >= 0.0)) throw ConfigError("variogram nugget must be non-negative");
  if (!(sill > nugget)) throw ConfigError("variogram sill must exceed the nugget");
  if (!(range > 0.0)) throw ConfigError("variogram range must be positive");
}

VariogramModel fit_variogram(const Observations& all, const VariogramFitOptions& opt) {
  if (all.size() < 30) throw ConfigError("fit_variogram needs at least 30 measurements");
  if (opt.n_bins < 5) throw ConfigError("fit_variogram needs at least 5 lag bins");
  const Observations obs = subsample(all, opt.max_points, opt.seed);
  const std::size_t n = obs.size();

  double max_h = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) max_h = std::max(max_h, distance(obs.points[i], obs.points[j]));
  if (!(max_h > 0.0)) throw NumericalError("fit_variogram: degenerate lags, all positions coincide");

  const double max_lag = 0.5 * max_h;
  const double width = max_lag / static_cast<double>(opt.n_bins);
  std::vector<double> sum_h(opt.n_bins, 0.0), sum_g(opt.n_bins, 0.0), count(opt.n_bins, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double h = distance(obs.points[i], obs.points[j]);
      if (h <= 0.0 || h > max_lag) continue;
      const auto b = std::min(static_cast<std::size_t>(h / width), opt.n_bins - 1);
      const double d = obs.values[i] - obs.values[j];
      sum_h[b] += h;
      sum_g[b] += 0.5 * d * d;
      count[b] += 1.0;
    }
  std::vector<double> lag, gam, w;
  for (std::size_t b = 0; b < opt.n_bins; ++b)
    if (count[b] > 0) {
      lag.push_back(sum_h[b] / count[b]);
      gam.push_back(sum_g[b] / count[b]);
      w.push_back(count[b] / std::max(gam.back() * gam.back(), 1e-12));
    }
  if (lag.size() < 2) throw NumericalError("fit_variogram: fewer than two populated lag bins");

  // For a fixed range the model is linear in (nugget, partial sill); solve
  // that non-negative 2x2 problem for every candidate range.
  VariogramModel best;
  double best_sse = std::numeric_limits<double>::infinity();
  constexpr int kRanges = 80;
  const double r_lo = max_lag / 100.0, r_hi = 3.0 * max_lag;
  for (int c = 0; c < kRanges; ++c) {
    const double r = r_lo * std::pow(r_hi / r_lo, static_cast<double>(c) / (kRanges - 1));
    double sw = 0, sf = 0, sff = 0, sg = 0, sfg = 0;
    for (std::size_t b = 0; b < lag.size(); ++b) {
      const double f = 1.0 - std::exp(-lag[b] / r);
      sw += w[b];
      sf += w[b] * f;
      sff += w[b] * f * f;
      sg += w[b] * gam[b];
      sfg += w[b] * f * gam[b];
    }
    double nug = 0.0, ps = 0.0;
    const double det = sw * sff - sf * sf;
    if (det > 1e-12 * sw * sff) {
      nug = (sff * sg - sf * sfg) / det;
      ps = (sw * sfg - sf * sg) / det;
    }
    if (!(nug >= 0.0) || !(ps >= 0.0)) {
      // Best single-term fits on the boundary.
      const double ps_only = sff > 0 ? std::max(0.0, sfg / sff) : 0.0;
      const double nug_only = std::max(0.0, sg / sw);
      auto sse_of = [&](double a, double p) {
        double s = 0;
        for (std::size_t b = 0; b < lag.size(); ++b) {
          const double e = a + p * (1.0 - std::exp(-lag[b] / r)) - gam[b];
          s += w[b] * e * e;
        }
        return s;
      };
      if (sse_of(0.0, ps_only) <= sse_of(nug_only, 0.0)) {
        nug = 0.0;
        ps = ps_only;
      } else {
        nug = nug_only;
        ps = 0.0;
      }
    }
    double sse = 0.0;
    for (std::size_t b = 0; b < lag.size(); ++b) {
      const double e = nug + ps * (1.0 - std::exp(-lag[b] / r)) - gam[b];
      sse += w[b] * e * e;
    }
    if (sse < best_sse) {
      best_sse = sse;
      best.nugget = nug;
      best.sill = nug + std::max(ps, 1e-9);
      best.range = r;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Ordinary kriging
// ---------------------------------------------------------------------------

namespace {

std::vector<std::size_t> nearest(const Observations& obs, Vec3 q, std::size_t k) {
  std::vector<std::pair<double, std::size_t>> d(obs.size());
  for (std::size_t i = 0; i < obs.size(); ++i) d[i] = {distance(obs.points[i], q), i};
  k = std::min(k, d.size());
  std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = d[i].second;
  return out;
}

KrigingWeights idw(const Observations& obs, const std::vector<std::size_t>& nb, Vec3 q) {
  KrigingWeights kw;
  kw.neighbors = nb;
  kw.fallback = true;
  kw.weights.assign(nb.size(), 0.0);
  for (std::size_t a = 0; a < nb.size(); ++a)
    if (distance(obs.points[nb[a]], q) == 0.0) {
      kw.weights[a] = 1.0;
      return kw;
    }
  double total = 0.0;
  for (std::size_t a = 0; a < nb.size(); ++a) {
    const double d = distance(obs.points[nb[a]], q);
    kw.weights[a] = 1.0 / (d * d);
    total += kw.weights[a];
  }
  for (double& v : kw.weights) v /= total;
  return kw;
}

}  // namespace

KrigingWeights kriging_weights(const Observations& obs, const VariogramModel& vg, Vec3 q, std::size_t k) {
  if (k < 3) throw ConfigError("kriging needs at least 3 neighbors");
  if (obs.size() == 0) throw ConfigError("kriging needs observations");
  vg.validate();
  const auto nb = nearest(obs, q, k);
  const std::size_t m = nb.size();
  Eigen::MatrixXd A(m + 1, m + 1);
  Eigen::VectorXd rhs(m + 1);
  for (std::size_t a = 0; a < m; ++a) {
    for (std::size_t b = 0; b < m; ++b)
      A(a, b) = vg.covariance(distance(obs.points[nb[a]], obs.points[nb[b]]));
    A(a, m) = A(m, a) = 1.0;
    rhs(a) = vg.covariance(distance(obs.points[nb[a]], q));
  }
  A(m, m) = 0.0;
  rhs(m) = 1.0;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(A);
  lu.setThreshold(1e-12);
  if (!lu.isInvertible()) return idw(obs, nb, q);
  const Eigen::VectorXd sol = lu.solve(rhs);
  if (!sol.allFinite() || (A * sol - rhs).norm() > 1e-6 * (rhs.norm() + 1.0)) return idw(obs, nb, q);
  KrigingWeights kw;
  kw.neighbors = nb;
  kw.weights.assign(sol.data(), sol.data() + m);
  return kw;
}

KrigingResult kriging_predict(const Observations& obs, const VariogramModel& vg, const std::vector<Vec3>& queries,
                              std::size_t k) {
  KrigingResult r;
  r.values.reserve(queries.size());
  for (const auto& q : queries) {
    const KrigingWeights kw = kriging_weights(obs, vg, q, k);
    double v = 0.0;
    for (std::size_t a = 0; a < kw.neighbors.size(); ++a) v += kw.weights[a] * obs.values[kw.neighbors[a]];
    r.values.push_back(v);
    r.fallbacks += kw.fallback;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Gaussian process
// ---------------------------------------------------------------------------

void GpHyperparams::validate() const {
  if (!(length_scale > 0.0) || !(signal_variance > 0.0) || !(noise_variance > 0.0))
    throw ConfigError("GP hyperparameters must be positive");
}

namespace {

double rbf(const GpHyperparams& hp, Vec3 a, Vec3 b) {
  const Vec3 d = a - b;
  const double r2 = d.x * d.x + d.y * d.y + d.z * d.z;
  return hp.signal_variance * std::exp(-0.5 * r2 / (hp.length_scale * hp.length_scale));
}

struct Factor {
  Eigen::LLT<Eigen::MatrixXd> llt;
  double jitter = 0.0;
};

Factor factorize(const Observations& obs, const GpHyperparams& hp) {
  const std::size_t n = obs.size();
  Eigen::MatrixXd K(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) K(i, j) = K(j, i) = rbf(hp, obs.points[i], obs.points[j]);
    K(i, i) = hp.signal_variance + hp.noise_variance;
  }
  Factor f;
  for (double jitter : {0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4}) {
    Eigen::MatrixXd Kj = K;
    Kj.diagonal().array() += jitter * hp.signal_variance;
    f.llt.compute(Kj);
    if (f.llt.info() == Eigen::Success) {
      f.jitter = jitter;
      return f;
    }
  }
  throw NumericalError("GP kernel matrix not positive definite after jitter 1e-4");
}

double sample_mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

}  // namespace

GpModel gp_condition(const Observations& all, const GpHyperparams& hp, const GpOptions& opt) {
  hp.validate();
  if (all.size() == 0) throw ConfigError("GP needs observations");
  GpModel m;
  m.hp = hp;
  m.train = subsample(all, opt.max_points, opt.seed);
  m.mean = sample_mean(m.train.values);
  const std::size_t n = m.train.size();
  Eigen::VectorXd y(n);
  for (std::size_t i = 0; i < n; ++i) y(i) = m.train.values[i] - m.mean;
  const Factor f = factorize(m.train, hp);
  const Eigen::VectorXd alpha = f.llt.solve(y);
  m.alpha.assign(alpha.data(), alpha.data() + n);
  m.jitter = f.jitter;
  const Eigen::MatrixXd L = f.llt.matrixL();
  m.log_marginal = -0.5 * y.dot(alpha) - L.diagonal().array().log().sum() - 0.5 * n * std::log(2.0 * M_PI);
  return m;
}

GpHyperparams gp_fit(const Observations& all, const GpOptions& opt) {
  if (all.size() < 2) throw ConfigError("GP fit needs at least two observations");
  const Observations obs = subsample(all, opt.max_points, opt.seed);
  const double mu = sample_mean(obs.values);
  double var = 0.0;
  for (double v : obs.values) var += (v - mu) * (v - mu);
  var = std::max(var / obs.size(), 1e-6);
  GpHyperparams best;
  double best_lml = -std::numeric_limits<double>::infinity();
  for (double ell : opt.length_scales)
    for (double f : opt.variance_factors) {
      GpHyperparams hp{ell, f * var, opt.noise_ratio * f * var};
      const double lml = gp_condition(obs, hp, opt).log_marginal;
      if (lml > best_lml) {
        best_lml = lml;
        best = hp;
      }
    }
  return best;
}

std::vector<double> gp_predict(const GpModel& m, const std::vector<Vec3>& queries) {
  std::vector<double> out;
  out.reserve(queries.size());
  for (const auto& q : queries) {
    double v = m.mean;
    for (std::size_t i = 0; i < m.train.size(); ++i) v += rbf(m.hp, q, m.train.points[i]) * m.alpha[i];
    out.push_back(v);
  }
  return out;
}

std::vector<double> gp_predict(const Observations& obs, const GpHyperparams& hp, const std::vector<Vec3>& queries,
                               const GpOptions& opt) {
  return gp_predict(gp_condition(obs, hp, opt), queries);
}

// ---------------------------------------------------------------------------
// Autoencoder
// ---------------------------------------------------------------------------

nn::ArchSpec autoencoder_arch(const nn::ArchSpec& base) {
  nn::ArchSpec a = base;
  a.attention = false;
  return a;
}

double autoencoder_pair_loss(nn::DualTxModel& model, const GridSample& g_i, const GridSample& g_j,
                             const VoxelTargets& t_i, const VoxelTargets& t_j, bool accumulate) {
  double total = 0.0;
  const GridSample* gs[2] = {&g_i, &g_j};
  const VoxelTargets* ts[2] = {&t_i, &t_j};
  for (int s = 0; s < 2; ++s) {
    if (ts[s]->empty()) continue;
    nn::EncoderTrace et;
    nn::DecoderTrace dt;
    const nn::Encoded code = nn::encode(model.target_encoder, nn::to_tensor(*gs[s]), accumulate ? &et : nullptr);
    const nn::Tensor y = nn::decode(model.decoder_i, code, accumulate ? &dt : nullptr);
    nn::Tensor g;
    total += nn::mse_at(y, ts[s]->voxels, ts[s]->values, accumulate ? &g : nullptr);
    if (accumulate) {
      const nn::Encoded gc = nn::backward(model.decoder_i, dt, g);
      nn::backward(model.target_encoder, et, gc.z, gc.skips);
    }
  }
  return total;
}

AutoencoderResult train_autoencoder(const Benchmark& bench, const TrainConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  AutoencoderResult r{nn::DualTxModel::create(autoencoder_arch(cfg.arch), bench.norm(),
                                              derive_seed(cfg.seed, "autoencoder")),
                      {}};
  r.report.stage = "autoencoder";
  std::vector<nn::Param*> ps = r.model.target_encoder.params();
  for (auto* p : r.model.decoder_i.params()) ps.push_back(p);
  nn::AdamConfig ac;
  ac.lr = cfg.autoencoder_lr;
  ac.beta1 = cfg.beta1;
  ac.beta2 = cfg.beta2;
  nn::Adam opt(ps, ac);

  std::vector<std::array<GridSample, 2>> inputs;
  std::vector<std::array<VoxelTargets, 2>> targets;
  for (std::size_t k = 0; k < bench.pairs.size(); ++k) {
    const PairData& p = bench.pairs[k];
    inputs.push_back({ground_input(bench, p, 0), ground_input(bench, p, 1)});
    targets.push_back({aerial_targets(p.aerial_i, p.grid, bench.norm()), aerial_targets(p.aerial_j, p.grid, bench.norm())});
    for (int s = 0; s < 2; ++s)
      if (targets[k][s].empty())
        r.report.warnings.push_back("pair " + std::to_string(k) + " stream " + std::to_string(s) +
                                    ": no aerial samples, term skipped");
  }
  for (std::size_t e = 0; e < cfg.autoencoder_epochs; ++e) {
    double total = 0.0;
    for (std::size_t k = 0; k < bench.pairs.size(); ++k) {
      opt.zero_grad();
      total += autoencoder_pair_loss(r.model, inputs[k][0], inputs[k][1], targets[k][0], targets[k][1], true);
      opt.step();
    }
    const double loss = total / static_cast<double>(bench.pairs.size());
    if (!std::isfinite(loss)) throw DivergenceError("autoencoder: loss is not finite");
    r.report.losses.push_back(loss);
  }
  r.report.checksum = nn::checksum(r.model.params());
  r.report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace g2a
