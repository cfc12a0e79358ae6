#include "g2a/config.hpp"

#include <fstream>
#include <map>
#include <sstream>

namespace g2a {

void RunConfig::validate() const {
  bench.validate();
  train.validate();
  eval.validate();
}

void RunConfig::set_seed(std::uint64_t seed) {
  bench.seed = seed;
  train.seed = seed;
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

double to_double(std::string_view v, const std::string& key) {
  try {
    return parse_double(v, key, 0);
  } catch (const FormatError& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

long long to_int(std::string_view v, const std::string& key, long long lo) {
  long long x = 0;
  try {
    x = parse_int(v, key, 0);
  } catch (const FormatError& e) {
    throw ConfigError(key + ": " + e.what());
  }
  if (x < lo) throw ConfigError(key + " must be at least " + std::to_string(lo));
  return x;
}

bool to_bool(std::string_view v, const std::string& key) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw ConfigError(key + ": expected true/false, got '" + std::string(v) + "'");
}

// Field accessors are written against a RunConfig so one table serves both
// parsing and describing.
template <typename T>
using Field = std::function<T&(RunConfig&)>;

template <typename T>
ConfigKey real(std::string key, Field<T> f) {
  return {key, [f](const RunConfig& c) { return format_exact(static_cast<double>(f(const_cast<RunConfig&>(c)))); },
          [f, key](RunConfig& c, std::string_view v) { f(c) = static_cast<T>(to_double(v, key)); }};
}

template <typename T>
ConfigKey integer(std::string key, Field<T> f, long long lo = 0) {
  return {key, [f](const RunConfig& c) { return std::to_string(f(const_cast<RunConfig&>(c))); },
          [f, key, lo](RunConfig& c, std::string_view v) { f(c) = static_cast<T>(to_int(v, key, lo)); }};
}

ConfigKey flag(std::string key, Field<bool> f) {
  return {key, [f](const RunConfig& c) { return std::string(f(const_cast<RunConfig&>(c)) ? "true" : "false"); },
          [f, key](RunConfig& c, std::string_view v) { f(c) = to_bool(v, key); }};
}

#define G2A_FIELD(type, expr) Field<type>([](RunConfig& c) -> type& { return expr; })

std::vector<ConfigKey> build_keys() {
  std::vector<ConfigKey> k;
  // scene
  k.push_back(integer<std::uint64_t>("scene.seed", G2A_FIELD(std::uint64_t, c.bench.seed)));
  k.push_back(real<double>("scene.extent_x", G2A_FIELD(double, c.bench.scene.extent_x)));
  k.push_back(real<double>("scene.extent_y", G2A_FIELD(double, c.bench.scene.extent_y)));
  k.push_back(integer<std::size_t>("scene.building_count", G2A_FIELD(std::size_t, c.bench.scene.building_count)));
  k.push_back(real<double>("scene.building_min_side", G2A_FIELD(double, c.bench.scene.building_min_side)));
  k.push_back(real<double>("scene.building_max_side", G2A_FIELD(double, c.bench.scene.building_max_side)));
  k.push_back(real<double>("scene.building_min_height", G2A_FIELD(double, c.bench.scene.building_min_height)));
  k.push_back(real<double>("scene.building_max_height", G2A_FIELD(double, c.bench.scene.building_max_height)));
  k.push_back(real<double>("scene.street_gap", G2A_FIELD(double, c.bench.scene.street_gap)));
  k.push_back(integer<std::size_t>("scene.transmitter_count", G2A_FIELD(std::size_t, c.bench.scene.transmitter_count)));
  k.push_back(real<double>("scene.mast_min_height", G2A_FIELD(double, c.bench.scene.mast_min_height)));
  k.push_back(real<double>("scene.mast_max_height", G2A_FIELD(double, c.bench.scene.mast_max_height)));
  k.push_back(real<double>("scene.tx_clearance", G2A_FIELD(double, c.bench.scene.tx_clearance)));
  k.push_back(real<double>("scene.tx_power_dbm", G2A_FIELD(double, c.bench.scene.tx_power_dbm)));
  k.push_back(real<double>("scene.frequency_ghz", G2A_FIELD(double, c.bench.scene.frequency_ghz)));
  k.push_back(real<double>("scene.terrain_spacing", G2A_FIELD(double, c.bench.scene.terrain_spacing)));
  k.push_back(real<double>("scene.relief_amplitude", G2A_FIELD(double, c.bench.scene.relief_amplitude)));
  k.push_back(real<double>("scene.relief_wavelength", G2A_FIELD(double, c.bench.scene.relief_wavelength)));
  k.push_back(integer<std::size_t>("scene.retry_budget", G2A_FIELD(std::size_t, c.bench.scene.retry_budget), 1));
  k.push_back(real<double>("scene.cell", G2A_FIELD(double, c.bench.cell)));
  k.push_back(integer<std::uint32_t>("scene.levels", G2A_FIELD(std::uint32_t, c.bench.levels), 1));
  k.push_back(integer<std::uint32_t>("scene.crop_x", G2A_FIELD(std::uint32_t, c.bench.crop[0]), 1));
  k.push_back(integer<std::uint32_t>("scene.crop_y", G2A_FIELD(std::uint32_t, c.bench.crop[1]), 1));
  k.push_back(integer<std::uint32_t>("scene.crop_z", G2A_FIELD(std::uint32_t, c.bench.crop[2]), 1));
  k.push_back(integer<std::size_t>("scene.pairs", G2A_FIELD(std::size_t, c.bench.pairs), 1));
  k.push_back(real<double>("scene.max_pair_distance", G2A_FIELD(double, c.bench.max_pair_distance)));
  // propagation
  k.push_back(real<double>("prop.pl_exponent_los", G2A_FIELD(double, c.bench.source.pl_exponent_los)));
  k.push_back(real<double>("prop.pl_exponent_nlos", G2A_FIELD(double, c.bench.source.pl_exponent_nlos)));
  k.push_back(real<double>("prop.reference_loss", G2A_FIELD(double, c.bench.source.reference_loss)));
  k.push_back(real<double>("prop.wall_penetration", G2A_FIELD(double, c.bench.source.wall_penetration)));
  k.push_back(integer<int>("prop.max_counted_walls", G2A_FIELD(int, c.bench.source.max_counted_walls)));
  k.push_back(real<double>("prop.shadowing_sigma", G2A_FIELD(double, c.bench.source.shadowing_sigma)));
  k.push_back(real<double>("prop.shadowing_corr_len", G2A_FIELD(double, c.bench.source.shadowing_corr_len)));
  k.push_back(real<double>("prop.rsrp_floor", G2A_FIELD(double, c.bench.source.rsrp_floor)));
  // mask
  k.push_back(real<double>("mask.r1", G2A_FIELD(double, c.train.mask.r1)));
  k.push_back(real<double>("mask.r2", G2A_FIELD(double, c.train.mask.r2)));
  k.push_back(real<double>("mask.p_near", G2A_FIELD(double, c.train.mask.p_near)));
  k.push_back(real<double>("mask.p_mid", G2A_FIELD(double, c.train.mask.p_mid)));
  k.push_back(real<double>("mask.p_far", G2A_FIELD(double, c.train.mask.p_far)));
  // training
  k.push_back(integer<std::uint64_t>("train.seed", G2A_FIELD(std::uint64_t, c.train.seed)));
  k.push_back(flag("train.pretrain", G2A_FIELD(bool, c.train.pretrain)));
  k.push_back(flag("train.adda", G2A_FIELD(bool, c.train.adda)));
  k.push_back(flag("train.finetune", G2A_FIELD(bool, c.train.finetune)));
  k.push_back(flag("train.dual_cell", G2A_FIELD(bool, c.train.dual_cell)));
  k.push_back(integer<std::size_t>("train.pretrain_epochs", G2A_FIELD(std::size_t, c.train.pretrain_epochs)));
  k.push_back(integer<std::size_t>("train.adda_epochs", G2A_FIELD(std::size_t, c.train.adda_epochs)));
  k.push_back(integer<std::size_t>("train.disc_warmup_epochs", G2A_FIELD(std::size_t, c.train.disc_warmup_epochs)));
  k.push_back(integer<std::size_t>("train.finetune_epochs", G2A_FIELD(std::size_t, c.train.finetune_epochs)));
  k.push_back(integer<std::size_t>("train.autoencoder_epochs", G2A_FIELD(std::size_t, c.train.autoencoder_epochs)));
  k.push_back(real<double>("train.pretrain_lr", G2A_FIELD(double, c.train.pretrain_lr)));
  k.push_back(real<double>("train.adda_lr", G2A_FIELD(double, c.train.adda_lr)));
  k.push_back(real<double>("train.adda_encoder_lr", G2A_FIELD(double, c.train.adda_encoder_lr)));
  k.push_back(real<double>("train.disc_warmup_lr", G2A_FIELD(double, c.train.disc_warmup_lr)));
  k.push_back(real<double>("train.finetune_lr", G2A_FIELD(double, c.train.finetune_lr)));
  k.push_back(real<double>("train.autoencoder_lr", G2A_FIELD(double, c.train.autoencoder_lr)));
  k.push_back(real<double>("train.beta1", G2A_FIELD(double, c.train.beta1)));
  k.push_back(real<double>("train.beta2", G2A_FIELD(double, c.train.beta2)));
  k.push_back(integer<std::size_t>("train.batch_pairs", G2A_FIELD(std::size_t, c.train.batch_pairs), 1));
  k.push_back(integer<std::size_t>("train.depth", G2A_FIELD(std::size_t, c.train.arch.depth), 1));
  k.push_back(integer<std::size_t>("train.base_channels", G2A_FIELD(std::size_t, c.train.arch.base_channels), 1));
  k.push_back(flag("train.attention", G2A_FIELD(bool, c.train.arch.attention)));
  k.push_back(integer<std::size_t>("train.norm_groups", G2A_FIELD(std::size_t, c.train.arch.norm_groups)));
  k.push_back(integer<std::size_t>("train.disc_hidden", G2A_FIELD(std::size_t, c.train.arch.disc_hidden), 1));
  k.push_back(integer<std::size_t>("train.cbam_reduction", G2A_FIELD(std::size_t, c.train.arch.cbam_reduction), 1));
  // evaluation data and baselines
  k.push_back(integer<std::size_t>("eval.ground_per_cell", G2A_FIELD(std::size_t, c.bench.ground_per_cell), 1));
  k.push_back(real<double>("eval.aerial_ratio", G2A_FIELD(double, c.bench.aerial_ratio)));
  k.push_back(integer<std::size_t>("eval.train_routes", G2A_FIELD(std::size_t, c.bench.train_routes), 1));
  k.push_back(integer<std::size_t>("eval.test_routes", G2A_FIELD(std::size_t, c.bench.test_routes), 1));
  k.push_back(real<double>("eval.route_alt_lo", G2A_FIELD(double, c.bench.route_alt_lo)));
  k.push_back(real<double>("eval.route_alt_hi", G2A_FIELD(double, c.bench.route_alt_hi)));
  k.push_back(real<double>("eval.route_spacing", G2A_FIELD(double, c.bench.route_spacing)));
  k.push_back(real<double>("eval.route_margin", G2A_FIELD(double, c.bench.route_margin)));
  k.push_back(real<double>("eval.norm_lo", G2A_FIELD(double, c.bench.norm.lo)));
  k.push_back(real<double>("eval.norm_hi", G2A_FIELD(double, c.bench.norm.hi)));
  k.push_back(integer<std::size_t>("eval.kriging_neighbors", G2A_FIELD(std::size_t, c.eval.kriging_neighbors)));
  k.push_back(integer<std::size_t>("eval.variogram_bins", G2A_FIELD(std::size_t, c.eval.variogram_bins)));
  k.push_back(integer<std::size_t>("eval.variogram_max_points", G2A_FIELD(std::size_t, c.eval.variogram_max_points)));
  k.push_back(integer<std::size_t>("eval.gp_max_points", G2A_FIELD(std::size_t, c.eval.gp_max_points)));
  k.push_back(real<double>("eval.gp_noise_ratio", G2A_FIELD(double, c.eval.gp_noise_ratio)));
  return k;
}

#undef G2A_FIELD

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = build_keys();
  return keys;
}

RunConfig parse_config(std::istream& is) {
  std::map<std::string, const ConfigKey*> index;
  for (const auto& k : config_keys()) index[k.key] = &k;
  RunConfig c;
  std::map<std::string, std::size_t> seen;
  std::string line;
  for (std::size_t n = 1; std::getline(is, line); ++n) {
    const auto hash = line.find('#');
    const std::string body = trim(line.substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(n) + ": expected key = value");
    const std::string key = trim(body.substr(0, eq));
    const std::string value = trim(body.substr(eq + 1));
    const auto it = index.find(key);
    if (it == index.end()) throw ConfigError("config line " + std::to_string(n) + ": unknown key " + key);
    if (seen.count(key))
      throw ConfigError("config line " + std::to_string(n) + ": " + key + " already set on line " +
                        std::to_string(seen[key]));
    seen[key] = n;
    try {
      it->second->set(c, value);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(n) + ": " + e.what());
    }
  }
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  return parse_config(is);
}

std::string describe(const RunConfig& c) {
  std::ostringstream os;
  for (const auto& k : config_keys()) os << k.key << " = " << k.get(c) << '\n';
  return os.str();
}

std::uint64_t config_digest(const RunConfig& c) { return fnv1a64(describe(c)); }

}  // namespace g2a
