#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "g2a/eval.hpp"
#include "g2a/pipeline.hpp"

namespace g2a {

/// Everything a run depends on. Read from flat `key = value` text whose keys
/// carry a section prefix (scene., prop., mask., train., eval.).
struct RunConfig {
  BenchmarkConfig bench;
  TrainConfig train;
  EvalConfig eval;

  void validate() const;
  /// Overrides both the benchmark and the training seed.
  void set_seed(std::uint64_t seed);
};

struct ConfigKey {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view)> set;  // throws ConfigError naming the key
};

/// Every recognized key in canonical order.
const std::vector<ConfigKey>& config_keys();

/// Starts from defaults; unknown or repeated keys and bad values throw
/// ConfigError with the line number and key.
RunConfig parse_config(std::istream& is);
RunConfig load_config(const std::filesystem::path& path);

/// Canonical `key = value` listing of every key, defaults included.
std::string describe(const RunConfig& c);
std::uint64_t config_digest(const RunConfig& c);

}  // namespace g2a
