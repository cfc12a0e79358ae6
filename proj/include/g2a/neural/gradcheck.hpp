#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace g2a::nn {

/// One array under test: its values (perturbed in place, then restored) and
/// the analytic gradient computed beforehand.
struct GradBlock {
  std::string name;
  std::span<double> values;
  std::span<const double> analytic;
};

struct GradCheckOptions {
  double epsilon = 1e-6;
  std::size_t probes_per_block = 32;  // blocks this small are checked exhaustively
  std::uint64_t seed = 1;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_block;
  std::size_t probes = 0;
};

/// Central differences of `loss` at seeded probe entries of every block.
/// Per block the error is ||a - n|| / max(||a|| + ||n||, 1e-8) over the
/// probed entries; the result is the maximum over blocks.
GradCheckResult grad_check(const std::function<double()>& loss, const std::vector<GradBlock>& blocks,
                           const GradCheckOptions& options = {});

}  // namespace g2a::nn
