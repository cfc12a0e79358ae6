#include "g2a/neural/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "g2a/common.hpp"

namespace g2a::nn {

GradCheckResult grad_check(const std::function<double()>& loss, const std::vector<GradBlock>& blocks,
                           const GradCheckOptions& options) {
  if (!(options.epsilon >= 1e-7 && options.epsilon <= 1e-3))
    throw ConfigError("grad_check: epsilon must be in [1e-7, 1e-3]");
  GradCheckResult result;
  Rng rng(derive_seed(options.seed, "gradcheck"));
  for (const GradBlock& b : blocks) {
    if (b.values.size() != b.analytic.size()) throw ShapeError("grad_check: block '" + b.name + "' size mismatch");
    std::vector<std::size_t> idx(b.values.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (idx.size() > options.probes_per_block) {
      for (std::size_t i = 0; i < options.probes_per_block; ++i)
        std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
      idx.resize(options.probes_per_block);
    }
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i : idx) {
      const double saved = b.values[i];
      b.values[i] = saved + options.epsilon;
      const double up = loss();
      b.values[i] = saved - options.epsilon;
      const double down = loss();
      b.values[i] = saved;
      const double numeric = (up - down) / (2.0 * options.epsilon);
      const double analytic = b.analytic[i];
      diff2 += (analytic - numeric) * (analytic - numeric);
      a2 += analytic * analytic;
      n2 += numeric * numeric;
    }
    result.probes += idx.size();
    const double err = std::sqrt(diff2) / std::max(std::sqrt(a2) + std::sqrt(n2), 1e-8);
    if (result.worst_block.empty() || err > result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_block = b.name;
    }
  }
  return result;
}

}  // namespace g2a::nn
