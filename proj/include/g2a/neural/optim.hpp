#pragma once

#include <vector>

#include "g2a/neural/tensor.hpp"

namespace g2a::nn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

/// Adam over a fixed parameter list. Parameters not in the list are never
/// written, which is how stages freeze the rest of the model.
class Adam {
 public:
  Adam(std::vector<Param*> params, const AdamConfig& cfg);

  void zero_grad();
  void step();

  double lr() const { return cfg_.lr; }
  void set_lr(double lr) { cfg_.lr = lr; }
  std::size_t steps() const { return t_; }

 private:
  std::vector<Param*> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace g2a::nn
