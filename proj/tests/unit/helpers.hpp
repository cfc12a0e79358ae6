#pragma once

#include "g2a/neural/tensor.hpp"

namespace testing {

inline g2a::nn::Tensor random_tensor(g2a::nn::Shape shape, g2a::Rng& rng, double scale = 1.0) {
  g2a::nn::Tensor t(std::move(shape));
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

inline double dot(const g2a::nn::Tensor& a, const g2a::nn::Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline void randomize(g2a::nn::Param& p, g2a::Rng& rng, double scale = 0.5) {
  for (auto& v : p.value) v = scale * rng.normal();
}

}  // namespace testing
