#pragma once

// Differentiable primitives with hand-written backward passes. Forward
// functions never touch parameter state; backward functions accumulate into
// Param::grad and return the input gradient.

#include <string>
#include <vector>

#include "g2a/neural/tensor.hpp"

namespace g2a::nn {

// --- convolutions -----------------------------------------------------------

/// 3x3x3 convolution, stride 1, zero padding 1. weight: [27][cout][cin].
struct Conv3 {
  std::size_t cin = 0, cout = 0;
  Param weight, bias;

  Conv3() = default;
  Conv3(const std::string& name, std::size_t in, std::size_t out);
  void init(Rng& rng);
};

Tensor forward(const Conv3& layer, const Tensor& x);
Tensor backward(Conv3& layer, const Tensor& x, const Tensor& gy, bool need_input_grad = true);

/// 2x2x2 convolution with stride 2. weight: [8][cout][cin].
struct Down2 {
  std::size_t cin = 0, cout = 0;
  Param weight, bias;

  Down2() = default;
  Down2(const std::string& name, std::size_t in, std::size_t out);
  void init(Rng& rng);
};

Tensor forward(const Down2& layer, const Tensor& x);
Tensor backward(Down2& layer, const Tensor& x, const Tensor& gy, bool need_input_grad = true);

/// 1x1x1 convolution. weight: [cout][cin].
struct Pointwise {
  std::size_t cin = 0, cout = 0;
  Param weight, bias;

  Pointwise() = default;
  Pointwise(const std::string& name, std::size_t in, std::size_t out);
  void init(Rng& rng);
};

Tensor forward(const Pointwise& layer, const Tensor& x);
Tensor backward(Pointwise& layer, const Tensor& x, const Tensor& gy, bool need_input_grad = true);

/// Fully connected layer on (N, F). weight: [out][in].
struct Linear {
  std::size_t in = 0, out = 0;
  Param weight, bias;

  Linear() = default;
  Linear(const std::string& name, std::size_t fan_in, std::size_t fan_out);
  void init(Rng& rng);
};

Tensor forward(const Linear& layer, const Tensor& x);
Tensor backward(Linear& layer, const Tensor& x, const Tensor& gy);

// --- normalization ----------------------------------------------------------

/// Group normalization over (channels in group) x voxels, per sample, with a
/// per-channel affine transform.
struct GroupNorm {
  std::size_t channels = 0, groups = 1;
  double eps = 1e-5;
  Param gamma, beta;

  GroupNorm() = default;
  GroupNorm(const std::string& name, std::size_t channels, std::size_t groups);
};

struct GroupNormTrace {
  Tensor xhat;
  std::vector<double> rstd;  // per (n, group)
};

Tensor forward(const GroupNorm& layer, const Tensor& x, GroupNormTrace* trace);
Tensor backward(GroupNorm& layer, const GroupNormTrace& trace, const Tensor& gy);

// --- parameter-free ops -----------------------------------------------------

Tensor relu(const Tensor& x);
/// Gradient through relu given its *output* y.
Tensor relu_backward(const Tensor& y, const Tensor& gy);

inline double sigmoid(double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); }
/// log(1 + exp(v)) without overflow.
inline double softplus(double v) { return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }

/// Nearest-neighbour x2 upsampling of every spatial axis.
Tensor upsample2(const Tensor& x);
Tensor upsample2_backward(const Tensor& gy);

Tensor concat_channels(const Tensor& a, const Tensor& b);
/// Splits a channel gradient into the first `ca` channels and the rest.
std::pair<Tensor, Tensor> split_channels(const Tensor& g, std::size_t ca);

/// (N, C, Z, Y, X) -> (N, C) mean over voxels.
Tensor global_avg_pool(const Tensor& x);
Tensor global_avg_pool_backward(const Tensor& gy, const Shape& input_shape);

// --- attention --------------------------------------------------------------

/// Convolutional block attention: channel gate from avg/max-pooled
/// descriptors through a shared bottleneck MLP, then a spatial gate from
/// channel-wise avg/max maps through one 3x3x3 convolution.
struct Cbam {
  std::size_t channels = 0, hidden = 0;
  Param fc1_w, fc1_b;  // [hidden][channels]
  Param fc2_w, fc2_b;  // [channels][hidden]
  Conv3 spatial;  // 2 -> 1

  Cbam() = default;
  Cbam(const std::string& name, std::size_t channels, std::size_t reduction);
  void init(Rng& rng);
};

struct CbamTrace {
  Tensor input;
  std::vector<double> avg, max;  // (N, C)
  std::vector<std::size_t> max_at;  // voxel of the channel max
  std::vector<double> h_avg, h_max;  // (N, hidden), post-relu
  std::vector<double> gate_c;  // (N, C)
  Tensor scaled;  // input * gate_c
  Tensor pooled;  // (N, 2, ...) channel mean / max of `scaled`
  std::vector<std::size_t> pooled_max_at;  // channel of the voxel max
  Tensor gate_s;  // (N, 1, ...)
};

Tensor forward(const Cbam& layer, const Tensor& x, CbamTrace* trace);
Tensor backward(Cbam& layer, const CbamTrace& trace, const Tensor& gy);

// --- losses -----------------------------------------------------------------

/// Mean squared error over every voxel of a single-channel prediction.
double mse_full(const Tensor& pred, std::span<const double> target, Tensor* grad);

/// Mean squared error at selected flat voxel indices of sample 0.
double mse_at(const Tensor& pred, std::span<const std::size_t> voxels, std::span<const double> target,
              Tensor* grad);

/// Mean of -log sigmoid(l) (label 1) or -log(1 - sigmoid(l)) (label 0) over
/// the batch of logits (N, 1).
double bce_with_logits(const Tensor& logits, bool label, Tensor* grad);

}  // namespace g2a::nn
