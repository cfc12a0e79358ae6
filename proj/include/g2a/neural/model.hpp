#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "g2a/datasets.hpp"
#include "g2a/neural/layers.hpp"

namespace g2a::nn {

/// Architecture descriptor shared by every encoder/decoder copy.
struct ArchSpec {
  std::size_t depth = 3;
  std::size_t base_channels = 16;
  std::size_t in_channels = 2;
  bool attention = true;
  std::size_t norm_groups = 0;  // 0 disables GroupNorm
  std::size_t disc_hidden = 64;
  std::size_t cbam_reduction = 4;

  std::size_t channels(std::size_t level) const { return base_channels << level; }
  std::size_t bottleneck_channels() const { return channels(depth); }
  std::string descriptor() const;
  static ArchSpec parse(const std::string& descriptor);
  void validate() const;

  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

/// conv3 -> [group norm] -> relu
struct ConvBlock {
  Conv3 conv;
  GroupNorm norm;
  bool normalized = false;

  ConvBlock() = default;
  ConvBlock(const std::string& name, std::size_t in, std::size_t out, std::size_t groups);
  void init(Rng& rng) { conv.init(rng); }
  void collect(std::vector<Param*>& out);
};

struct ConvBlockTrace {
  Tensor input;
  GroupNormTrace norm;
  Tensor output;
};

Tensor forward(const ConvBlock& block, const Tensor& x, ConvBlockTrace* trace);
Tensor backward(ConvBlock& block, const ConvBlockTrace& trace, const Tensor& gy, bool need_input_grad = true);

// --- encoder ----------------------------------------------------------------

struct Encoder {
  ArchSpec arch;
  std::vector<ConvBlock> blocks;  // one per level
  std::vector<Down2> downs;
  ConvBlock bottleneck;
  Cbam attention;

  Encoder() = default;
  Encoder(const std::string& prefix, const ArchSpec& arch);
  void init(Rng& rng);
  std::vector<Param*> params();
};

struct Encoded {
  Tensor z;
  std::vector<Tensor> skips;  // level 0 first
};

struct EncoderTrace {
  std::vector<ConvBlockTrace> blocks;
  std::vector<Tensor> down_out;  // post-relu
  ConvBlockTrace bottleneck;
  CbamTrace attention;
};

Encoded encode(const Encoder& enc, const Tensor& x, EncoderTrace* trace = nullptr);
/// Accumulates parameter gradients. `gskips` may be empty (treated as zero).
Tensor backward(Encoder& enc, const EncoderTrace& trace, const Tensor& gz, const std::vector<Tensor>& gskips,
                bool need_input_grad = false);

// --- decoder ----------------------------------------------------------------

struct Decoder {
  ArchSpec arch;
  std::vector<ConvBlock> blocks;  // indexed by level
  std::vector<Cbam> attention;  // empty when arch.attention is off
  Pointwise head;

  Decoder() = default;
  Decoder(const std::string& prefix, const ArchSpec& arch);
  void init(Rng& rng);
  std::vector<Param*> params();
};

struct DecoderTrace {
  std::vector<ConvBlockTrace> blocks;
  std::vector<CbamTrace> attention;
  Tensor head_in;
};

/// Single-channel output with the input's spatial shape.
Tensor decode(const Decoder& dec, const Encoded& code, DecoderTrace* trace = nullptr);
/// Returns the gradients w.r.t. Z and each skip.
Encoded backward(Decoder& dec, const DecoderTrace& trace, const Tensor& gy, bool need_input_grad = true);

// --- discriminator ----------------------------------------------------------

struct Discriminator {
  Linear fc1, fc2;

  Discriminator() = default;
  Discriminator(const std::string& prefix, std::size_t channels, std::size_t hidden);
  void init(Rng& rng);
  std::vector<Param*> params();
};

struct DiscriminatorTrace {
  Shape z_shape;
  Tensor pooled, hidden;
};

/// Logits (N, 1) from globally pooled bottleneck features.
Tensor discriminator_logits(const Discriminator& d, const Tensor& z, DiscriminatorTrace* trace = nullptr);
Tensor backward(Discriminator& d, const DiscriminatorTrace& trace, const Tensor& glogits);
/// Probability that each batch element came from the source domain.
std::vector<double> discriminate(const Discriminator& d, const Tensor& z);

// --- full model ---------------------------------------------------------------

struct DualTxModel {
  ArchSpec arch;
  NormWindow norm;
  Encoder source_encoder, target_encoder;
  Decoder decoder_i, decoder_j;
  Discriminator discriminator;

  static DualTxModel create(const ArchSpec& arch, const NormWindow& norm, std::uint64_t seed);

  Encoder& encoder(bool target) { return target ? target_encoder : source_encoder; }
  const Encoder& encoder(bool target) const { return target ? target_encoder : source_encoder; }
  Decoder& decoder(int which) { return which == 0 ? decoder_i : decoder_j; }
  const Decoder& decoder(int which) const { return which == 0 ? decoder_i : decoder_j; }

  /// Every parameter in a fixed order.
  std::vector<Param*> params();
  std::vector<const Param*> params() const;
};

/// Stacks grid samples into (N, 2, Z, Y, X). All samples must share a grid.
Tensor to_tensor(const std::vector<const GridSample*>& samples);
Tensor to_tensor(const GridSample& sample);

/// X̂_i through decoder_i and X̂_j through decoder_j, both via the source or
/// target encoder.
std::pair<Tensor, Tensor> forward_dual(const DualTxModel& model, const GridSample& x_i, const GridSample& x_j,
                                       bool target_encoder);

/// FNV-1a over the raw bytes of the given parameters.
std::uint64_t checksum(const std::vector<const Param*>& params);
std::uint64_t checksum(std::vector<Param*> params);

// --- checkpoints ------------------------------------------------------------

void write_checkpoint(const DualTxModel& model, std::ostream& os);
/// Throws FormatError on a malformed stream or if the stored descriptor
/// differs from `expected`.
DualTxModel read_checkpoint(std::istream& is, const ArchSpec& expected);
DualTxModel read_checkpoint(std::istream& is);
void save_checkpoint(const DualTxModel& model, const std::filesystem::path& path);
DualTxModel load_checkpoint(const std::filesystem::path& path, const ArchSpec& expected);
DualTxModel load_checkpoint(const std::filesystem::path& path);

}  // namespace g2a::nn
