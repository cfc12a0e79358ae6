#include "g2a/neural/model.hpp"

#include <fstream>
#include <map>
#include <sstream>

namespace g2a::nn {

// ---------------------------------------------------------------------------
// ArchSpec
// ---------------------------------------------------------------------------

std::string ArchSpec::descriptor() const {
  std::ostringstream os;
  os << "depth=" << depth << ";base=" << base_channels << ";in=" << in_channels << ";cbam=" << (attention ? 1 : 0)
     << ";groups=" << norm_groups << ";disc=" << disc_hidden << ";reduction=" << cbam_reduction;
  return os.str();
}

ArchSpec ArchSpec::parse(const std::string& descriptor) {
  std::map<std::string, std::size_t> kv;
  std::istringstream is(descriptor);
  std::string item;
  while (std::getline(is, item, ';')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw FormatError("architecture descriptor: malformed item '" + item + "'");
    kv[item.substr(0, eq)] =
        static_cast<std::size_t>(parse_int(std::string_view(item).substr(eq + 1), item.substr(0, eq), 0));
  }
  auto take = [&](const char* key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError(std::string("architecture descriptor: missing ") + key);
    return it->second;
  };
  ArchSpec a;
  a.depth = take("depth");
  a.base_channels = take("base");
  a.in_channels = take("in");
  a.attention = take("cbam") != 0;
  a.norm_groups = take("groups");
  a.disc_hidden = take("disc");
  a.cbam_reduction = take("reduction");
  a.validate();
  return a;
}

void ArchSpec::validate() const {
  if (depth < 1 || depth > 6) throw ConfigError("arch.depth must be in [1, 6]");
  if (base_channels < 1) throw ConfigError("arch.base_channels must be >= 1");
  if (in_channels < 1) throw ConfigError("arch.in_channels must be >= 1");
  if (disc_hidden < 1) throw ConfigError("arch.disc_hidden must be >= 1");
  if (cbam_reduction < 1) throw ConfigError("arch.cbam_reduction must be >= 1");
  if (norm_groups > 0 && base_channels % norm_groups)
    throw ConfigError("arch.norm_groups must divide arch.base_channels");
}

// ---------------------------------------------------------------------------
// ConvBlock
// ---------------------------------------------------------------------------

ConvBlock::ConvBlock(const std::string& name, std::size_t in, std::size_t out, std::size_t groups)
    : conv(name + ".conv", in, out), normalized(groups > 0) {
  if (normalized) norm = GroupNorm(name + ".norm", out, groups);
}

void ConvBlock::collect(std::vector<Param*>& out) {
  out.push_back(&conv.weight);
  out.push_back(&conv.bias);
  if (normalized) {
    out.push_back(&norm.gamma);
    out.push_back(&norm.beta);
  }
}

Tensor forward(const ConvBlock& block, const Tensor& x, ConvBlockTrace* trace) {
  Tensor h = forward(block.conv, x);
  if (block.normalized) h = forward(block.norm, h, trace ? &trace->norm : nullptr);
  Tensor y = relu(h);
  if (trace) {
    trace->input = x;
    trace->output = y;
  }
  return y;
}

Tensor backward(ConvBlock& block, const ConvBlockTrace& trace, const Tensor& gy, bool need_input_grad) {
  Tensor g = relu_backward(trace.output, gy);
  if (block.normalized) g = backward(block.norm, trace.norm, g);
  return backward(block.conv, trace.input, g, need_input_grad);
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

Encoder::Encoder(const std::string& prefix, const ArchSpec& a) : arch(a) {
  arch.validate();
  for (std::size_t l = 0; l < arch.depth; ++l) {
    const std::size_t in = l == 0 ? arch.in_channels : arch.channels(l);
    blocks.emplace_back(prefix + ".block" + std::to_string(l), in, arch.channels(l), arch.norm_groups);
    downs.emplace_back(prefix + ".down" + std::to_string(l), arch.channels(l), arch.channels(l + 1));
  }
  bottleneck = ConvBlock(prefix + ".bottleneck", arch.bottleneck_channels(), arch.bottleneck_channels(),
                         arch.norm_groups);
  if (arch.attention) attention = Cbam(prefix + ".bottleneck_cbam", arch.bottleneck_channels(), arch.cbam_reduction);
}

void Encoder::init(Rng& rng) {
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    blocks[l].init(rng);
    downs[l].init(rng);
  }
  bottleneck.init(rng);
  if (arch.attention) attention.init(rng);
}

namespace {

void collect_cbam(Cbam& c, std::vector<Param*>& out) {
  for (Param* p : {&c.fc1_w, &c.fc1_b, &c.fc2_w, &c.fc2_b, &c.spatial.weight, &c.spatial.bias}) out.push_back(p);
}

}  // namespace

std::vector<Param*> Encoder::params() {
  std::vector<Param*> out;
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    blocks[l].collect(out);
    out.push_back(&downs[l].weight);
    out.push_back(&downs[l].bias);
  }
  bottleneck.collect(out);
  if (arch.attention) collect_cbam(attention, out);
  return out;
}

Encoded encode(const Encoder& enc, const Tensor& x, EncoderTrace* trace) {
  const std::size_t factor = std::size_t{1} << enc.arch.depth;
  if (x.rank() != 5 || x.channels() != enc.arch.in_channels)
    throw ShapeError("encode: expected (N, " + std::to_string(enc.arch.in_channels) + ", Z, Y, X), got " +
                     shape_string(x.shape()));
  for (int a = 2; a < 5; ++a)
    if (x.dim(a) % factor)
      throw ShapeError("encode: spatial dims " + shape_string(x.shape()) + " not divisible by " +
                       std::to_string(factor));
  if (trace) {
    trace->blocks.assign(enc.arch.depth, {});
    trace->down_out.assign(enc.arch.depth, {});
  }
  Encoded out;
  Tensor h = x;
  for (std::size_t l = 0; l < enc.arch.depth; ++l) {
    Tensor s = forward(enc.blocks[l], h, trace ? &trace->blocks[l] : nullptr);
    h = relu(forward(enc.downs[l], s));
    if (trace) trace->down_out[l] = h;
    out.skips.push_back(std::move(s));
  }
  h = forward(enc.bottleneck, h, trace ? &trace->bottleneck : nullptr);
  if (enc.arch.attention) h = forward(enc.attention, h, trace ? &trace->attention : nullptr);
  out.z = std::move(h);
  return out;
}

Tensor backward(Encoder& enc, const EncoderTrace& trace, const Tensor& gz, const std::vector<Tensor>& gskips,
                bool need_input_grad) {
  Tensor g = enc.arch.attention ? backward(enc.attention, trace.attention, gz) : gz;
  g = backward(enc.bottleneck, trace.bottleneck, g);
  for (std::size_t l = enc.arch.depth; l-- > 0;) {
    g = relu_backward(trace.down_out[l], g);
    g = backward(enc.downs[l], trace.blocks[l].output, g);
    if (!gskips.empty() && gskips[l].size()) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gskips[l][i];
    }
    g = backward(enc.blocks[l], trace.blocks[l], g, l > 0 || need_input_grad);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

Decoder::Decoder(const std::string& prefix, const ArchSpec& a) : arch(a) {
  arch.validate();
  for (std::size_t l = 0; l < arch.depth; ++l) {
    blocks.emplace_back(prefix + ".block" + std::to_string(l), arch.channels(l + 1) + arch.channels(l),
                        arch.channels(l), arch.norm_groups);
    if (arch.attention) attention.emplace_back(prefix + ".cbam" + std::to_string(l), arch.channels(l), arch.cbam_reduction);
  }
  head = Pointwise(prefix + ".head", arch.channels(0), 1);
}

void Decoder::init(Rng& rng) {
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    blocks[l].init(rng);
    if (arch.attention) attention[l].init(rng);
  }
  head.init(rng);
}

std::vector<Param*> Decoder::params() {
  std::vector<Param*> out;
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    blocks[l].collect(out);
    if (arch.attention) collect_cbam(attention[l], out);
  }
  out.push_back(&head.weight);
  out.push_back(&head.bias);
  return out;
}

Tensor decode(const Decoder& dec, const Encoded& code, DecoderTrace* trace) {
  if (code.skips.size() != dec.arch.depth)
    throw ShapeError("decode: expected " + std::to_string(dec.arch.depth) + " skip tensors, got " +
                     std::to_string(code.skips.size()));
  if (code.z.rank() != 5 || code.z.channels() != dec.arch.bottleneck_channels())
    throw ShapeError("decode: bottleneck shape " + shape_string(code.z.shape()));
  if (trace) {
    trace->blocks.assign(dec.arch.depth, {});
    trace->attention.assign(dec.arch.attention ? dec.arch.depth : 0, {});
  }
  Tensor h = code.z;
  for (std::size_t l = dec.arch.depth; l-- > 0;) {
    const Tensor& skip = code.skips[l];
    if (skip.rank() != 5 || skip.channels() != dec.arch.channels(l) || skip.dim(2) != 2 * h.dim(2) ||
        skip.dim(3) != 2 * h.dim(3) || skip.dim(4) != 2 * h.dim(4))
      throw ShapeError("decode: skip " + std::to_string(l) + " has shape " + shape_string(skip.shape()) +
                       ", inconsistent with " + shape_string(h.shape()));
    h = forward(dec.blocks[l], concat_channels(upsample2(h), skip), trace ? &trace->blocks[l] : nullptr);
    if (dec.arch.attention) h = forward(dec.attention[l], h, trace ? &trace->attention[l] : nullptr);
  }
  if (trace) trace->head_in = h;
  return forward(dec.head, h);
}

Encoded backward(Decoder& dec, const DecoderTrace& trace, const Tensor& gy, bool need_input_grad) {
  Encoded grads;
  grads.skips.resize(dec.arch.depth);
  Tensor g = backward(dec.head, trace.head_in, gy, true);
  for (std::size_t l = 0; l < dec.arch.depth; ++l) {
    if (dec.arch.attention) g = backward(dec.attention[l], trace.attention[l], g);
    const bool last = l + 1 == dec.arch.depth;
    Tensor gc = backward(dec.blocks[l], trace.blocks[l], g, need_input_grad || !last);
    if (!need_input_grad && last) break;
    auto [gup, gskip] = split_channels(gc, dec.arch.channels(l + 1));
    grads.skips[l] = std::move(gskip);
    g = upsample2_backward(gup);
  }
  if (need_input_grad) grads.z = std::move(g);
  return grads;
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

Discriminator::Discriminator(const std::string& prefix, std::size_t channels, std::size_t hidden)
    : fc1(prefix + ".fc1", channels, hidden), fc2(prefix + ".fc2", hidden, 1) {}

void Discriminator::init(Rng& rng) {
  fc1.init(rng);
  fc2.init(rng);
}

std::vector<Param*> Discriminator::params() { return {&fc1.weight, &fc1.bias, &fc2.weight, &fc2.bias}; }

Tensor discriminator_logits(const Discriminator& d, const Tensor& z, DiscriminatorTrace* trace) {
  Tensor pooled = global_avg_pool(z);
  Tensor hidden = relu(forward(d.fc1, pooled));
  Tensor logits = forward(d.fc2, hidden);
  if (trace) {
    trace->z_shape = z.shape();
    trace->pooled = std::move(pooled);
    trace->hidden = std::move(hidden);
  }
  return logits;
}

Tensor backward(Discriminator& d, const DiscriminatorTrace& trace, const Tensor& glogits) {
  Tensor g = backward(d.fc2, trace.hidden, glogits);
  g = backward(d.fc1, trace.pooled, relu_backward(trace.hidden, g));
  return global_avg_pool_backward(g, trace.z_shape);
}

std::vector<double> discriminate(const Discriminator& d, const Tensor& z) {
  const Tensor logits = discriminator_logits(d, z);
  std::vector<double> p(logits.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = sigmoid(logits[i]);
  return p;
}

// ---------------------------------------------------------------------------
// DualTxModel
// ---------------------------------------------------------------------------

DualTxModel DualTxModel::create(const ArchSpec& arch, const NormWindow& norm, std::uint64_t seed) {
  DualTxModel m;
  m.arch = arch;
  m.norm = norm;
  m.source_encoder = Encoder("enc_s", arch);
  m.target_encoder = Encoder("enc_t", arch);
  m.decoder_i = Decoder("dec_i", arch);
  m.decoder_j = Decoder("dec_j", arch);
  m.discriminator = Discriminator("disc", arch.bottleneck_channels(), arch.disc_hidden);
  Rng rng(derive_seed(seed, "model.init"));
  m.source_encoder.init(rng);
  m.target_encoder.init(rng);
  m.decoder_i.init(rng);
  m.decoder_j.init(rng);
  m.discriminator.init(rng);
  return m;
}

std::vector<Param*> DualTxModel::params() {
  std::vector<Param*> out;
  for (auto* group : {&source_encoder, &target_encoder}) {
    auto p = group->params();
    out.insert(out.end(), p.begin(), p.end());
  }
  for (auto* group : {&decoder_i, &decoder_j}) {
    auto p = group->params();
    out.insert(out.end(), p.begin(), p.end());
  }
  auto p = discriminator.params();
  out.insert(out.end(), p.begin(), p.end());
  return out;
}

std::vector<const Param*> DualTxModel::params() const {
  auto ps = const_cast<DualTxModel*>(this)->params();
  return {ps.begin(), ps.end()};
}

Tensor to_tensor(const std::vector<const GridSample*>& samples) {
  if (samples.empty()) throw ShapeError("to_tensor: no samples");
  const GridSpec& g = samples.front()->grid;
  const std::size_t V = g.size();
  Tensor t({samples.size(), 2, g.dims[2], g.dims[1], g.dims[0]});
  for (std::size_t n = 0; n < samples.size(); ++n) {
    const GridSample& s = *samples[n];
    if (!(s.grid == g)) throw ShapeError("to_tensor: samples do not share a grid");
    if (s.value.size() != V || s.mask.size() != V) throw ShapeError("to_tensor: sample size does not match grid");
    std::copy(s.value.begin(), s.value.end(), t.channel(n, 0));
    std::copy(s.mask.begin(), s.mask.end(), t.channel(n, 1));
  }
  return t;
}

Tensor to_tensor(const GridSample& sample) { return to_tensor(std::vector<const GridSample*>{&sample}); }

std::pair<Tensor, Tensor> forward_dual(const DualTxModel& model, const GridSample& x_i, const GridSample& x_j,
                                       bool target_encoder) {
  if (!(x_i.grid == x_j.grid)) throw ShapeError("forward_dual: streams do not share a grid");
  const Encoder& enc = model.encoder(target_encoder);
  Tensor yi = decode(model.decoder_i, encode(enc, to_tensor(x_i)));
  Tensor yj = decode(model.decoder_j, encode(enc, to_tensor(x_j)));
  return {std::move(yi), std::move(yj)};
}

std::uint64_t checksum(const std::vector<const Param*>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const Param* p : params) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p->value.data());
    for (std::size_t i = 0; i < p->value.size() * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

std::uint64_t checksum(std::vector<Param*> params) { return checksum(std::vector<const Param*>(params.begin(), params.end())); }

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr std::uint16_t kCheckpointVersion = 1;

void write_string(std::ostream& os, const std::string& s) {
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is, std::size_t limit) {
  const auto n = read_le<std::uint32_t>(is);
  if (n > limit) throw FormatError("checkpoint: string length " + std::to_string(n) + " exceeds limit");
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw FormatError("checkpoint: truncated string");
  return s;
}

}  // namespace

void write_checkpoint(const DualTxModel& model, std::ostream& os) {
  os.write("DTXM", 4);
  write_le<std::uint16_t>(os, kCheckpointVersion);
  write_string(os, model.arch.descriptor());
  write_le<double>(os, model.norm.lo);
  write_le<double>(os, model.norm.hi);
  const auto params = model.params();
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const Param* p : params) {
    write_string(os, p->name);
    write_le<std::uint64_t>(os, p->value.size());
    for (double v : p->value) write_le<double>(os, v);
  }
  if (!os) throw Error("checkpoint: write failed");
}

DualTxModel read_checkpoint(std::istream& is) {
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::string_view(magic, 4) != "DTXM") throw FormatError("checkpoint: bad magic");
  if (read_le<std::uint16_t>(is) != kCheckpointVersion) throw FormatError("checkpoint: unsupported version");
  const ArchSpec arch = ArchSpec::parse(read_string(is, 4096));
  NormWindow norm;
  norm.lo = read_le<double>(is);
  norm.hi = read_le<double>(is);
  if (!(norm.hi > norm.lo)) throw FormatError("checkpoint: invalid normalization window");
  DualTxModel model = DualTxModel::create(arch, norm, 0);
  auto params = model.params();
  const auto count = read_le<std::uint32_t>(is);
  if (count != params.size())
    throw FormatError("checkpoint: expected " + std::to_string(params.size()) + " parameter blocks, found " +
                      std::to_string(count));
  for (Param* p : params) {
    const std::string name = read_string(is, 1024);
    if (name != p->name) throw FormatError("checkpoint: expected block '" + p->name + "', found '" + name + "'");
    const auto n = read_le<std::uint64_t>(is);
    if (n != p->value.size()) throw FormatError("checkpoint: block '" + name + "' has wrong length");
    for (auto& v : p->value) v = read_le<double>(is);
    p->zero_grad();
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("checkpoint: trailing bytes");
  return model;
}

DualTxModel read_checkpoint(std::istream& is, const ArchSpec& expected) {
  DualTxModel m = read_checkpoint(is);
  if (!(m.arch == expected))
    throw FormatError("checkpoint: architecture '" + m.arch.descriptor() + "' does not match expected '" +
                      expected.descriptor() + "'");
  return m;
}

void save_checkpoint(const DualTxModel& model, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  write_checkpoint(model, os);
}

DualTxModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifactError("cannot open checkpoint " + path.string());
  return read_checkpoint(is);
}

DualTxModel load_checkpoint(const std::filesystem::path& path, const ArchSpec& expected) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifactError("cannot open checkpoint " + path.string());
  return read_checkpoint(is, expected);
}

}  // namespace g2a::nn
