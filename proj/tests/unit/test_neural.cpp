#include <doctest.h>

#include <sstream>

#include "g2a/neural/gradcheck.hpp"
#include "g2a/neural/model.hpp"
#include "g2a/neural/optim.hpp"
#include "unit/helpers.hpp"

using namespace g2a;
using namespace g2a::nn;
using testing::dot;
using testing::random_tensor;
using testing::randomize;

namespace {

GradBlock block(Param& p) { return {p.name, p.value, p.grad}; }
GradBlock block(const std::string& name, Tensor& t, const Tensor& g) { return {name, t.values(), g.values()}; }

}  // namespace

TEST_CASE("conv3 gradient") {
  Rng rng(11);
  Conv3 conv("c", 3, 4);
  randomize(conv.weight, rng);
  randomize(conv.bias, rng);
  Tensor x = random_tensor({2, 3, 4, 5, 3}, rng);
  const Tensor w = random_tensor({2, 4, 4, 5, 3}, rng);
  const Tensor gx = backward(conv, x, w);
  auto r = grad_check([&] { return dot(forward(conv, x), w); },
                      {block(conv.weight), block(conv.bias), block("x", x, gx)});
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("conv3 matches a direct convolution") {
  Rng rng(3);
  Conv3 conv("c", 2, 3);
  randomize(conv.weight, rng);
  randomize(conv.bias, rng);
  const Tensor x = random_tensor({1, 2, 3, 4, 5}, rng);
  const Tensor y = forward(conv, x);
  const std::size_t Z = 3, Y = 4, X = 5;
  for (std::size_t co = 0; co < 3; ++co)
    for (std::size_t z = 0; z < Z; ++z)
      for (std::size_t yy = 0; yy < Y; ++yy)
        for (std::size_t xx = 0; xx < X; ++xx) {
          double s = conv.bias.value[co];
          for (int k = 0; k < 27; ++k) {
            const long iz = long(z) + k / 9 - 1, iy = long(yy) + (k / 3) % 3 - 1, ix = long(xx) + k % 3 - 1;
            if (iz < 0 || iy < 0 || ix < 0 || iz >= long(Z) || iy >= long(Y) || ix >= long(X)) continue;
            for (std::size_t ci = 0; ci < 2; ++ci)
              s += conv.weight.value[(k * 3 + co) * 2 + ci] * x.channel(0, ci)[(iz * Y + iy) * X + ix];
          }
          CHECK(y.channel(0, co)[(z * Y + yy) * X + xx] == doctest::Approx(s).epsilon(1e-12));
        }
}

TEST_CASE("down2, pointwise and linear gradients") {
  Rng rng(5);
  SUBCASE("down2") {
    Down2 d("d", 3, 5);
    randomize(d.weight, rng);
    randomize(d.bias, rng);
    Tensor x = random_tensor({2, 3, 4, 2, 6}, rng);
    const Tensor w = random_tensor({2, 5, 2, 1, 3}, rng);
    const Tensor gx = backward(d, x, w);
    auto r = grad_check([&] { return dot(forward(d, x), w); }, {block(d.weight), block(d.bias), block("x", x, gx)});
    CHECK(r.max_rel_error < 1e-6);
  }
  SUBCASE("pointwise") {
    Pointwise p("p", 4, 2);
    randomize(p.weight, rng);
    Tensor x = random_tensor({2, 4, 2, 3, 2}, rng);
    const Tensor w = random_tensor({2, 2, 2, 3, 2}, rng);
    const Tensor gx = backward(p, x, w);
    auto r = grad_check([&] { return dot(forward(p, x), w); }, {block(p.weight), block(p.bias), block("x", x, gx)});
    CHECK(r.max_rel_error < 1e-6);
  }
  SUBCASE("linear") {
    Linear l("l", 6, 3);
    randomize(l.weight, rng);
    randomize(l.bias, rng);
    Tensor x = random_tensor({4, 6}, rng);
    const Tensor w = random_tensor({4, 3}, rng);
    const Tensor gx = backward(l, x, w);
    auto r = grad_check([&] { return dot(forward(l, x), w); }, {block(l.weight), block(l.bias), block("x", x, gx)});
    CHECK(r.max_rel_error < 1e-6);
  }
}

TEST_CASE("grad_check detects a corrupted gradient") {
  Rng rng(9);
  Linear l("l", 5, 2);
  randomize(l.weight, rng);
  Tensor x = random_tensor({3, 5}, rng);
  const Tensor w = random_tensor({3, 2}, rng, 0.05);
  backward(l, x, w);
  l.weight.grad[3] += 1e-2;
  auto r = grad_check([&] { return dot(forward(l, x), w); }, {block(l.weight)});
  CHECK(r.max_rel_error > 1e-3);
  CHECK(r.worst_block == "l.weight");
}

TEST_CASE("grad_check rejects epsilon outside its range") {
  double v = 1.0, g = 0.0;
  std::vector<GradBlock> b{{"v", std::span<double>(&v, 1), std::span<const double>(&g, 1)}};
  CHECK_THROWS_AS(grad_check([&] { return v; }, b, {.epsilon = 1e-2}), ConfigError);
  CHECK_THROWS_AS(grad_check([&] { return v; }, b, {.epsilon = 1e-8}), ConfigError);
}

TEST_CASE("group norm gradient") {
  Rng rng(13);
  GroupNorm gn("gn", 4, 2);
  randomize(gn.gamma, rng);
  randomize(gn.beta, rng);
  Tensor x = random_tensor({2, 4, 2, 3, 2}, rng, 2.0);
  const Tensor w = random_tensor({2, 4, 2, 3, 2}, rng);
  GroupNormTrace trace;
  forward(gn, x, &trace);
  const Tensor gx = backward(gn, trace, w);
  auto r = grad_check([&] { return dot(forward(gn, x, nullptr), w); },
                      {block(gn.gamma), block(gn.beta), block("x", x, gx)});
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("parameter-free op gradients") {
  Rng rng(17);
  SUBCASE("relu") {
    Tensor x = random_tensor({1, 2, 2, 2, 4}, rng);
    const Tensor w = random_tensor(x.shape(), rng);
    const Tensor gx = relu_backward(relu(x), w);
    CHECK(grad_check([&] { return dot(relu(x), w); }, {block("x", x, gx)}).max_rel_error < 1e-6);
  }
  SUBCASE("upsample") {
    Tensor x = random_tensor({2, 2, 1, 2, 3}, rng);
    const Tensor w = random_tensor({2, 2, 2, 4, 6}, rng);
    const Tensor gx = upsample2_backward(w);
    CHECK(grad_check([&] { return dot(upsample2(x), w); }, {block("x", x, gx)}).max_rel_error < 1e-6);
  }
  SUBCASE("concat and split") {
    Tensor a = random_tensor({2, 1, 2, 2, 2}, rng), b = random_tensor({2, 3, 2, 2, 2}, rng);
    const Tensor w = random_tensor({2, 4, 2, 2, 2}, rng);
    auto [ga, gb] = split_channels(w, 1);
    auto f = [&] { return dot(concat_channels(a, b), w); };
    CHECK(grad_check(f, {block("a", a, ga), block("b", b, gb)}).max_rel_error < 1e-6);
  }
  SUBCASE("global average pool") {
    Tensor x = random_tensor({3, 2, 2, 2, 2}, rng);
    const Tensor w = random_tensor({3, 2}, rng);
    const Tensor gx = global_avg_pool_backward(w, x.shape());
    CHECK(grad_check([&] { return dot(global_avg_pool(x), w); }, {block("x", x, gx)}).max_rel_error < 1e-6);
  }
}

TEST_CASE("loss gradients") {
  Rng rng(19);
  Tensor pred = random_tensor({1, 1, 2, 3, 4}, rng);
  SUBCASE("full mse") {
    const Tensor target = random_tensor(pred.shape(), rng);
    Tensor g;
    mse_full(pred, target.values(), &g);
    CHECK(grad_check([&] { return mse_full(pred, target.values(), nullptr); }, {block("pred", pred, g)})
              .max_rel_error < 1e-6);
  }
  SUBCASE("mse at voxels, repeated voxel") {
    const std::vector<std::size_t> vox{0, 5, 5, 23};
    const std::vector<double> target{0.1, -0.3, 0.4, 1.0};
    Tensor g;
    mse_at(pred, vox, target, &g);
    CHECK(grad_check([&] { return mse_at(pred, vox, target, nullptr); }, {block("pred", pred, g)})
              .max_rel_error < 1e-6);
  }
  SUBCASE("bce") {
    Tensor logits = random_tensor({5, 1}, rng, 3.0);
    for (bool label : {false, true}) {
      Tensor g;
      bce_with_logits(logits, label, &g);
      CHECK(grad_check([&] { return bce_with_logits(logits, label, nullptr); }, {block("l", logits, g)})
                .max_rel_error < 1e-6);
    }
  }
}

TEST_CASE("loss analytic values") {
  Tensor pred({1, 1, 2, 2, 2}, 0.25);
  const std::vector<double> same(8, 0.25), off(8, 1.25);
  CHECK(mse_full(pred, same, nullptr) == 0.0);
  CHECK(mse_full(pred, off, nullptr) == doctest::Approx(1.0));
  const Tensor zero({4, 1});
  CHECK(bce_with_logits(zero, true, nullptr) + bce_with_logits(zero, false, nullptr) ==
        doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-14));
  CHECK(mse_at(pred, std::vector<std::size_t>{}, std::vector<double>{}, nullptr) == 0.0);
}

TEST_CASE("cbam gradient on a 2x4x4x4x4 tensor") {
  Rng rng(23);
  Cbam c("cbam", 4, 2);
  c.init(rng);
  randomize(c.fc1_b, rng, 0.1);
  randomize(c.fc2_b, rng, 0.1);
  randomize(c.spatial.bias, rng, 0.1);
  Tensor x = random_tensor({2, 4, 4, 4, 4}, rng);
  const Tensor w = random_tensor(x.shape(), rng);
  CbamTrace trace;
  forward(c, x, &trace);
  const Tensor gx = backward(c, trace, w);
  auto r = grad_check([&] { return dot(forward(c, x, nullptr), w); },
                      {block(c.fc1_w), block(c.fc1_b), block(c.fc2_w), block(c.fc2_b), block(c.spatial.weight),
                       block(c.spatial.bias), block("x", x, gx)},
                      {.probes_per_block = 64});
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("cbam saturated gates pass the input through") {
  Rng rng(29);
  Cbam c("cbam", 3, 4);
  c.init(rng);
  for (auto& v : c.fc2_b.value) v = 40.0;
  std::fill(c.fc2_w.value.begin(), c.fc2_w.value.end(), 0.0);
  std::fill(c.spatial.weight.value.begin(), c.spatial.weight.value.end(), 0.0);
  c.spatial.bias.value[0] = 40.0;
  const Tensor x = random_tensor({1, 3, 2, 4, 4}, rng);
  const Tensor y = forward(c, x, nullptr);
  REQUIRE(y.shape() == x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(y[i] - x[i]) < 1e-6);
}

TEST_CASE("cbam gates lie strictly inside (0, 1)") {
  Rng rng(31);
  Cbam c("cbam", 4, 4);
  c.init(rng);
  const Tensor x = random_tensor({1, 4, 2, 2, 2}, rng, 3.0);
  CbamTrace t;
  forward(c, x, &t);
  for (double g : t.gate_c) CHECK((g > 0.0 && g < 1.0));
  for (double g : t.gate_s.values()) CHECK((g > 0.0 && g < 1.0));
}

TEST_CASE("discriminator") {
  Rng rng(37);
  Discriminator d("disc", 8, 16);
  d.init(rng);
  SUBCASE("zero weights give one half") {
    for (Param* p : d.params()) std::fill(p->value.begin(), p->value.end(), 0.0);
    const auto p = discriminate(d, random_tensor({3, 8, 2, 2, 1}, rng));
    for (double v : p) CHECK(v == 0.5);
  }
  SUBCASE("outputs strictly inside (0, 1)") {
    const auto p = discriminate(d, random_tensor({10000, 8, 1, 1, 1}, rng, 5.0));
    for (double v : p) CHECK((v > 0.0 && v < 1.0));
  }
  SUBCASE("gradient") {
    randomize(d.fc1.bias, rng, 0.1);
    Tensor z = random_tensor({3, 8, 2, 2, 2}, rng);
    const Tensor w = random_tensor({3, 1}, rng);
    DiscriminatorTrace trace;
    discriminator_logits(d, z, &trace);
    const Tensor gz = backward(d, trace, w);
    auto r = grad_check([&] { return dot(discriminator_logits(d, z), w); },
                        {block(d.fc1.weight), block(d.fc1.bias), block(d.fc2.weight), block(d.fc2.bias),
                         block("z", z, gz)});
    CHECK(r.max_rel_error < 1e-4);
  }
}

namespace {

ArchSpec small_arch() {
  ArchSpec a;
  a.base_channels = 4;
  a.disc_hidden = 8;
  return a;
}

}  // namespace

TEST_CASE("encoder shapes") {
  ArchSpec a = small_arch();
  Encoder enc("enc", a);
  Rng rng(41);
  enc.init(rng);
  const Encoded e = encode(enc, Tensor({1, 2, 16, 48, 48}));
  CHECK(e.z.shape() == Shape{1, 32, 2, 6, 6});
  REQUIRE(e.skips.size() == 3);
  CHECK(e.skips[0].shape() == Shape{1, 4, 16, 48, 48});
  CHECK(e.skips[2].shape() == Shape{1, 16, 4, 12, 12});
  CHECK_THROWS_AS(encode(enc, Tensor({1, 2, 12, 16, 16})), ShapeError);
}

TEST_CASE("zero-weight encoder produces a spatially constant bottleneck") {
  ArchSpec a = small_arch();
  Encoder enc("enc", a);
  Rng rng(43);
  for (Param* p : enc.params()) randomize(*p, rng);
  for (Param* p : enc.params())
    if (p->name.ends_with("weight") || p->name.ends_with("_w")) std::fill(p->value.begin(), p->value.end(), 0.0);
  const Encoded e = encode(enc, random_tensor({1, 2, 8, 16, 16}, rng));
  for (std::size_t c = 0; c < e.z.channels(); ++c) {
    const double* zc = e.z.channel(0, c);
    for (std::size_t v = 1; v < e.z.voxels(); ++v) CHECK(zc[v] == zc[0]);
  }
  const Encoded again = encode(enc, random_tensor({1, 2, 8, 16, 16}, rng));
  CHECK(again.z == e.z);
}

TEST_CASE("decoder shape checks") {
  ArchSpec a = small_arch();
  Encoder enc("enc", a);
  Decoder dec("dec", a);
  Rng rng(47);
  enc.init(rng);
  dec.init(rng);
  Encoded e = encode(enc, random_tensor({1, 2, 8, 16, 16}, rng));
  CHECK(decode(dec, e).shape() == Shape{1, 1, 8, 16, 16});
  e.skips.pop_back();
  CHECK_THROWS_AS(decode(dec, e), ShapeError);
}

namespace {

// Positive biases keep most units alive so few probes straddle a relu kink.
void bias_positive(const std::vector<Param*>& params, Rng& rng) {
  for (Param* p : params)
    if (p->name.ends_with("bias") || p->name.ends_with("_b") || p->name.ends_with("beta"))
      for (auto& v : p->value) v = 0.1 * std::abs(rng.normal());
}

}  // namespace

// Depth 2 keeps a 4x4x2 bottleneck; at depth 3 a 16x16x8 grid leaves 1x2x2
// voxels and the bottleneck attention gradients fall below the
// finite-difference noise floor.
TEST_CASE("encoder-decoder-loss chain gradient on a 16x16x8 grid") {
  for (bool attention : {true, false}) {
    for (std::size_t groups : {std::size_t{0}, std::size_t{2}}) {
      CAPTURE(attention);
      CAPTURE(groups);
      ArchSpec a = small_arch();
      a.depth = 2;
      a.attention = attention;
      a.norm_groups = groups;
      Encoder enc("enc", a);
      Decoder dec("dec", a);
      Rng rng(53);
      enc.init(rng);
      dec.init(rng);
      bias_positive(enc.params(), rng);
      bias_positive(dec.params(), rng);
      Tensor x = random_tensor({1, 2, 8, 16, 16}, rng);
      const Tensor target = random_tensor({1, 1, 8, 16, 16}, rng);
      auto loss = [&] { return mse_full(decode(dec, encode(enc, x)), target.values(), nullptr); };

      EncoderTrace et;
      DecoderTrace dt;
      const Encoded e = encode(enc, x, &et);
      Tensor gy;
      mse_full(decode(dec, e, &dt), target.values(), &gy);
      const Encoded g = backward(dec, dt, gy);
      const Tensor gx = backward(enc, et, g.z, g.skips, true);

      std::vector<GradBlock> blocks{block("x", x, gx)};
      for (Param* p : enc.params()) blocks.push_back(block(*p));
      for (Param* p : dec.params()) blocks.push_back(block(*p));
      const auto r = grad_check(loss, blocks, {.probes_per_block = 12});
      CHECK(r.max_rel_error < 1e-4);
    }
  }
}

TEST_CASE("encoder-discriminator-bce chain gradient") {
  ArchSpec a = small_arch();
  a.depth = 2;
  Encoder enc("enc", a);
  Discriminator d("disc", a.bottleneck_channels(), a.disc_hidden);
  Rng rng(57);
  enc.init(rng);
  d.init(rng);
  bias_positive(enc.params(), rng);
  bias_positive(d.params(), rng);
  Tensor x = random_tensor({2, 2, 8, 16, 16}, rng);
  auto loss = [&] { return bce_with_logits(discriminator_logits(d, encode(enc, x).z), false, nullptr); };
  EncoderTrace et;
  DiscriminatorTrace dt;
  Tensor gl;
  bce_with_logits(discriminator_logits(d, encode(enc, x, &et).z, &dt), false, &gl);
  const Tensor gz = backward(d, dt, gl);
  const Tensor gx = backward(enc, et, gz, {}, true);
  std::vector<GradBlock> blocks{block("x", x, gx)};
  for (Param* p : enc.params()) blocks.push_back(block(*p));
  for (Param* p : d.params()) blocks.push_back(block(*p));
  CHECK(grad_check(loss, blocks, {.probes_per_block = 12}).max_rel_error < 1e-4);
}

TEST_CASE("dual model routing and parameter separation") {
  DualTxModel m = DualTxModel::create(small_arch(), {}, 5);
  Rng rng(59);
  GridSample a, b;
  a.grid = b.grid;
  a.grid.dims = {16, 16, 8};
  b.grid = a.grid;
  for (GridSample* s : {&a, &b}) {
    s->value.resize(a.grid.size());
    s->mask.resize(a.grid.size());
    for (auto& v : s->value) v = rng.uniform();
    for (auto& v : s->mask) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
  }
  auto [yi, yj] = forward_dual(m, a, a, false);
  CHECK(yi.shape() == Shape{1, 1, 8, 16, 16});
  CHECK_FALSE(yi == yj);

  auto [pi, pj] = forward_dual(m, a, b, false);
  auto [qi, qj] = forward_dual(m, b, a, false);
  CHECK(pi == decode(m.decoder_i, encode(m.source_encoder, to_tensor(a))));
  CHECK(qj == decode(m.decoder_j, encode(m.source_encoder, to_tensor(a))));

  CHECK(m.decoder_i.params().size() == m.decoder_j.params().size());
  CHECK(m.source_encoder.arch.descriptor() == m.target_encoder.arch.descriptor());

  GridSample c = a;
  c.grid.dims = {16, 16, 16};
  c.value.resize(c.grid.size());
  c.mask.resize(c.grid.size());
  CHECK_THROWS_AS(forward_dual(m, a, c, false), ShapeError);
}

TEST_CASE("adam leaves parameters outside its list bit-identical") {
  DualTxModel m = DualTxModel::create(small_arch(), {}, 7);
  const auto frozen_before = checksum(m.decoder_j.params());
  const auto enc_before = checksum(m.source_encoder.params());
  Rng rng(61);
  Tensor x = random_tensor({1, 2, 8, 8, 8}, rng);
  const Tensor y0 = decode(m.decoder_j, encode(m.source_encoder, x));

  Adam opt(m.decoder_i.params(), {.lr = 1e-2});
  EncoderTrace et;
  DecoderTrace dt;
  const Encoded e = encode(m.source_encoder, x, &et);
  Tensor gy;
  mse_full(decode(m.decoder_i, e, &dt), std::vector<double>(512, 0.3), &gy);
  opt.zero_grad();
  backward(m.decoder_i, dt, gy);
  opt.step();

  CHECK(checksum(m.decoder_j.params()) == frozen_before);
  CHECK(checksum(m.source_encoder.params()) == enc_before);
  CHECK(decode(m.decoder_j, encode(m.source_encoder, x)) == y0);
  CHECK_FALSE(decode(m.decoder_i, encode(m.source_encoder, x)) == y0);
}

TEST_CASE("checkpoint round trip and descriptor check") {
  DualTxModel m = DualTxModel::create(small_arch(), {-130.0, -30.0}, 3);
  std::stringstream ss;
  write_checkpoint(m, ss);
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 4) == "DTXM");
  std::istringstream in(bytes);
  DualTxModel back = read_checkpoint(in, small_arch());
  CHECK(back.norm == m.norm);
  CHECK(checksum(back.params()) == checksum(m.params()));
  std::stringstream again;
  write_checkpoint(back, again);
  CHECK(again.str() == bytes);

  ArchSpec other = small_arch();
  other.base_channels = 8;
  std::istringstream in2(bytes);
  CHECK_THROWS_AS(read_checkpoint(in2, other), FormatError);
  std::istringstream truncated(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(read_checkpoint(truncated), FormatError);
  std::istringstream bad("XTXM" + bytes.substr(4));
  CHECK_THROWS_AS(read_checkpoint(bad), FormatError);
}

TEST_CASE("architecture descriptor round trip") {
  ArchSpec a;
  a.attention = false;
  a.norm_groups = 4;
  CHECK(ArchSpec::parse(a.descriptor()) == a);
  CHECK_THROWS_AS(ArchSpec::parse("depth=3;base=16"), FormatError);
}
