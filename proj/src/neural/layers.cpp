#include "g2a/neural/layers.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <sstream>

namespace g2a::nn {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstMatMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

namespace {

MatMap mat(double* p, std::size_t rows, std::size_t cols, std::size_t stride) {
  return MatMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols),
                Eigen::OuterStride<>(static_cast<Eigen::Index>(stride)));
}
ConstMatMap cmat(const double* p, std::size_t rows, std::size_t cols, std::size_t stride) {
  return ConstMatMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols),
                     Eigen::OuterStride<>(static_cast<Eigen::Index>(stride)));
}

void require_volume(const Tensor& x, std::size_t channels, std::string_view who) {
  if (x.rank() != 5 || x.channels() != channels)
    throw ShapeError(std::string(who) + ": expected (N, " + std::to_string(channels) + ", Z, Y, X), got " +
                     shape_string(x.shape()));
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor basics
// ---------------------------------------------------------------------------

std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  if (data_.size() != shape_size(shape_)) throw ShapeError("tensor data does not match shape");
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void require_finite(const Tensor& t, std::string_view where) {
  if (!t.all_finite()) throw NumericalError("non-finite values in " + std::string(where));
}

void init_he(Param& p, std::size_t fan_in, Rng& rng) {
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : p.value) v = sd * rng.normal();
}

// ---------------------------------------------------------------------------
// Conv3: each of the 27 taps is one GEMM against a shifted view of the
// zero-padded input. Outputs are computed on the padded lattice and the
// interior is extracted afterwards.
// ---------------------------------------------------------------------------

namespace {

struct PadGeom {
  std::size_t Z, Y, X, pz, py, px, P, off0, L;
  explicit PadGeom(const Tensor& x)
      : Z(x.dim(2)), Y(x.dim(3)), X(x.dim(4)), pz(Z + 2), py(Y + 2), px(X + 2), P(pz * py * px),
        off0(py * px + px + 1), L(P - 2 * off0) {}
  long tap_offset(int k) const {
    const int dz = k / 9 - 1, dy = (k / 3) % 3 - 1, dx = k % 3 - 1;
    return dz * static_cast<long>(py * px) + dy * static_cast<long>(px) + dx;
  }
};

void pad_into(const double* src, std::size_t channels, const PadGeom& g, std::vector<double>& dst) {
  dst.assign(channels * g.P, 0.0);
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t z = 0; z < g.Z; ++z)
      for (std::size_t y = 0; y < g.Y; ++y) {
        const double* s = src + ((c * g.Z + z) * g.Y + y) * g.X;
        double* d = dst.data() + c * g.P + ((z + 1) * g.py + (y + 1)) * g.px + 1;
        std::copy(s, s + g.X, d);
      }
}

void unpad_from(const std::vector<double>& src, std::size_t channels, const PadGeom& g, double* dst) {
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t z = 0; z < g.Z; ++z)
      for (std::size_t y = 0; y < g.Y; ++y) {
        const double* s = src.data() + c * g.P + ((z + 1) * g.py + (y + 1)) * g.px + 1;
        std::copy(s, s + g.X, dst + ((c * g.Z + z) * g.Y + y) * g.X);
      }
}

}  // namespace

Conv3::Conv3(const std::string& name, std::size_t in, std::size_t out)
    : cin(in), cout(out), weight(name + ".weight", {27, out, in}), bias(name + ".bias", {out}) {}

void Conv3::init(Rng& rng) {
  init_he(weight, 27 * cin, rng);
  std::fill(bias.value.begin(), bias.value.end(), 0.0);
}

Tensor forward(const Conv3& layer, const Tensor& x) {
  require_volume(x, layer.cin, "Conv3");
  const PadGeom g(x);
  const std::size_t N = x.batch(), V = x.voxels();
  Tensor y({N, layer.cout, g.Z, g.Y, g.X});
  std::vector<double> xp, yp;
  for (std::size_t n = 0; n < N; ++n) {
    pad_into(x.sample(n), layer.cin, g, xp);
    yp.assign(layer.cout * g.P, 0.0);
    auto out = mat(yp.data() + g.off0, layer.cout, g.L, g.P);
    for (int k = 0; k < 27; ++k) {
      const auto w = cmat(layer.weight.value.data() + k * layer.cout * layer.cin, layer.cout, layer.cin, layer.cin);
      const auto in = cmat(xp.data() + g.off0 + g.tap_offset(k), layer.cin, g.L, g.P);
      out.noalias() += w * in;
    }
    unpad_from(yp, layer.cout, g, y.sample(n));
    for (std::size_t c = 0; c < layer.cout; ++c) {
      double* yc = y.channel(n, c);
      const double b = layer.bias.value[c];
      for (std::size_t v = 0; v < V; ++v) yc[v] += b;
    }
  }
  return y;
}

Tensor backward(Conv3& layer, const Tensor& x, const Tensor& gy, bool need_input_grad) {
  require_volume(x, layer.cin, "Conv3 backward");
  require_volume(gy, layer.cout, "Conv3 backward (grad)");
  const PadGeom g(x);
  const std::size_t N = x.batch(), V = x.voxels();
  Tensor gx;
  if (need_input_grad) gx = Tensor(x.shape());
  std::vector<double> xp, gp, gxp;
  for (std::size_t n = 0; n < N; ++n) {
    pad_into(x.sample(n), layer.cin, g, xp);
    pad_into(gy.sample(n), layer.cout, g, gp);
    const auto go = cmat(gp.data() + g.off0, layer.cout, g.L, g.P);
    if (need_input_grad) gxp.assign(layer.cin * g.P, 0.0);
    for (int k = 0; k < 27; ++k) {
      const std::size_t woff = k * layer.cout * layer.cin;
      const auto in = cmat(xp.data() + g.off0 + g.tap_offset(k), layer.cin, g.L, g.P);
      auto gw = mat(layer.weight.grad.data() + woff, layer.cout, layer.cin, layer.cin);
      gw.noalias() += go * in.transpose();
      if (need_input_grad) {
        const auto w = cmat(layer.weight.value.data() + woff, layer.cout, layer.cin, layer.cin);
        auto gin = mat(gxp.data() + g.off0 + g.tap_offset(k), layer.cin, g.L, g.P);
        gin.noalias() += w.transpose() * go;
      }
    }
    if (need_input_grad) unpad_from(gxp, layer.cin, g, gx.sample(n));
    for (std::size_t c = 0; c < layer.cout; ++c) {
      const double* gc = gy.channel(n, c);
      double s = 0.0;
      for (std::size_t v = 0; v < V; ++v) s += gc[v];
      layer.bias.grad[c] += s;
    }
  }
  return gx;
}

// ---------------------------------------------------------------------------
// Down2
// ---------------------------------------------------------------------------

namespace {

/// Gathers tap (dz, dy, dx) of every 2x2x2 block of sample n into a
/// (C, Z/2*Y/2*X/2) matrix.
void gather_tap(const Tensor& x, std::size_t n, int tap, std::vector<double>& out) {
  const std::size_t C = x.channels(), Z = x.dim(2), Y = x.dim(3), X = x.dim(4);
  const std::size_t oz = Z / 2, oy = Y / 2, ox = X / 2, M = oz * oy * ox;
  const int dz = tap / 4, dy = (tap / 2) % 2, dx = tap % 2;
  out.resize(C * M);
  for (std::size_t c = 0; c < C; ++c) {
    const double* xc = x.channel(n, c);
    double* o = out.data() + c * M;
    for (std::size_t z = 0; z < oz; ++z)
      for (std::size_t y = 0; y < oy; ++y) {
        const double* row = xc + ((2 * z + dz) * Y + (2 * y + dy)) * X + dx;
        for (std::size_t i = 0; i < ox; ++i) *o++ = row[2 * i];
      }
  }
}

void scatter_tap(const std::vector<double>& src, Tensor& gx, std::size_t n, int tap) {
  const std::size_t C = gx.channels(), Z = gx.dim(2), Y = gx.dim(3), X = gx.dim(4);
  const std::size_t oz = Z / 2, oy = Y / 2, ox = X / 2, M = oz * oy * ox;
  const int dz = tap / 4, dy = (tap / 2) % 2, dx = tap % 2;
  for (std::size_t c = 0; c < C; ++c) {
    double* gc = gx.channel(n, c);
    const double* s = src.data() + c * M;
    for (std::size_t z = 0; z < oz; ++z)
      for (std::size_t y = 0; y < oy; ++y) {
        double* row = gc + ((2 * z + dz) * Y + (2 * y + dy)) * X + dx;
        for (std::size_t i = 0; i < ox; ++i) row[2 * i] += *s++;
      }
  }
}

}  // namespace

Down2::Down2(const std::string& name, std::size_t in, std::size_t out)
    : cin(in), cout(out), weight(name + ".weight", {8, out, in}), bias(name + ".bias", {out}) {}

void Down2::init(Rng& rng) {
  init_he(weight, 8 * cin, rng);
  std::fill(bias.value.begin(), bias.value.end(), 0.0);
}

Tensor forward(const Down2& layer, const Tensor& x) {
  require_volume(x, layer.cin, "Down2");
  for (int a = 2; a < 5; ++a)
    if (x.dim(a) % 2) throw ShapeError("Down2: spatial dims must be even, got " + shape_string(x.shape()));
  const std::size_t N = x.batch();
  Tensor y({N, layer.cout, x.dim(2) / 2, x.dim(3) / 2, x.dim(4) / 2});
  const std::size_t M = y.voxels();
  std::vector<double> tap;
  for (std::size_t n = 0; n < N; ++n) {
    auto out = mat(y.sample(n), layer.cout, M, M);
    for (std::size_t c = 0; c < layer.cout; ++c) out.row(c).setConstant(layer.bias.value[c]);
    for (int t = 0; t < 8; ++t) {
      gather_tap(x, n, t, tap);
      out.noalias() += cmat(layer.weight.value.data() + t * layer.cout * layer.cin, layer.cout, layer.cin, layer.cin) *
                       cmat(tap.data(), layer.cin, M, M);
    }
  }
  return y;
}

Tensor backward(Down2& layer, const Tensor& x, const Tensor& gy, bool need_input_grad) {
  const std::size_t N = x.batch(), M = gy.voxels();
  Tensor gx;
  if (need_input_grad) gx = Tensor(x.shape());
  std::vector<double> tap, gtap(layer.cin * M);
  for (std::size_t n = 0; n < N; ++n) {
    const auto go = cmat(gy.sample(n), layer.cout, M, M);
    for (int t = 0; t < 8; ++t) {
      const std::size_t woff = t * layer.cout * layer.cin;
      gather_tap(x, n, t, tap);
      mat(layer.weight.grad.data() + woff, layer.cout, layer.cin, layer.cin).noalias() +=
          go * cmat(tap.data(), layer.cin, M, M).transpose();
      if (need_input_grad) {
        mat(gtap.data(), layer.cin, M, M).noalias() =
            cmat(layer.weight.value.data() + woff, layer.cout, layer.cin, layer.cin).transpose() * go;
        scatter_tap(gtap, gx, n, t);
      }
    }
    for (std::size_t c = 0; c < layer.cout; ++c) layer.bias.grad[c] += go.row(c).sum();
  }
  return gx;
}

// ---------------------------------------------------------------------------
// Pointwise and Linear
// ---------------------------------------------------------------------------

Pointwise::Pointwise(const std::string& name, std::size_t in, std::size_t out)
    : cin(in), cout(out), weight(name + ".weight", {out, in}), bias(name + ".bias", {out}) {}

void Pointwise::init(Rng& rng) {
  init_he(weight, cin, rng);
  std::fill(bias.value.begin(), bias.value.end(), 0.0);
}

Tensor forward(const Pointwise& layer, const Tensor& x) {
  require_volume(x, layer.cin, "Pointwise");
  Tensor y({x.batch(), layer.cout, x.dim(2), x.dim(3), x.dim(4)});
  const std::size_t V = x.voxels();
  for (std::size_t n = 0; n < x.batch(); ++n) {
    auto out = mat(y.sample(n), layer.cout, V, V);
    for (std::size_t c = 0; c < layer.cout; ++c) out.row(c).setConstant(layer.bias.value[c]);
    out.noalias() += cmat(layer.weight.value.data(), layer.cout, layer.cin, layer.cin) *
                     cmat(x.sample(n), layer.cin, V, V);
  }
  return y;
}

Tensor backward(Pointwise& layer, const Tensor& x, const Tensor& gy, bool need_input_grad) {
  const std::size_t V = x.voxels();
  Tensor gx;
  if (need_input_grad) gx = Tensor(x.shape());
  for (std::size_t n = 0; n < x.batch(); ++n) {
    const auto go = cmat(gy.sample(n), layer.cout, V, V);
    mat(layer.weight.grad.data(), layer.cout, layer.cin, layer.cin).noalias() +=
        go * cmat(x.sample(n), layer.cin, V, V).transpose();
    for (std::size_t c = 0; c < layer.cout; ++c) layer.bias.grad[c] += go.row(c).sum();
    if (need_input_grad)
      mat(gx.sample(n), layer.cin, V, V).noalias() =
          cmat(layer.weight.value.data(), layer.cout, layer.cin, layer.cin).transpose() * go;
  }
  return gx;
}

Linear::Linear(const std::string& name, std::size_t fan_in, std::size_t fan_out)
    : in(fan_in), out(fan_out), weight(name + ".weight", {fan_out, fan_in}), bias(name + ".bias", {fan_out}) {}

void Linear::init(Rng& rng) {
  init_he(weight, in, rng);
  std::fill(bias.value.begin(), bias.value.end(), 0.0);
}

Tensor forward(const Linear& layer, const Tensor& x) {
  if (x.rank() != 2 || x.dim(1) != layer.in)
    throw ShapeError("Linear: expected (N, " + std::to_string(layer.in) + "), got " + shape_string(x.shape()));
  const std::size_t N = x.dim(0);
  Tensor y({N, layer.out});
  auto out = mat(y.data(), N, layer.out, layer.out);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < layer.out; ++o) out(n, o) = layer.bias.value[o];
  out.noalias() += cmat(x.data(), N, layer.in, layer.in) *
                   cmat(layer.weight.value.data(), layer.out, layer.in, layer.in).transpose();
  return y;
}

Tensor backward(Linear& layer, const Tensor& x, const Tensor& gy) {
  const std::size_t N = x.dim(0);
  const auto go = cmat(gy.data(), N, layer.out, layer.out);
  mat(layer.weight.grad.data(), layer.out, layer.in, layer.in).noalias() +=
      go.transpose() * cmat(x.data(), N, layer.in, layer.in);
  for (std::size_t o = 0; o < layer.out; ++o) layer.bias.grad[o] += go.col(o).sum();
  Tensor gx(x.shape());
  mat(gx.data(), N, layer.in, layer.in).noalias() =
      go * cmat(layer.weight.value.data(), layer.out, layer.in, layer.in);
  return gx;
}

// ---------------------------------------------------------------------------
// GroupNorm
// ---------------------------------------------------------------------------

GroupNorm::GroupNorm(const std::string& name, std::size_t c, std::size_t g)
    : channels(c), groups(g), gamma(name + ".gamma", {c}), beta(name + ".beta", {c}) {
  if (g == 0 || c % g) throw ShapeError("GroupNorm: channels must be divisible by groups");
  std::fill(gamma.value.begin(), gamma.value.end(), 1.0);
}

Tensor forward(const GroupNorm& layer, const Tensor& x, GroupNormTrace* trace) {
  require_volume(x, layer.channels, "GroupNorm");
  const std::size_t N = x.batch(), V = x.voxels(), cg = layer.channels / layer.groups;
  Tensor y(x.shape());
  Tensor xhat(x.shape());
  std::vector<double> rstd(N * layer.groups);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t g = 0; g < layer.groups; ++g) {
      const double* xs = x.channel(n, g * cg);
      const std::size_t count = cg * V;
      double mean = 0.0;
      for (std::size_t i = 0; i < count; ++i) mean += xs[i];
      mean /= static_cast<double>(count);
      double var = 0.0;
      for (std::size_t i = 0; i < count; ++i) var += (xs[i] - mean) * (xs[i] - mean);
      var /= static_cast<double>(count);
      const double r = 1.0 / std::sqrt(var + layer.eps);
      rstd[n * layer.groups + g] = r;
      for (std::size_t c = g * cg; c < (g + 1) * cg; ++c) {
        const double* xc = x.channel(n, c);
        double* hc = xhat.channel(n, c);
        double* yc = y.channel(n, c);
        for (std::size_t v = 0; v < V; ++v) {
          hc[v] = (xc[v] - mean) * r;
          yc[v] = layer.gamma.value[c] * hc[v] + layer.beta.value[c];
        }
      }
    }
  if (trace) {
    trace->xhat = std::move(xhat);
    trace->rstd = std::move(rstd);
  }
  return y;
}

Tensor backward(GroupNorm& layer, const GroupNormTrace& trace, const Tensor& gy) {
  const auto& xhat = trace.xhat;
  const std::size_t N = xhat.batch(), V = xhat.voxels(), cg = layer.channels / layer.groups;
  Tensor gx(xhat.shape());
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < layer.channels; ++c) {
      const double* g = gy.channel(n, c);
      const double* h = xhat.channel(n, c);
      double sg = 0.0, sgh = 0.0;
      for (std::size_t v = 0; v < V; ++v) {
        sg += g[v];
        sgh += g[v] * h[v];
      }
      layer.beta.grad[c] += sg;
      layer.gamma.grad[c] += sgh;
    }
    for (std::size_t grp = 0; grp < layer.groups; ++grp) {
      // dxhat = gy * gamma; dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
      double m1 = 0.0, m2 = 0.0;
      for (std::size_t c = grp * cg; c < (grp + 1) * cg; ++c) {
        const double* g = gy.channel(n, c);
        const double* h = xhat.channel(n, c);
        const double gm = layer.gamma.value[c];
        for (std::size_t v = 0; v < V; ++v) {
          m1 += g[v] * gm;
          m2 += g[v] * gm * h[v];
        }
      }
      const double count = static_cast<double>(cg * V);
      m1 /= count;
      m2 /= count;
      const double r = trace.rstd[n * layer.groups + grp];
      for (std::size_t c = grp * cg; c < (grp + 1) * cg; ++c) {
        const double* g = gy.channel(n, c);
        const double* h = xhat.channel(n, c);
        double* o = gx.channel(n, c);
        const double gm = layer.gamma.value[c];
        for (std::size_t v = 0; v < V; ++v) o[v] = r * (g[v] * gm - m1 - h[v] * m2);
      }
    }
  }
  return gx;
}

// ---------------------------------------------------------------------------
// Parameter-free ops
// ---------------------------------------------------------------------------

Tensor relu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  return y;
}

Tensor relu_backward(const Tensor& y, const Tensor& gy) {
  Tensor gx(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) gx[i] = y[i] > 0.0 ? gy[i] : 0.0;
  return gx;
}

Tensor upsample2(const Tensor& x) {
  const std::size_t N = x.batch(), C = x.channels(), Z = x.dim(2), Y = x.dim(3), X = x.dim(4);
  Tensor y({N, C, 2 * Z, 2 * Y, 2 * X});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const double* xc = x.channel(n, c);
      double* yc = y.channel(n, c);
      for (std::size_t z = 0; z < 2 * Z; ++z)
        for (std::size_t yy = 0; yy < 2 * Y; ++yy) {
          const double* src = xc + ((z / 2) * Y + yy / 2) * X;
          double* dst = yc + (z * 2 * Y + yy) * 2 * X;
          for (std::size_t i = 0; i < 2 * X; ++i) dst[i] = src[i / 2];
        }
    }
  return y;
}

Tensor upsample2_backward(const Tensor& gy) {
  const std::size_t N = gy.batch(), C = gy.channels(), Z = gy.dim(2) / 2, Y = gy.dim(3) / 2, X = gy.dim(4) / 2;
  Tensor gx({N, C, Z, Y, X});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const double* gc = gy.channel(n, c);
      double* xc = gx.channel(n, c);
      for (std::size_t z = 0; z < 2 * Z; ++z)
        for (std::size_t yy = 0; yy < 2 * Y; ++yy) {
          const double* src = gc + (z * 2 * Y + yy) * 2 * X;
          double* dst = xc + ((z / 2) * Y + yy / 2) * X;
          for (std::size_t i = 0; i < 2 * X; ++i) dst[i / 2] += src[i];
        }
    }
  return gx;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.rank() != 5 || b.rank() != 5 || a.batch() != b.batch() || a.dim(2) != b.dim(2) ||
      a.dim(3) != b.dim(3) || a.dim(4) != b.dim(4))
    throw ShapeError("concat_channels: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  const std::size_t V = a.voxels();
  Tensor y({a.batch(), a.channels() + b.channels(), a.dim(2), a.dim(3), a.dim(4)});
  for (std::size_t n = 0; n < a.batch(); ++n) {
    std::copy(a.sample(n), a.sample(n) + a.channels() * V, y.sample(n));
    std::copy(b.sample(n), b.sample(n) + b.channels() * V, y.sample(n) + a.channels() * V);
  }
  return y;
}

std::pair<Tensor, Tensor> split_channels(const Tensor& g, std::size_t ca) {
  const std::size_t cb = g.channels() - ca, V = g.voxels();
  Tensor a({g.batch(), ca, g.dim(2), g.dim(3), g.dim(4)});
  Tensor b({g.batch(), cb, g.dim(2), g.dim(3), g.dim(4)});
  for (std::size_t n = 0; n < g.batch(); ++n) {
    std::copy(g.sample(n), g.sample(n) + ca * V, a.sample(n));
    std::copy(g.sample(n) + ca * V, g.sample(n) + (ca + cb) * V, b.sample(n));
  }
  return {std::move(a), std::move(b)};
}

Tensor global_avg_pool(const Tensor& x) {
  const std::size_t N = x.batch(), C = x.channels(), V = x.voxels();
  Tensor y({N, C});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const double* xc = x.channel(n, c);
      double s = 0.0;
      for (std::size_t v = 0; v < V; ++v) s += xc[v];
      y[n * C + c] = s / static_cast<double>(V);
    }
  return y;
}

Tensor global_avg_pool_backward(const Tensor& gy, const Shape& input_shape) {
  Tensor gx(input_shape);
  const std::size_t N = gx.batch(), C = gx.channels(), V = gx.voxels();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const double g = gy[n * C + c] / static_cast<double>(V);
      double* xc = gx.channel(n, c);
      for (std::size_t v = 0; v < V; ++v) xc[v] = g;
    }
  return gx;
}

// ---------------------------------------------------------------------------
// CBAM
// ---------------------------------------------------------------------------

Cbam::Cbam(const std::string& name, std::size_t c, std::size_t reduction)
    : channels(c),
      hidden(std::max<std::size_t>(1, c / std::max<std::size_t>(1, reduction))),
      fc1_w(name + ".fc1.weight", {hidden, c}),
      fc1_b(name + ".fc1.bias", {hidden}),
      fc2_w(name + ".fc2.weight", {c, hidden}),
      fc2_b(name + ".fc2.bias", {c}),
      spatial(name + ".spatial", 2, 1) {}

void Cbam::init(Rng& rng) {
  init_he(fc1_w, channels, rng);
  init_he(fc2_w, hidden, rng);
  std::fill(fc1_b.value.begin(), fc1_b.value.end(), 0.0);
  std::fill(fc2_b.value.begin(), fc2_b.value.end(), 0.0);
  spatial.init(rng);
}

Tensor forward(const Cbam& layer, const Tensor& x, CbamTrace* trace) {
  require_volume(x, layer.channels, "Cbam");
  const std::size_t N = x.batch(), C = layer.channels, H = layer.hidden, V = x.voxels();
  CbamTrace local;
  CbamTrace& t = trace ? *trace : local;
  t.input = x;
  t.avg.assign(N * C, 0.0);
  t.max.assign(N * C, 0.0);
  t.max_at.assign(N * C, 0);
  t.h_avg.assign(N * H, 0.0);
  t.h_max.assign(N * H, 0.0);
  t.gate_c.assign(N * C, 0.0);

  // Channel gate.
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* xc = x.channel(n, c);
      double s = 0.0, m = xc[0];
      std::size_t at = 0;
      for (std::size_t v = 0; v < V; ++v) {
        s += xc[v];
        if (xc[v] > m) {
          m = xc[v];
          at = v;
        }
      }
      t.avg[n * C + c] = s / static_cast<double>(V);
      t.max[n * C + c] = m;
      t.max_at[n * C + c] = at;
    }
    for (std::size_t h = 0; h < H; ++h) {
      double a = layer.fc1_b.value[h], b = layer.fc1_b.value[h];
      for (std::size_t c = 0; c < C; ++c) {
        a += layer.fc1_w.value[h * C + c] * t.avg[n * C + c];
        b += layer.fc1_w.value[h * C + c] * t.max[n * C + c];
      }
      t.h_avg[n * H + h] = a > 0.0 ? a : 0.0;
      t.h_max[n * H + h] = b > 0.0 ? b : 0.0;
    }
    for (std::size_t c = 0; c < C; ++c) {
      double o = 2.0 * layer.fc2_b.value[c];
      for (std::size_t h = 0; h < H; ++h)
        o += layer.fc2_w.value[c * H + h] * (t.h_avg[n * H + h] + t.h_max[n * H + h]);
      t.gate_c[n * C + c] = sigmoid(o);
    }
  }
  t.scaled = Tensor(x.shape());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const double g = t.gate_c[n * C + c];
      const double* xc = x.channel(n, c);
      double* sc = t.scaled.channel(n, c);
      for (std::size_t v = 0; v < V; ++v) sc[v] = xc[v] * g;
    }

  // Spatial gate.
  t.pooled = Tensor({N, 2, x.dim(2), x.dim(3), x.dim(4)});
  t.pooled_max_at.assign(N * V, 0);
  for (std::size_t n = 0; n < N; ++n) {
    double* mean = t.pooled.channel(n, 0);
    double* mx = t.pooled.channel(n, 1);
    const double* s0 = t.scaled.channel(n, 0);
    for (std::size_t v = 0; v < V; ++v) {
      mean[v] = s0[v];
      mx[v] = s0[v];
    }
    for (std::size_t c = 1; c < C; ++c) {
      const double* sc = t.scaled.channel(n, c);
      for (std::size_t v = 0; v < V; ++v) {
        mean[v] += sc[v];
        if (sc[v] > mx[v]) {
          mx[v] = sc[v];
          t.pooled_max_at[n * V + v] = c;
        }
      }
    }
    for (std::size_t v = 0; v < V; ++v) mean[v] /= static_cast<double>(C);
  }
  t.gate_s = forward(layer.spatial, t.pooled);
  for (std::size_t i = 0; i < t.gate_s.size(); ++i) t.gate_s[i] = sigmoid(t.gate_s[i]);

  Tensor y(x.shape());
  for (std::size_t n = 0; n < N; ++n) {
    const double* gs = t.gate_s.channel(n, 0);
    for (std::size_t c = 0; c < C; ++c) {
      const double* sc = t.scaled.channel(n, c);
      double* yc = y.channel(n, c);
      for (std::size_t v = 0; v < V; ++v) yc[v] = sc[v] * gs[v];
    }
  }
  return y;
}

Tensor backward(Cbam& layer, const CbamTrace& t, const Tensor& gy) {
  const Tensor& x = t.input;
  const std::size_t N = x.batch(), C = layer.channels, H = layer.hidden, V = x.voxels();

  // Through the spatial gate.
  Tensor g_scaled(x.shape());
  Tensor g_logit_s({N, 1, x.dim(2), x.dim(3), x.dim(4)});
  for (std::size_t n = 0; n < N; ++n) {
    const double* gs = t.gate_s.channel(n, 0);
    double* gl = g_logit_s.channel(n, 0);
    for (std::size_t c = 0; c < C; ++c) {
      const double* g = gy.channel(n, c);
      const double* sc = t.scaled.channel(n, c);
      double* o = g_scaled.channel(n, c);
      for (std::size_t v = 0; v < V; ++v) {
        o[v] = g[v] * gs[v];
        gl[v] += g[v] * sc[v];
      }
    }
    for (std::size_t v = 0; v < V; ++v) gl[v] *= gs[v] * (1.0 - gs[v]);
  }
  const Tensor g_pooled = backward(layer.spatial, t.pooled, g_logit_s, true);
  for (std::size_t n = 0; n < N; ++n) {
    const double* gmean = g_pooled.channel(n, 0);
    const double* gmax = g_pooled.channel(n, 1);
    for (std::size_t c = 0; c < C; ++c) {
      double* o = g_scaled.channel(n, c);
      for (std::size_t v = 0; v < V; ++v) o[v] += gmean[v] / static_cast<double>(C);
    }
    for (std::size_t v = 0; v < V; ++v) g_scaled.channel(n, t.pooled_max_at[n * V + v])[v] += gmax[v];
  }

  // Through the channel gate.
  Tensor gx(x.shape());
  std::vector<double> g_o(C), g_pa(H), g_pm(H);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* gsc = g_scaled.channel(n, c);
      const double* xc = x.channel(n, c);
      double* o = gx.channel(n, c);
      const double gate = t.gate_c[n * C + c];
      double g_gate = 0.0;
      for (std::size_t v = 0; v < V; ++v) {
        o[v] = gsc[v] * gate;
        g_gate += gsc[v] * xc[v];
      }
      g_o[c] = g_gate * gate * (1.0 - gate);
    }
    // o_c = W2 (h_avg + h_max) + 2 b2
    for (std::size_t c = 0; c < C; ++c) {
      layer.fc2_b.grad[c] += 2.0 * g_o[c];
      for (std::size_t h = 0; h < H; ++h)
        layer.fc2_w.grad[c * H + h] += g_o[c] * (t.h_avg[n * H + h] + t.h_max[n * H + h]);
    }
    for (std::size_t h = 0; h < H; ++h) {
      double gh = 0.0;
      for (std::size_t c = 0; c < C; ++c) gh += layer.fc2_w.value[c * H + h] * g_o[c];
      g_pa[h] = t.h_avg[n * H + h] > 0.0 ? gh : 0.0;
      g_pm[h] = t.h_max[n * H + h] > 0.0 ? gh : 0.0;
      layer.fc1_b.grad[h] += g_pa[h] + g_pm[h];
      for (std::size_t c = 0; c < C; ++c)
        layer.fc1_w.grad[h * C + c] += g_pa[h] * t.avg[n * C + c] + g_pm[h] * t.max[n * C + c];
    }
    for (std::size_t c = 0; c < C; ++c) {
      double g_avg = 0.0, g_max = 0.0;
      for (std::size_t h = 0; h < H; ++h) {
        g_avg += layer.fc1_w.value[h * C + c] * g_pa[h];
        g_max += layer.fc1_w.value[h * C + c] * g_pm[h];
      }
      double* o = gx.channel(n, c);
      const double ga = g_avg / static_cast<double>(V);
      for (std::size_t v = 0; v < V; ++v) o[v] += ga;
      o[t.max_at[n * C + c]] += g_max;
    }
  }
  return gx;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

double mse_full(const Tensor& pred, std::span<const double> target, Tensor* grad) {
  if (pred.size() != target.size()) throw ShapeError("mse_full: prediction/target size mismatch");
  const double inv = 1.0 / static_cast<double>(pred.size());
  double loss = 0.0;
  if (grad) *grad = Tensor(pred.shape());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    loss += d * d;
    if (grad) (*grad)[i] = 2.0 * d * inv;
  }
  return loss * inv;
}

double mse_at(const Tensor& pred, std::span<const std::size_t> voxels, std::span<const double> target,
              Tensor* grad) {
  if (voxels.size() != target.size()) throw ShapeError("mse_at: index/target size mismatch");
  if (grad) *grad = Tensor(pred.shape());
  if (voxels.empty()) return 0.0;
  const double inv = 1.0 / static_cast<double>(voxels.size());
  double loss = 0.0;
  for (std::size_t s = 0; s < voxels.size(); ++s) {
    if (voxels[s] >= pred.size()) throw ShapeError("mse_at: voxel index out of range");
    const double d = pred[voxels[s]] - target[s];
    loss += d * d;
    if (grad) (*grad)[voxels[s]] += 2.0 * d * inv;
  }
  return loss * inv;
}

double bce_with_logits(const Tensor& logits, bool label, Tensor* grad) {
  const std::size_t N = logits.size();
  if (grad) *grad = Tensor(logits.shape());
  if (N == 0) return 0.0;
  const double inv = 1.0 / static_cast<double>(N);
  double loss = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const double l = logits[n];
    loss += label ? softplus(-l) : softplus(l);
    if (grad) (*grad)[n] = (sigmoid(l) - (label ? 1.0 : 0.0)) * inv;
  }
  return loss * inv;
}

}  // namespace g2a::nn
