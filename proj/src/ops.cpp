#include "mismatch/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "mismatch/errors.hpp"

namespace mismatch::ad {

namespace {

void require_rank4(const Tensor& t, const char* op) {
  if (t.rank() != 4) {
    throw DimensionError(std::string(op) + " expects an NCHW tensor, got " + to_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

struct ConvGeometry {
  std::size_t batch, in_c, height, width;
  std::size_t out_c, kh, kw;
  std::size_t out_h, out_w;
  long pad, dil;

  std::size_t patch() const { return in_c * kh * kw; }
  std::size_t pixels() const { return out_h * out_w; }
};

// Unfolds one sample into a (C*KH*KW) x (OH*OW) matrix.
void im2col(const double* x, const ConvGeometry& g, double* col) {
  const long H = static_cast<long>(g.height), W = static_cast<long>(g.width);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.in_c; ++c) {
    const double* plane = x + c * g.height * g.width;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j, ++row) {
        double* dst = col + row * g.pixels();
        const long di = static_cast<long>(i) * g.dil - g.pad;
        const long dj = static_cast<long>(j) * g.dil - g.pad;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long h = static_cast<long>(oh) + di;
          double* out_row = dst + oh * g.out_w;
          if (h < 0 || h >= H) {
            std::fill(out_row, out_row + g.out_w, 0.0);
            continue;
          }
          const double* src = plane + h * W;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long w = static_cast<long>(ow) + dj;
            out_row[ow] = (w >= 0 && w < W) ? src[w] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* col, const ConvGeometry& g, double* dx) {
  const long H = static_cast<long>(g.height), W = static_cast<long>(g.width);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.in_c; ++c) {
    double* plane = dx + c * g.height * g.width;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j, ++row) {
        const double* src = col + row * g.pixels();
        const long di = static_cast<long>(i) * g.dil - g.pad;
        const long dj = static_cast<long>(j) * g.dil - g.pad;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long h = static_cast<long>(oh) + di;
          if (h < 0 || h >= H) continue;
          const double* in_row = src + oh * g.out_w;
          double* dst = plane + h * W;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long w = static_cast<long>(ow) + dj;
            if (w >= 0 && w < W) dst[w] += in_row[ow];
          }
        }
      }
    }
  }
}

// Dot product with eight independent partial sums so the loop vectorises
// while the summation order stays fixed.
double dot(const double* a, const double* b, std::size_t n) {
  double lane[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t j = 0; j < 8; ++j) lane[j] += a[i + j] * b[i + j];
  }
  double acc = ((lane[0] + lane[1]) + (lane[2] + lane[3])) + ((lane[4] + lane[5]) + (lane[6] + lane[7]));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int padding,
              int dilation) {
  require_rank4(x, "conv2d");
  require_rank4(weight, "conv2d weight");
  if (dilation <= 0) throw ParameterError("conv2d dilation must be positive");
  if (padding < 0) throw ParameterError("conv2d padding must be non-negative");
  if (weight.dim(1) != x.dim(1)) {
    throw DimensionError("conv2d: weight " + to_string(weight.shape()) + " does not match input " +
                         to_string(x.shape()));
  }
  if (bias.numel() != weight.dim(0)) {
    throw DimensionError("conv2d: bias needs " + std::to_string(weight.dim(0)) + " values");
  }

  ConvGeometry g{};
  g.batch = x.dim(0);
  g.in_c = x.dim(1);
  g.height = x.dim(2);
  g.width = x.dim(3);
  g.out_c = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.pad = padding;
  g.dil = dilation;
  const long oh = static_cast<long>(g.height) + 2L * padding -
                  (static_cast<long>(dilation) * (static_cast<long>(g.kh) - 1) + 1) + 1;
  const long ow = static_cast<long>(g.width) + 2L * padding -
                  (static_cast<long>(dilation) * (static_cast<long>(g.kw) - 1) + 1) + 1;
  if (oh <= 0 || ow <= 0) {
    throw DimensionError("conv2d: effective kernel larger than padded input " +
                         to_string(x.shape()));
  }
  g.out_h = static_cast<std::size_t>(oh);
  g.out_w = static_cast<std::size_t>(ow);

  const std::size_t P = g.pixels(), K = g.patch();
  std::vector<double> out(g.batch * g.out_c * P);
  std::vector<double> col(K * P);
  const double* w = weight.data().data();
  const double* b = bias.data().data();
  for (std::size_t n = 0; n < g.batch; ++n) {
    im2col(x.data().data() + n * g.in_c * g.height * g.width, g, col.data());
    double* o = out.data() + n * g.out_c * P;
    for (std::size_t co = 0; co < g.out_c; ++co) {
      double* orow = o + co * P;
      std::fill(orow, orow + P, b[co]);
      for (std::size_t k = 0; k < K; ++k) {
        const double wv = w[co * K + k];
        const double* crow = col.data() + k * P;
        for (std::size_t p = 0; p < P; ++p) orow[p] += wv * crow[p];
      }
    }
  }

  Shape shape{g.batch, g.out_c, g.out_h, g.out_w};
  return record_op(
      "conv2d", {x, weight, bias}, std::move(shape), std::move(out),
      BackwardFn{[x, weight, g](std::span<const double> gout, std::span<double* const> gin) {
        const std::size_t P = g.pixels(), K = g.patch();
        std::vector<double> col(K * P), dcol;
        if (gin[0]) dcol.resize(K * P);
        const double* w = weight.data().data();
        for (std::size_t n = 0; n < g.batch; ++n) {
          const double* go = gout.data() + n * g.out_c * P;
          if (gin[1]) im2col(x.data().data() + n * g.in_c * g.height * g.width, g, col.data());
          for (std::size_t co = 0; co < g.out_c; ++co) {
            const double* grow = go + co * P;
            if (gin[2]) {
              double acc = 0.0;
              for (std::size_t p = 0; p < P; ++p) acc += grow[p];
              gin[2][co] += acc;
            }
            if (gin[1]) {
              double* dw = gin[1] + co * K;
              for (std::size_t k = 0; k < K; ++k) dw[k] += dot(grow, col.data() + k * P, P);
            }
          }
          if (gin[0]) {
            std::fill(dcol.begin(), dcol.end(), 0.0);
            for (std::size_t co = 0; co < g.out_c; ++co) {
              const double* grow = go + co * P;
              for (std::size_t k = 0; k < K; ++k) {
                const double wv = w[co * K + k];
                double* drow = dcol.data() + k * P;
                for (std::size_t p = 0; p < P; ++p) drow[p] += wv * grow[p];
              }
            }
            col2im(dcol.data(), g, gin[0] + n * g.in_c * g.height * g.width);
          }
        }
      }});
}

Tensor relu(const Tensor& x) {
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
  return record_op("relu", {x}, x.shape(), std::move(out),
                   BackwardFn{[x](std::span<const double> g, std::span<double* const> gin) {
                     const auto in = x.data();
                     for (std::size_t i = 0; i < in.size(); ++i) {
                       if (in[i] > 0.0) gin[0][i] += g[i];
                     }
                   }});
}

Tensor sigmoid(const Tensor& x) {
  constexpr double lo = std::numeric_limits<double>::min();
  const double hi = std::nextafter(1.0, 0.0);
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    const double v = in[i];
    double s;
    if (v >= 0.0) {
      s = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      s = e / (1.0 + e);
    }
    out[i] = std::clamp(s, lo, hi);
  }
  auto values = std::make_shared<std::vector<double>>(out);
  return record_op("sigmoid", {x}, x.shape(), std::move(out),
                   BackwardFn{[values](std::span<const double> g, std::span<double* const> gin) {
                     const auto& s = *values;
                     for (std::size_t i = 0; i < s.size(); ++i) gin[0][i] += g[i] * s[i] * (1.0 - s[i]);
                   }});
}

Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank4(x, "instance_norm");
  if (!(eps > 0.0)) throw ParameterError("instance_norm eps must be positive");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gamma.numel() != C || beta.numel() != C) {
    throw DimensionError("instance_norm: affine parameters need " + std::to_string(C) + " values");
  }
  const auto in = x.data();
  const auto ga = gamma.data();
  const auto be = beta.data();
  auto xhat = std::make_shared<std::vector<double>>(in.size());
  auto inv_std = std::make_shared<std::vector<double>>(N * C);
  std::vector<double> out(in.size());
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const double* src = in.data() + nc * HW;
    double m = 0.0;
    for (std::size_t i = 0; i < HW; ++i) m += src[i];
    m /= static_cast<double>(HW);
    double var = 0.0;
    for (std::size_t i = 0; i < HW; ++i) var += (src[i] - m) * (src[i] - m);
    var /= static_cast<double>(HW);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[nc] = is;
    const std::size_t c = nc % C;
    double* xh = xhat->data() + nc * HW;
    double* dst = out.data() + nc * HW;
    for (std::size_t i = 0; i < HW; ++i) {
      xh[i] = (src[i] - m) * is;
      dst[i] = ga[c] * xh[i] + be[c];
    }
  }
  return record_op(
      "instance_norm", {x, gamma, beta}, x.shape(), std::move(out),
      BackwardFn{[gamma, xhat, inv_std, N, C, HW](std::span<const double> g,
                                                   std::span<double* const> gin) {
        const auto ga = gamma.data();
        for (std::size_t nc = 0; nc < N * C; ++nc) {
          const std::size_t c = nc % C;
          const double* go = g.data() + nc * HW;
          const double* xh = xhat->data() + nc * HW;
          double sg = 0.0, sgx = 0.0;
          for (std::size_t i = 0; i < HW; ++i) {
            sg += go[i];
            sgx += go[i] * xh[i];
          }
          if (gin[1]) gin[1][c] += sgx;
          if (gin[2]) gin[2][c] += sg;
          if (gin[0]) {
            const double k = ga[c] * (*inv_std)[nc];
            const double mg = sg / static_cast<double>(HW);
            const double mgx = sgx / static_cast<double>(HW);
            double* dx = gin[0] + nc * HW;
            for (std::size_t i = 0; i < HW; ++i) dx[i] += k * (go[i] - mg - xh[i] * mgx);
          }
        }
      }});
}

Tensor maxpool2(const Tensor& x) {
  require_rank4(x, "maxpool2");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 != 0 || W % 2 != 0) {
    throw DimensionError("maxpool2 needs even spatial size, got " + to_string(x.shape()));
  }
  const std::size_t OH = H / 2, OW = W / 2;
  const auto in = x.data();
  std::vector<double> out(N * C * OH * OW);
  auto arg = std::make_shared<std::vector<std::size_t>>(out.size());
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    for (std::size_t i = 0; i < OH; ++i) {
      for (std::size_t j = 0; j < OW; ++j) {
        std::size_t best = nc * H * W + 2 * i * W + 2 * j;
        for (std::size_t di = 0; di < 2; ++di) {
          for (std::size_t dj = 0; dj < 2; ++dj) {
            const std::size_t idx = nc * H * W + (2 * i + di) * W + 2 * j + dj;
            if (in[idx] > in[best]) best = idx;
          }
        }
        const std::size_t o = (nc * OH + i) * OW + j;
        out[o] = in[best];
        (*arg)[o] = best;
      }
    }
  }
  return record_op("maxpool2", {x}, Shape{N, C, OH, OW}, std::move(out),
                   BackwardFn{[arg](std::span<const double> g, std::span<double* const> gin) {
                     for (std::size_t o = 0; o < g.size(); ++o) gin[0][(*arg)[o]] += g[o];
                   }});
}

namespace {

// Source taps for one output coordinate of a x2 half-pixel upsample.
struct Taps {
  std::size_t i0, i1;
  double w1;
};

std::vector<Taps> upsample_taps(std::size_t in_size) {
  std::vector<Taps> taps(2 * in_size);
  for (std::size_t o = 0; o < taps.size(); ++o) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    if (src < 0.0) src = 0.0;
    const auto i0 = static_cast<std::size_t>(src);
    const std::size_t i1 = std::min(i0 + 1, in_size - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

Tensor upsample_bilinear2(const Tensor& x) {
  require_rank4(x, "upsample_bilinear2");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t OH = 2 * H, OW = 2 * W;
  const auto rows = upsample_taps(H);
  const auto cols = upsample_taps(W);
  const auto in = x.data();
  std::vector<double> out(N * C * OH * OW);
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const double* src = in.data() + nc * H * W;
    double* dst = out.data() + nc * OH * OW;
    for (std::size_t i = 0; i < OH; ++i) {
      const auto& r = rows[i];
      for (std::size_t j = 0; j < OW; ++j) {
        const auto& c = cols[j];
        const double top = (1.0 - c.w1) * src[r.i0 * W + c.i0] + c.w1 * src[r.i0 * W + c.i1];
        const double bot = (1.0 - c.w1) * src[r.i1 * W + c.i0] + c.w1 * src[r.i1 * W + c.i1];
        dst[i * OW + j] = (1.0 - r.w1) * top + r.w1 * bot;
      }
    }
  }
  return record_op(
      "upsample_bilinear2", {x}, Shape{N, C, OH, OW}, std::move(out),
      BackwardFn{[rows, cols, N, C, H, W](std::span<const double> g, std::span<double* const> gin) {
        const std::size_t OH = 2 * H, OW = 2 * W;
        for (std::size_t nc = 0; nc < N * C; ++nc) {
          const double* go = g.data() + nc * OH * OW;
          double* dx = gin[0] + nc * H * W;
          for (std::size_t i = 0; i < OH; ++i) {
            const auto& r = rows[i];
            for (std::size_t j = 0; j < OW; ++j) {
              const auto& c = cols[j];
              const double v = go[i * OW + j];
              dx[r.i0 * W + c.i0] += (1.0 - r.w1) * (1.0 - c.w1) * v;
              dx[r.i0 * W + c.i1] += (1.0 - r.w1) * c.w1 * v;
              dx[r.i1 * W + c.i0] += r.w1 * (1.0 - c.w1) * v;
              dx[r.i1 * W + c.i1] += r.w1 * c.w1 * v;
            }
          }
        }
      }});
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_rank4(a, "concat_channels");
  require_rank4(b, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw DimensionError("concat_channels: " + to_string(a.shape()) + " and " +
                         to_string(b.shape()) + " disagree on N, H or W");
  }
  const std::size_t N = a.dim(0), CA = a.dim(1), CB = b.dim(1), HW = a.dim(2) * a.dim(3);
  std::vector<double> out;
  out.reserve(N * (CA + CB) * HW);
  for (std::size_t n = 0; n < N; ++n) {
    const auto sa = a.data().subspan(n * CA * HW, CA * HW);
    const auto sb = b.data().subspan(n * CB * HW, CB * HW);
    out.insert(out.end(), sa.begin(), sa.end());
    out.insert(out.end(), sb.begin(), sb.end());
  }
  return record_op("concat_channels", {a, b}, Shape{N, CA + CB, a.dim(2), a.dim(3)}, std::move(out),
                   BackwardFn{[N, CA, CB, HW](std::span<const double> g, std::span<double* const> gin) {
                     for (std::size_t n = 0; n < N; ++n) {
                       const double* go = g.data() + n * (CA + CB) * HW;
                       if (gin[0]) {
                         double* d = gin[0] + n * CA * HW;
                         for (std::size_t i = 0; i < CA * HW; ++i) d[i] += go[i];
                       }
                       if (gin[1]) {
                         double* d = gin[1] + n * CB * HW;
                         for (std::size_t i = 0; i < CB * HW; ++i) d[i] += go[CA * HW + i];
                       }
                     }
                   }});
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  return record_op("add", {a, b}, a.shape(), std::move(out),
                   BackwardFn{[](std::span<const double> g, std::span<double* const> gin) {
                     for (auto* d : gin) {
                       if (!d) continue;
                       for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                     }
                   }});
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  return record_op("sub", {a, b}, a.shape(), std::move(out),
                   BackwardFn{[](std::span<const double> g, std::span<double* const> gin) {
                     if (gin[0]) {
                       for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                     }
                     if (gin[1]) {
                       for (std::size_t i = 0; i < g.size(); ++i) gin[1][i] -= g[i];
                     }
                   }});
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return record_op("mul", {a, b}, a.shape(), std::move(out),
                   BackwardFn{[a, b](std::span<const double> g, std::span<double* const> gin) {
                     const auto x = a.data(), y = b.data();
                     if (gin[0]) {
                       for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * y[i];
                     }
                     if (gin[1]) {
                       for (std::size_t i = 0; i < g.size(); ++i) gin[1][i] += g[i] * x[i];
                     }
                   }});
}

Tensor scale(const Tensor& x, double k) {
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = k * in[i];
  return record_op("scale", {x}, x.shape(), std::move(out),
                   BackwardFn{[k](std::span<const double> g, std::span<double* const> gin) {
                     for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += k * g[i];
                   }});
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return record_op("sum", {x}, Shape{1}, {acc},
                   BackwardFn{[n = x.numel()](std::span<const double> g, std::span<double* const> gin) {
                     for (std::size_t i = 0; i < n; ++i) gin[0][i] += g[0];
                   }});
}

Tensor mean(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  const double n = static_cast<double>(x.numel());
  return record_op("mean", {x}, Shape{1}, {acc / n},
                   BackwardFn{[n](std::span<const double> g, std::span<double* const> gin) {
                     const auto count = static_cast<std::size_t>(n);
                     for (std::size_t i = 0; i < count; ++i) gin[0][i] += g[0] / n;
                   }});
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  const auto x = a.data(), y = b.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += (x[i] - y[i]) * (x[i] - y[i]);
  const double n = static_cast<double>(x.size());
  return record_op("mse", {a, b}, Shape{1}, {acc / n},
                   BackwardFn{[a, b, n](std::span<const double> g, std::span<double* const> gin) {
                     const auto x = a.data(), y = b.data();
                     const double k = 2.0 * g[0] / n;
                     for (std::size_t i = 0; i < x.size(); ++i) {
                       const double d = k * (x[i] - y[i]);
                       if (gin[0]) gin[0][i] += d;
                       if (gin[1]) gin[1][i] -= d;
                     }
                   }});
}

Tensor stop_gradient(const Tensor& x) {
  Tensor out(x.shape(), std::vector<double>(x.data().begin(), x.data().end()));
  return out;
}

}  // namespace mismatch::ad
