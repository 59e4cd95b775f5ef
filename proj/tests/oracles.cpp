#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mismatch/tensor.hpp"

namespace oracle {

std::vector<double> conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int pad, int dil) {
  const long N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const long O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const long OH = H + 2 * pad - (dil * (KH - 1) + 1) + 1;
  const long OW = W + 2 * pad - (dil * (KW - 1) + 1) + 1;
  const auto xd = x.data(), wd = w.data(), bd = b.data();
  std::vector<double> out(N * O * OH * OW);
  for (long n = 0; n < N; ++n)
    for (long o = 0; o < O; ++o)
      for (long i = 0; i < OH; ++i)
        for (long j = 0; j < OW; ++j) {
          double acc = bd[o];
          for (long c = 0; c < C; ++c)
            for (long ki = 0; ki < KH; ++ki)
              for (long kj = 0; kj < KW; ++kj) {
                const long r = i - pad + ki * dil, s = j - pad + kj * dil;
                if (r < 0 || r >= H || s < 0 || s >= W) continue;
                acc += wd[((o * C + c) * KH + ki) * KW + kj] * xd[((n * C + c) * H + r) * W + s];
              }
          out[((n * O + o) * OH + i) * OW + j] = acc;
        }
  return out;
}

std::vector<double> maxpool2(const Tensor& x) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto xd = x.data();
  std::vector<double> out;
  for (std::size_t p = 0; p < N * C; ++p)
    for (std::size_t i = 0; i < H / 2; ++i)
      for (std::size_t j = 0; j < W / 2; ++j) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t a = 0; a < 2; ++a)
          for (std::size_t c = 0; c < 2; ++c) m = std::max(m, xd[p * H * W + (2 * i + a) * W + 2 * j + c]);
        out.push_back(m);
      }
  return out;
}

std::vector<double> morph(const Tensor& x, bool dilate) {
  const long N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto xd = x.data();
  std::vector<double> out;
  for (long p = 0; p < N * C; ++p)
    for (long i = 0; i < H; ++i)
      for (long j = 0; j < W; ++j) {
        double m = xd[p * H * W + i * W + j];
        for (long a = -1; a <= 1; ++a)
          for (long c = -1; c <= 1; ++c) {
            const long r = i + a, s = j + c;
            if (r < 0 || r >= H || s < 0 || s >= W) continue;
            const double v = xd[p * H * W + r * W + s];
            m = dilate ? std::max(m, v) : std::min(m, v);
          }
        out.push_back(m);
      }
  return out;
}

std::vector<double> upsample2(const Tensor& x) {
  const long N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto xd = x.data();
  auto coord = [](long o, long size, long& i0, long& i1, double& f) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    if (src < 0.0) src = 0.0;
    i0 = static_cast<long>(std::floor(src));
    if (i0 > size - 1) i0 = size - 1;
    i1 = std::min(i0 + 1, size - 1);
    f = src - static_cast<double>(i0);
  };
  std::vector<double> out;
  for (long p = 0; p < N * C; ++p)
    for (long i = 0; i < 2 * H; ++i)
      for (long j = 0; j < 2 * W; ++j) {
        long r0, r1, s0, s1;
        double fr, fs;
        coord(i, H, r0, r1, fr);
        coord(j, W, s0, s1, fs);
        const double* plane = xd.data() + p * H * W;
        const double top = (1 - fs) * plane[r0 * W + s0] + fs * plane[r0 * W + s1];
        const double bot = (1 - fs) * plane[r1 * W + s0] + fs * plane[r1 * W + s1];
        out.push_back((1 - fr) * top + fr * bot);
      }
  return out;
}

std::vector<std::vector<double>> average(
    const std::vector<std::vector<std::vector<double>>>& snapshots) {
  std::vector<std::vector<double>> out = snapshots.at(0);
  for (auto& arr : out) std::fill(arr.begin(), arr.end(), 0.0);
  for (const auto& snap : snapshots)
    for (std::size_t a = 0; a < out.size(); ++a)
      for (std::size_t i = 0; i < out[a].size(); ++i) out[a][i] += snap[a][i];
  for (auto& arr : out)
    for (auto& v : arr) v /= static_cast<double>(snapshots.size());
  return out;
}

double ece(const std::vector<double>& probs, const std::vector<double>& gt, std::size_t bins,
           mismatch::metrics::ConfidenceMode mode, double threshold) {
  const bool max_class = mode == mismatch::metrics::ConfidenceMode::max_class;
  const double lo = max_class ? 0.5 : 0.0, hi = 1.0;
  std::vector<std::vector<std::size_t>> members(bins);
  std::vector<double> conf(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    conf[i] = max_class ? std::max(probs[i], 1.0 - probs[i]) : probs[i];
    for (std::size_t m = 0; m < bins; ++m) {
      const double a = lo + (hi - lo) * static_cast<double>(m) / static_cast<double>(bins);
      const double b = lo + (hi - lo) * static_cast<double>(m + 1) / static_cast<double>(bins);
      if ((conf[i] > a || (m == 0 && conf[i] >= a)) && conf[i] <= b) {
        members[m].push_back(i);
        break;
      }
    }
  }
  double total = 0.0;
  for (const auto& mem : members) {
    if (mem.empty()) continue;
    double correct = 0.0, c = 0.0;
    for (auto i : mem) {
      correct += ((probs[i] >= threshold) == (gt[i] > 0.5)) ? 1.0 : 0.0;
      c += conf[i];
    }
    const double k = static_cast<double>(mem.size());
    total += k / static_cast<double>(probs.size()) * std::abs(correct / k - c / k);
  }
  return total;
}

double dice(const std::vector<double>& p, const std::vector<double>& g, double smooth) {
  double inter = 0.0, sp = 0.0, sg = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += p[i] * g[i];
    sp += p[i];
    sg += g[i];
  }
  return 1.0 - (2.0 * inter + smooth) / (sp + sg + smooth);
}

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(mismatch::ad::numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

Tensor random_parameter(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(mismatch::ad::numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::parameter(std::move(shape), std::move(v));
}

GradCheck check_gradients(const std::function<Tensor()>& loss, std::vector<Tensor> inputs,
                          double h) {
  std::vector<std::vector<double>> analytic;
  {
    mismatch::ad::Tape tape;
    for (auto& t : inputs) t.zero_grad();
    const Tensor l = loss();
    tape.backward(l);
    for (auto& t : inputs) analytic.emplace_back(t.grad().begin(), t.grad().end());
  }

  GradCheck out;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto values = inputs[k].mutable_data();
    double diff2 = 0.0, a2 = 0.0, f2 = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = loss().item();
      values[i] = saved - h;
      const double down = loss().item();
      values[i] = saved;
      out.evaluations += 2;
      const double fd = (up - down) / (2.0 * h);
      diff2 += (fd - analytic[k][i]) * (fd - analytic[k][i]);
      a2 += analytic[k][i] * analytic[k][i];
      f2 += fd * fd;
    }
    const double denom = std::max({std::sqrt(a2), std::sqrt(f2), 1e-12});
    out.max_relative_error = std::max(out.max_relative_error, std::sqrt(diff2) / denom);
  }
  return out;
}

}  // namespace oracle
