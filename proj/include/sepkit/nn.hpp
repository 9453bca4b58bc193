// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sepkit/rng.hpp"

namespace sepkit::nn {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class ParamKind { Weight, Bias, Slope };

/// One learnable tensor. `touched` marks that backward accumulated into grad
/// since the last zero_grad; the optimizer must skip untouched params so that
/// inactive modules stay bit-identical.
template <typename S>
struct Param {
  std::string name;
  ParamKind kind = ParamKind::Weight;
  Mat<S> value;
  Mat<S> grad;
  bool touched = false;

  void configure(std::string n, ParamKind k, int rows, int cols) {
    name = std::move(n);
    kind = k;
    value = Mat<S>::Zero(rows, cols);
    grad = Mat<S>::Zero(rows, cols);
  }
  void zero_grad() {
    grad.setZero();
    touched = false;
  }
  int64_t size() const { return value.size(); }
};

/// Weights: uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) with fan_in = cols,
/// drawn row-major. Slopes start at 0.25, biases at zero.
template <typename S>
void init_param(Param<S>& p, Rng& rng) {
  switch (p.kind) {
    case ParamKind::Slope:
      p.value.setConstant(S(0.25));
      break;
    case ParamKind::Bias:
      p.value.setZero();
      break;
    case ParamKind::Weight: {
      const double bound = 1.0 / std::sqrt(static_cast<double>(p.value.cols()));
      S* d = p.value.data();
      for (int64_t i = 0; i < p.value.size(); ++i)
        d[i] = static_cast<S>(rng.uniform(-bound, bound));
      break;
    }
  }
}

// ---------------------------------------------------------------------------
// Dense

template <typename S>
struct DenseCache {
  Mat<S> x;
};

template <typename S>
struct Dense {
  Param<S> w;  // out x in
  Param<S> b;  // 1 x out
  bool use_bias = true;

  void configure(const std::string& name, int in, int out, bool bias = true) {
    use_bias = bias;
    w.configure(name + ".w", ParamKind::Weight, out, in);
    b.configure(name + ".b", ParamKind::Bias, 1, bias ? out : 0);
  }

  Mat<S> forward(const Mat<S>& x, DenseCache<S>& cache) {
    cache.x = x;
    Mat<S> y = x * w.value.transpose();
    if (use_bias) y.rowwise() += b.value.row(0);
    return y;
  }

  Mat<S> backward(const DenseCache<S>& cache, const Mat<S>& dy) {
    w.grad.noalias() += dy.transpose() * cache.x;
    w.touched = true;
    if (use_bias) {
      b.grad.row(0) += dy.colwise().sum();
      b.touched = true;
    }
    return dy * w.value;
  }
};

// ---------------------------------------------------------------------------
// PReLU, parameter per feature column (or per row for channel-major maps)

template <typename S>
struct PReluCache {
  Mat<S> x;
};

template <typename S>
struct PRelu {
  Param<S> a;  // 1 x channels

  void configure(const std::string& name, int channels) {
    a.configure(name + ".slope", ParamKind::Slope, 1, channels);
  }

  Mat<S> forward_cols(const Mat<S>& x, PReluCache<S>& cache) {
    cache.x = x;
    Mat<S> y = x;
    for (int i = 0; i < y.rows(); ++i)
      for (int j = 0; j < y.cols(); ++j)
        if (y(i, j) < S(0)) y(i, j) *= a.value(0, j);
    return y;
  }

  Mat<S> backward_cols(const PReluCache<S>& cache, const Mat<S>& dy) {
    Mat<S> dx(dy.rows(), dy.cols());
    for (int i = 0; i < dy.rows(); ++i)
      for (int j = 0; j < dy.cols(); ++j) {
        const S x = cache.x(i, j);
        if (x > S(0)) {
          dx(i, j) = dy(i, j);
        } else {
          dx(i, j) = dy(i, j) * a.value(0, j);
          a.grad(0, j) += dy(i, j) * x;
        }
      }
    a.touched = true;
    return dx;
  }

  Mat<S> forward_rows(const Mat<S>& x, PReluCache<S>& cache) {
    cache.x = x;
    Mat<S> y = x;
    for (int i = 0; i < y.rows(); ++i)
      for (int j = 0; j < y.cols(); ++j)
        if (y(i, j) < S(0)) y(i, j) *= a.value(0, i);
    return y;
  }

  Mat<S> backward_rows(const PReluCache<S>& cache, const Mat<S>& dy) {
    Mat<S> dx(dy.rows(), dy.cols());
    for (int i = 0; i < dy.rows(); ++i)
      for (int j = 0; j < dy.cols(); ++j) {
        const S x = cache.x(i, j);
        if (x > S(0)) {
          dx(i, j) = dy(i, j);
        } else {
          dx(i, j) = dy(i, j) * a.value(0, i);
          a.grad(0, i) += dy(i, j) * x;
        }
      }
    a.touched = true;
    return dx;
  }
};

// ---------------------------------------------------------------------------
// LSTM over batched sequences. Input and output are sequence-major:
// row b*T + t. Gate order i, f, g, o.

template <typename S>
struct LstmCache {
  Mat<S> x;      // B*T x I, as given
  Mat<S> gates;  // step-major: rows s*B..s*B+B-1, cols 4H (post-activation)
  Mat<S> c;      // step-major B x H per step
  Mat<S> tanh_c; // step-major
  Mat<S> h;      // step-major
  int batch = 0, steps = 0;
  bool reverse = false;
};

template <typename S>
struct Lstm {
  Param<S> wx;  // 4H x I
  Param<S> wh;  // 4H x H
  Param<S> b;   // 1 x 4H
  int input_size = 0, hidden = 0;

  void configure(const std::string& name, int in, int h) {
    input_size = in;
    hidden = h;
    wx.configure(name + ".wx", ParamKind::Weight, 4 * h, in);
    wh.configure(name + ".wh", ParamKind::Weight, 4 * h, h);
    b.configure(name + ".b", ParamKind::Bias, 1, 4 * h);
  }

  Mat<S> forward(const Mat<S>& x, int batch, int steps, bool reverse,
                 LstmCache<S>& cache) {
    const int h = hidden;
    cache.x = x;
    cache.batch = batch;
    cache.steps = steps;
    cache.reverse = reverse;
    cache.gates.resize(static_cast<int64_t>(steps) * batch, 4 * h);
    cache.c.resize(static_cast<int64_t>(steps) * batch, h);
    cache.tanh_c.resize(static_cast<int64_t>(steps) * batch, h);
    cache.h.resize(static_cast<int64_t>(steps) * batch, h);

    Mat<S> zx = x * wx.value.transpose();  // B*T x 4H, one big GEMM
    Mat<S> out(static_cast<int64_t>(batch) * steps, h);
    Mat<S> h_prev = Mat<S>::Zero(batch, h);
    Mat<S> c_prev = Mat<S>::Zero(batch, h);
    Mat<S> z(batch, 4 * h);
    for (int s = 0; s < steps; ++s) {
      const int t = reverse ? steps - 1 - s : s;
      for (int bi = 0; bi < batch; ++bi)
        z.row(bi) = zx.row(static_cast<int64_t>(bi) * steps + t);
      z.noalias() += h_prev * wh.value.transpose();
      z.rowwise() += b.value.row(0);

      auto za = z.array();
      auto gi = cache.gates.block(static_cast<int64_t>(s) * batch, 0, batch, h).array();
      auto gf = cache.gates.block(static_cast<int64_t>(s) * batch, h, batch, h).array();
      auto gg = cache.gates.block(static_cast<int64_t>(s) * batch, 2 * h, batch, h).array();
      auto go = cache.gates.block(static_cast<int64_t>(s) * batch, 3 * h, batch, h).array();
      gi = ((-za.block(0, 0, batch, h)).exp() + S(1)).inverse();
      gf = ((-za.block(0, h, batch, h)).exp() + S(1)).inverse();
      gg = za.block(0, 2 * h, batch, h).tanh();
      go = ((-za.block(0, 3 * h, batch, h)).exp() + S(1)).inverse();

      auto cs = cache.c.block(static_cast<int64_t>(s) * batch, 0, batch, h);
      cs.array() = gf * c_prev.array() + gi * gg;
      auto tc = cache.tanh_c.block(static_cast<int64_t>(s) * batch, 0, batch, h);
      tc.array() = cs.array().tanh();
      auto hs = cache.h.block(static_cast<int64_t>(s) * batch, 0, batch, h);
      hs.array() = go * tc.array();

      for (int bi = 0; bi < batch; ++bi)
        out.row(static_cast<int64_t>(bi) * steps + t) = hs.row(bi);
      h_prev = hs;
      c_prev = cs;
    }
    return out;
  }

  Mat<S> backward(const LstmCache<S>& cache, const Mat<S>& dout) {
    const int h = hidden;
    const int batch = cache.batch, steps = cache.steps;
    Mat<S> dz_all(static_cast<int64_t>(batch) * steps, 4 * h);
    Mat<S> dh_next = Mat<S>::Zero(batch, h);
    Mat<S> dc_next = Mat<S>::Zero(batch, h);
    Mat<S> dh(batch, h), dz(batch, 4 * h);

    for (int s = steps - 1; s >= 0; --s) {
      const int t = cache.reverse ? steps - 1 - s : s;
      for (int bi = 0; bi < batch; ++bi)
        dh.row(bi) = dout.row(static_cast<int64_t>(bi) * steps + t);
      dh += dh_next;

      const auto gi = cache.gates.block(static_cast<int64_t>(s) * batch, 0, batch, h).array();
      const auto gf = cache.gates.block(static_cast<int64_t>(s) * batch, h, batch, h).array();
      const auto gg = cache.gates.block(static_cast<int64_t>(s) * batch, 2 * h, batch, h).array();
      const auto go = cache.gates.block(static_cast<int64_t>(s) * batch, 3 * h, batch, h).array();
      const auto tc = cache.tanh_c.block(static_cast<int64_t>(s) * batch, 0, batch, h).array();

      Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> dc =
          dc_next.array() + dh.array() * go * (S(1) - tc * tc);
      Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> c_prev(batch, h);
      if (s > 0)
        c_prev = cache.c.block(static_cast<int64_t>(s - 1) * batch, 0, batch, h).array();
      else
        c_prev.setZero();

      dz.block(0, 0, batch, h).array() = dc * gg * gi * (S(1) - gi);
      dz.block(0, h, batch, h).array() = dc * c_prev * gf * (S(1) - gf);
      dz.block(0, 2 * h, batch, h).array() = dc * gi * (S(1) - gg * gg);
      dz.block(0, 3 * h, batch, h).array() = dh.array() * tc * go * (S(1) - go);

      if (s > 0) {
        wh.grad.noalias() +=
            dz.transpose() * cache.h.block(static_cast<int64_t>(s - 1) * batch, 0, batch, h);
      }
      b.grad.row(0) += dz.colwise().sum();
      dh_next.noalias() = dz * wh.value;
      dc_next.array() = dc * gf;

      for (int bi = 0; bi < batch; ++bi)
        dz_all.row(static_cast<int64_t>(bi) * steps + t) = dz.row(bi);
    }
    wx.grad.noalias() += dz_all.transpose() * cache.x;
    wx.touched = wh.touched = b.touched = true;
    return dz_all * wx.value;  // dX, sequence-major
  }
};

template <typename S>
struct BiLstmCache {
  LstmCache<S> fwd, bwd;
};

template <typename S>
struct BiLstm {
  Lstm<S> fwd, bwd;

  void configure(const std::string& name, int in, int h) {
    fwd.configure(name + ".fwd", in, h);
    bwd.configure(name + ".bwd", in, h);
  }

  Mat<S> forward(const Mat<S>& x, int batch, int steps, BiLstmCache<S>& cache) {
    Mat<S> hf = fwd.forward(x, batch, steps, false, cache.fwd);
    Mat<S> hb = bwd.forward(x, batch, steps, true, cache.bwd);
    Mat<S> out(x.rows(), 2 * fwd.hidden);
    out.leftCols(fwd.hidden) = hf;
    out.rightCols(fwd.hidden) = hb;
    return out;
  }

  Mat<S> backward(const BiLstmCache<S>& cache, const Mat<S>& dout) {
    Mat<S> dx = fwd.backward(cache.fwd, dout.leftCols(fwd.hidden));
    dx += bwd.backward(cache.bwd, dout.rightCols(fwd.hidden));
    return dx;
  }
};

// ---------------------------------------------------------------------------
// One MULCAT pass: two parallel BiLSTMs multiplied, concatenated with the
// input, projected back to the feature size, residual.

template <typename S>
struct MulcatPassCache {
  BiLstmCache<S> a, b;
  Mat<S> ha, hb;  // BiLSTM outputs (pre-multiply)
  DenseCache<S> proj;
};

template <typename S>
struct MulcatPass {
  BiLstm<S> lstm_a, lstm_b;
  Dense<S> proj;  // (2H + N) -> N

  void configure(const std::string& name, int features, int hidden) {
    lstm_a.configure(name + ".lstm_a", features, hidden);
    lstm_b.configure(name + ".lstm_b", features, hidden);
    proj.configure(name + ".proj", 2 * hidden + features, features);
  }

  Mat<S> forward(const Mat<S>& x, int batch, int steps, MulcatPassCache<S>& cache) {
    cache.ha = lstm_a.forward(x, batch, steps, cache.a);
    cache.hb = lstm_b.forward(x, batch, steps, cache.b);
    const int twoh = static_cast<int>(cache.ha.cols());
    Mat<S> cat(x.rows(), twoh + x.cols());
    cat.leftCols(twoh) = cache.ha.cwiseProduct(cache.hb);
    cat.rightCols(x.cols()) = x;
    return x + proj.forward(cat, cache.proj);
  }

  Mat<S> backward(const MulcatPassCache<S>& cache, const Mat<S>& dy) {
    Mat<S> dcat = proj.backward(cache.proj, dy);
    const int twoh = static_cast<int>(cache.ha.cols());
    Mat<S> dmul = dcat.leftCols(twoh);
    Mat<S> dx = dy + dcat.rightCols(dcat.cols() - twoh);
    dx += lstm_a.backward(cache.a, dmul.cwiseProduct(cache.hb));
    dx += lstm_b.backward(cache.b, dmul.cwiseProduct(cache.ha));
    return dx;
  }
};

/// Rows o*inner + i -> rows i*outer + o.
template <typename S>
Mat<S> permute_outer_inner(const Mat<S>& x, int outer, int inner) {
  Mat<S> y(x.rows(), x.cols());
  for (int o = 0; o < outer; ++o)
    for (int i = 0; i < inner; ++i)
      y.row(static_cast<int64_t>(i) * outer + o) =
          x.row(static_cast<int64_t>(o) * inner + i);
  return y;
}

template <typename S>
struct MulcatBlockCache {
  MulcatPassCache<S> intra, inter;
};

/// Intra-chunk pass (sequences of length K) then inter-chunk pass
/// (sequences of length R). Input/output are canonical chunk tensors,
/// row r*K + k.
template <typename S>
struct MulcatBlock {
  MulcatPass<S> intra, inter;

  void configure(const std::string& name, int features, int hidden) {
    intra.configure(name + ".intra", features, hidden);
    inter.configure(name + ".inter", features, hidden);
  }

  Mat<S> forward(const Mat<S>& x, int num_chunks, int chunk_size,
                 MulcatBlockCache<S>& cache) {
    Mat<S> y = intra.forward(x, num_chunks, chunk_size, cache.intra);
    Mat<S> yt = permute_outer_inner(y, num_chunks, chunk_size);
    Mat<S> zt = inter.forward(yt, chunk_size, num_chunks, cache.inter);
    return permute_outer_inner(zt, chunk_size, num_chunks);
  }

  Mat<S> backward(const MulcatBlockCache<S>& cache, const Mat<S>& dy,
                  int num_chunks, int chunk_size) {
    Mat<S> dzt = permute_outer_inner(dy, num_chunks, chunk_size);
    Mat<S> dyt = inter.backward(cache.inter, dzt);
    Mat<S> dy1 = permute_outer_inner(dyt, chunk_size, num_chunks);
    return intra.backward(cache.intra, dy1);
  }
};

// ---------------------------------------------------------------------------
// Encoder: N kernels of length L, stride L/2, no bias, ReLU.

template <typename S>
struct EncoderCache {
  Mat<S> frames;  // T' x L
  Mat<S> pre;     // T' x N, pre-ReLU
  int64_t padded_len = 0;
};

template <typename S>
struct Encoder {
  Param<S> w;  // N x L
  int kernel = 0, stride = 0;

  void configure(const std::string& name, int features, int kernel_size) {
    kernel = kernel_size;
    stride = kernel_size / 2;
    w.configure(name + ".w", ParamKind::Weight, features, kernel_size);
  }

  Mat<S> forward(std::span<const S> padded, EncoderCache<S>& cache) {
    const int64_t t = static_cast<int64_t>(padded.size());
    if (t < kernel) throw std::invalid_argument("encoder: input shorter than kernel");
    if ((t - kernel) % stride != 0)
      throw std::invalid_argument("encoder: input not aligned to stride");
    const int64_t frames = (t - kernel) / stride + 1;
    cache.padded_len = t;
    cache.frames.resize(frames, kernel);
    for (int64_t f = 0; f < frames; ++f)
      for (int i = 0; i < kernel; ++i)
        cache.frames(f, i) = padded[static_cast<size_t>(f * stride + i)];
    cache.pre = cache.frames * w.value.transpose();
    return cache.pre.cwiseMax(S(0));
  }

  std::vector<S> backward(const EncoderCache<S>& cache, const Mat<S>& dfeat) {
    Mat<S> dpre = dfeat;
    for (int64_t i = 0; i < dpre.rows(); ++i)
      for (int64_t j = 0; j < dpre.cols(); ++j)
        if (cache.pre(i, j) <= S(0)) dpre(i, j) = S(0);
    w.grad.noalias() += dpre.transpose() * cache.frames;
    w.touched = true;
    Mat<S> dframes = dpre * w.value;
    std::vector<S> dx(static_cast<size_t>(cache.padded_len), S(0));
    for (int64_t f = 0; f < dframes.rows(); ++f)
      for (int i = 0; i < kernel; ++i)
        dx[static_cast<size_t>(f * stride + i)] += dframes(f, i);
    return dx;
  }
};

// ---------------------------------------------------------------------------
// 2-D conv (3x3, pad 1) on channel-major maps: X is C x (H*W), row-major
// spatial index y*W + x.

template <typename S>
struct Conv2dCache {
  Mat<S> cols;  // (C_in*9) x (H*W)
  int h = 0, w = 0;
};

template <typename S>
struct Conv2d {
  Param<S> weight;  // C_out x C_in*9
  Param<S> bias;    // 1 x C_out
  int c_in = 0, c_out = 0;

  void configure(const std::string& name, int in, int out) {
    c_in = in;
    c_out = out;
    weight.configure(name + ".w", ParamKind::Weight, out, in * 9);
    bias.configure(name + ".b", ParamKind::Bias, 1, out);
  }

  Mat<S> forward(const Mat<S>& x, int h, int w, Conv2dCache<S>& cache) {
    cache.h = h;
    cache.w = w;
    cache.cols.setZero(c_in * 9, h * w);
    for (int c = 0; c < c_in; ++c)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const int row = c * 9 + ky * 3 + kx;
          for (int y = 0; y < h; ++y) {
            const int sy = y + ky - 1;
            if (sy < 0 || sy >= h) continue;
            for (int xx = 0; xx < w; ++xx) {
              const int sx = xx + kx - 1;
              if (sx < 0 || sx >= w) continue;
              cache.cols(row, y * w + xx) = x(c, sy * w + sx);
            }
          }
        }
    Mat<S> y = weight.value * cache.cols;
    y.colwise() += bias.value.row(0).transpose();
    return y;
  }

  Mat<S> backward(const Conv2dCache<S>& cache, const Mat<S>& dy) {
    weight.grad.noalias() += dy * cache.cols.transpose();
    bias.grad.row(0) += dy.rowwise().sum().transpose();
    weight.touched = bias.touched = true;
    Mat<S> dcols = weight.value.transpose() * dy;
    const int h = cache.h, w = cache.w;
    Mat<S> dx = Mat<S>::Zero(c_in, h * w);
    for (int c = 0; c < c_in; ++c)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const int row = c * 9 + ky * 3 + kx;
          for (int y = 0; y < h; ++y) {
            const int sy = y + ky - 1;
            if (sy < 0 || sy >= h) continue;
            for (int xx = 0; xx < w; ++xx) {
              const int sx = xx + kx - 1;
              if (sx < 0 || sx >= w) continue;
              dx(c, sy * w + sx) += dcols(row, y * w + xx);
            }
          }
        }
    return dx;
  }
};

// ---------------------------------------------------------------------------
// 2x2 max pool, stride 2, ceil mode.

template <typename S>
struct MaxPool2Cache {
  std::vector<int> argmax;  // per (channel, output cell): input spatial index
  int h = 0, w = 0, ho = 0, wo = 0;
};

template <typename S>
Mat<S> maxpool2_forward(const Mat<S>& x, int h, int w, MaxPool2Cache<S>& cache) {
  const int ho = (h + 1) / 2, wo = (w + 1) / 2;
  const int channels = static_cast<int>(x.rows());
  cache.h = h;
  cache.w = w;
  cache.ho = ho;
  cache.wo = wo;
  cache.argmax.assign(static_cast<size_t>(channels) * ho * wo, 0);
  Mat<S> y(channels, ho * wo);
  for (int c = 0; c < channels; ++c)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        S best = std::numeric_limits<S>::lowest();
        int best_idx = -1;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const int sy = oy * 2 + dy, sx = ox * 2 + dx;
            if (sy >= h || sx >= w) continue;
            const S v = x(c, sy * w + sx);
            if (v > best) {
              best = v;
              best_idx = sy * w + sx;
            }
          }
        y(c, oy * wo + ox) = best;
        cache.argmax[static_cast<size_t>(c) * ho * wo + oy * wo + ox] = best_idx;
      }
  return y;
}

template <typename S>
Mat<S> maxpool2_backward(const MaxPool2Cache<S>& cache, const Mat<S>& dy) {
  const int channels = static_cast<int>(dy.rows());
  Mat<S> dx = Mat<S>::Zero(channels, cache.h * cache.w);
  for (int c = 0; c < channels; ++c)
    for (int i = 0; i < cache.ho * cache.wo; ++i)
      dx(c, cache.argmax[static_cast<size_t>(c) * cache.ho * cache.wo + i]) += dy(c, i);
  return dx;
}

// ---------------------------------------------------------------------------
// Adaptive average pool to a fixed out x out grid; cell (i,j) averages input
// rows [floor(i*H/out), ceil((i+1)*H/out)) and likewise for columns.

template <typename S>
struct AdaptivePoolCache {
  int h = 0, w = 0, out = 0;
};

template <typename S>
Mat<S> adaptive_avgpool_forward(const Mat<S>& x, int h, int w, int out,
                                AdaptivePoolCache<S>& cache) {
  cache.h = h;
  cache.w = w;
  cache.out = out;
  const int channels = static_cast<int>(x.rows());
  Mat<S> y(channels, out * out);
  for (int c = 0; c < channels; ++c)
    for (int i = 0; i < out; ++i) {
      const int y0 = i * h / out;
      const int y1 = ((i + 1) * h + out - 1) / out;
      for (int j = 0; j < out; ++j) {
        const int x0 = j * w / out;
        const int x1 = ((j + 1) * w + out - 1) / out;
        double acc = 0.0;
        for (int sy = y0; sy < y1; ++sy)
          for (int sx = x0; sx < x1; ++sx) acc += static_cast<double>(x(c, sy * w + sx));
        y(c, i * out + j) = static_cast<S>(acc / ((y1 - y0) * (x1 - x0)));
      }
    }
  return y;
}

template <typename S>
Mat<S> adaptive_avgpool_backward(const AdaptivePoolCache<S>& cache, const Mat<S>& dy) {
  const int channels = static_cast<int>(dy.rows());
  const int h = cache.h, w = cache.w, out = cache.out;
  Mat<S> dx = Mat<S>::Zero(channels, h * w);
  for (int c = 0; c < channels; ++c)
    for (int i = 0; i < out; ++i) {
      const int y0 = i * h / out;
      const int y1 = ((i + 1) * h + out - 1) / out;
      for (int j = 0; j < out; ++j) {
        const int x0 = j * w / out;
        const int x1 = ((j + 1) * w + out - 1) / out;
        const S g = dy(c, i * out + j) / static_cast<S>((y1 - y0) * (x1 - x0));
        for (int sy = y0; sy < y1; ++sy)
          for (int sx = x0; sx < x1; ++sx) dx(c, sy * w + sx) += g;
      }
    }
  return dx;
}

}  // namespace sepkit::nn
