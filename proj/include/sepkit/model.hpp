// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sepkit/audio.hpp"
#include "sepkit/nn.hpp"
#include "sepkit/rng.hpp"

namespace sepkit {

inline constexpr std::array<int, 4> kSupportedCounts{2, 3, 4, 5};

struct SeparatorConfig {
  int num_features = 64;  // N
  int kernel_size = 8;    // L, even
  int chunk_size = 100;   // K
  int chunk_step = 50;    // P
  int num_blocks = 2;     // b
  int hidden_size = 64;   // H
  int sample_rate_hz = 8000;
  int max_input_samples = 32000;  // sizes the expert chunk-expansion capacity
  bool gate_detach = false;

  void validate() const {
    if (num_features < 1 || hidden_size < 1 || num_blocks < 1)
      throw std::invalid_argument("separator config: sizes must be positive");
    if (kernel_size < 2 || kernel_size % 2 != 0)
      throw std::invalid_argument("separator config: kernel size must be even");
    if (chunk_step < 1 || chunk_step > chunk_size)
      throw std::invalid_argument("separator config: need 0 < step <= chunk size");
    if (max_input_samples < kernel_size)
      throw std::invalid_argument("separator config: max input shorter than kernel");
  }
};

/// Everything one block emits: all four experts' waveforms plus gate logits.
template <typename S>
struct HeadOutput {
  int block_index = 0;
  std::array<std::vector<std::vector<S>>, 4> expert_waveforms;
  std::array<S, 4> gate_logits{};
};

/// Upstream loss gradients for one block. expert_count = 0 means no waveform
/// gradients flow through this block's heads.
template <typename S>
struct BlockGrads {
  int expert_count = 0;
  std::vector<std::vector<S>> waveform_grads;
  std::array<S, 4> logit_grads{};
};

namespace model_detail {

inline int64_t padded_input_len(int64_t t, int kernel) {
  const int stride = kernel / 2;
  if (t < kernel) return kernel;
  const int64_t rem = (t - kernel) % stride;
  return rem == 0 ? t : t + (stride - rem);
}

inline int encoder_frames(int64_t padded, int kernel) {
  return static_cast<int>((padded - kernel) / (kernel / 2) + 1);
}

}  // namespace model_detail

template <typename S>
struct SeparatorCache {
  int64_t input_len = 0;
  int64_t padded_len = 0;
  int t_prime = 0;
  int num_chunks = 0;
  nn::EncoderCache<S> encoder;
  std::vector<nn::MulcatBlockCache<S>> blocks;

  struct HeadCache {
    bool active = false;
    nn::PReluCache<S> prelu;
    nn::Mat<S> a;  // PReLU output, canonical layout
    std::vector<nn::DenseCache<S>> proj;
  };
  struct GateCache {
    bool active = false;
    nn::Conv2dCache<S> c1, c2, c3, c4;
    nn::PReluCache<S> p1, p2, p3, p4, p5;
    nn::MaxPool2Cache<S> m1, m2, m3, m4;
    nn::AdaptivePoolCache<S> ap;
    nn::DenseCache<S> fc1, fc2;
    std::array<int, 10> dims{};  // h0,w0, h1,w1, h2,w2, h3,w3, h4,w4
  };
  std::vector<std::array<HeadCache, 4>> heads;
  std::vector<GateCache> gates;
};

template <typename S>
class Separator {
 public:
  explicit Separator(SeparatorConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    const int n = cfg_.num_features, h = cfg_.hidden_size;
    encoder_.configure("encoder", n, cfg_.kernel_size);
    blocks_.resize(static_cast<size_t>(cfg_.num_blocks));
    for (int l = 0; l < cfg_.num_blocks; ++l)
      blocks_[static_cast<size_t>(l)].configure("block" + std::to_string(l), n, h);

    const int64_t pad_max =
        model_detail::padded_input_len(cfg_.max_input_samples, cfg_.kernel_size);
    const int tp_max = model_detail::encoder_frames(pad_max, cfg_.kernel_size);
    chunk_capacity_ =
        static_cast<int>((tp_max + chunk_pad(tp_max, cfg_.chunk_size, cfg_.chunk_step) -
                          cfg_.chunk_size) /
                             cfg_.chunk_step +
                         1);

    for (int e = 0; e < 4; ++e) {
      const int count = kSupportedCounts[static_cast<size_t>(e)];
      const std::string base = "expert" + std::to_string(count);
      expert_prelu_[static_cast<size_t>(e)].configure(base + ".prelu", n);
      expert_expand_[static_cast<size_t>(e)].configure(
          base + ".expand", nn::ParamKind::Weight, count * chunk_capacity_,
          chunk_capacity_);
    }
    frame_proj_.configure("decoder.frame_proj", n, cfg_.kernel_size);

    gate_conv_[0].configure("gate.conv1", n, 64);
    gate_conv_[1].configure("gate.conv2", 64, 32);
    gate_conv_[2].configure("gate.conv3", 32, 16);
    gate_conv_[3].configure("gate.conv4", 16, 8);
    gate_prelu_[0].configure("gate.prelu1", 64);
    gate_prelu_[1].configure("gate.prelu2", 32);
    gate_prelu_[2].configure("gate.prelu3", 16);
    gate_prelu_[3].configure("gate.prelu4", 8);
    gate_fc1_.configure("gate.fc1", 8 * 16, 100);
    gate_fc_prelu_.configure("gate.fc_prelu", 100);
    gate_fc2_.configure("gate.fc2", 100, 4);
  }

  const SeparatorConfig& config() const { return cfg_; }
  int chunk_capacity() const { return chunk_capacity_; }

  std::vector<nn::Param<S>*> params() {
    std::vector<nn::Param<S>*> ps;
    ps.push_back(&encoder_.w);
    for (auto& blk : blocks_)
      for (nn::MulcatPass<S>* pass : {&blk.intra, &blk.inter})
        for (nn::Lstm<S>* lstm :
             {&pass->lstm_a.fwd, &pass->lstm_a.bwd, &pass->lstm_b.fwd,
              &pass->lstm_b.bwd}) {
          ps.push_back(&lstm->wx);
          ps.push_back(&lstm->wh);
          ps.push_back(&lstm->b);
          if (lstm == &pass->lstm_b.bwd) {
            ps.push_back(&pass->proj.w);
            ps.push_back(&pass->proj.b);
          }
        }
    for (int e = 0; e < 4; ++e) {
      ps.push_back(&expert_prelu_[static_cast<size_t>(e)].a);
      ps.push_back(&expert_expand_[static_cast<size_t>(e)]);
    }
    ps.push_back(&frame_proj_.w);
    ps.push_back(&frame_proj_.b);
    for (int i = 0; i < 4; ++i) {
      ps.push_back(&gate_conv_[static_cast<size_t>(i)].weight);
      ps.push_back(&gate_conv_[static_cast<size_t>(i)].bias);
      ps.push_back(&gate_prelu_[static_cast<size_t>(i)].a);
    }
    ps.push_back(&gate_fc1_.w);
    ps.push_back(&gate_fc1_.b);
    ps.push_back(&gate_fc_prelu_.a);
    ps.push_back(&gate_fc2_.w);
    ps.push_back(&gate_fc2_.b);
    return ps;
  }

  int64_t num_parameters() {
    int64_t n = 0;
    for (auto* p : params()) n += p->size();
    return n;
  }

  void init_params(uint64_t seed) {
    Rng rng(seed);
    for (auto* p : params()) nn::init_param(*p, rng);
  }

  void zero_grad() {
    for (auto* p : params()) p->zero_grad();
  }

  /// active_count = 0 runs all four experts; otherwise only the expert for
  /// that count (the gate always runs).
  std::vector<HeadOutput<S>> forward(std::span<const S> mixture,
                                     SeparatorCache<S>& cache,
                                     int active_count = 0) {
    if (mixture.empty()) throw std::invalid_argument("separator: empty input");
    const int k = cfg_.chunk_size, p = cfg_.chunk_step, n = cfg_.num_features;
    cache.input_len = static_cast<int64_t>(mixture.size());
    cache.padded_len =
        model_detail::padded_input_len(cache.input_len, cfg_.kernel_size);
    std::vector<S> padded(static_cast<size_t>(cache.padded_len), S(0));
    std::copy(mixture.begin(), mixture.end(), padded.begin());

    nn::Mat<S> feat = encoder_.forward(padded, cache.encoder);
    cache.t_prime = static_cast<int>(feat.rows());

    ChunkTensor<S> ct = chunk<S>(feat.data(), n, cache.t_prime, k, p);
    cache.num_chunks = ct.num_chunks;
    if (cache.num_chunks > chunk_capacity_)
      throw std::invalid_argument("separator: input exceeds configured capacity");

    nn::Mat<S> cur =
        Eigen::Map<const nn::Mat<S>>(ct.data.data(),
                                     static_cast<int64_t>(ct.num_chunks) * k, n);
    cache.blocks.resize(static_cast<size_t>(cfg_.num_blocks));
    cache.heads.assign(static_cast<size_t>(cfg_.num_blocks), {});
    cache.gates.assign(static_cast<size_t>(cfg_.num_blocks), {});

    std::vector<HeadOutput<S>> out;
    out.reserve(static_cast<size_t>(cfg_.num_blocks));
    for (int l = 0; l < cfg_.num_blocks; ++l) {
      cur = blocks_[static_cast<size_t>(l)].forward(
          cur, cache.num_chunks, k, cache.blocks[static_cast<size_t>(l)]);
      HeadOutput<S> ho;
      ho.block_index = l;
      for (int e = 0; e < 4; ++e) {
        const int count = kSupportedCounts[static_cast<size_t>(e)];
        if (active_count != 0 && count != active_count) continue;
        ho.expert_waveforms[static_cast<size_t>(e)] = head_forward(
            e, cur, cache, cache.heads[static_cast<size_t>(l)][static_cast<size_t>(e)]);
      }
      ho.gate_logits = gate_forward(cur, cache, cache.gates[static_cast<size_t>(l)]);
      out.push_back(std::move(ho));
    }
    return out;
  }

  /// Accumulates parameter gradients; grads must hold one entry per block.
  void backward(SeparatorCache<S>& cache, const std::vector<BlockGrads<S>>& grads) {
    if (static_cast<int>(grads.size()) != cfg_.num_blocks)
      throw std::invalid_argument("separator backward: need one grad set per block");
    const int k = cfg_.chunk_size, n = cfg_.num_features;
    const int64_t rows = static_cast<int64_t>(cache.num_chunks) * k;
    nn::Mat<S> carry = nn::Mat<S>::Zero(rows, n);
    for (int l = cfg_.num_blocks - 1; l >= 0; --l) {
      nn::Mat<S> d_ol = carry;
      const BlockGrads<S>& bg = grads[static_cast<size_t>(l)];
      if (bg.expert_count != 0) {
        const int e = expert_index(bg.expert_count);
        d_ol += head_backward(
            e, cache, cache.heads[static_cast<size_t>(l)][static_cast<size_t>(e)],
            bg.waveform_grads);
      }
      d_ol += gate_backward(cache, cache.gates[static_cast<size_t>(l)],
                            bg.logit_grads);
      carry = blocks_[static_cast<size_t>(l)].backward(
          cache.blocks[static_cast<size_t>(l)], d_ol, cache.num_chunks, k);
    }
    // Un-chunk: every chunk row that mirrors feature row t sums into it.
    nn::Mat<S> dfeat = nn::Mat<S>::Zero(cache.t_prime, n);
    for (int r = 0; r < cache.num_chunks; ++r)
      for (int kk = 0; kk < k; ++kk) {
        const int t = r * cfg_.chunk_step + kk;
        if (t < cache.t_prime)
          dfeat.row(t) += carry.row(static_cast<int64_t>(r) * k + kk);
      }
    encoder_.backward(cache.encoder, dfeat);
  }

  static int select_expert(std::span<const S> logits) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(logits.size()); ++i)
      if (logits[static_cast<size_t>(i)] > logits[static_cast<size_t>(best)])
        best = i;  // strict: ties keep the smaller count
    return best;
  }

  /// Predicted count and that expert's waveforms, from the last block.
  std::pair<int, std::vector<std::vector<S>>> infer(std::span<const S> mixture) {
    SeparatorCache<S> cache;
    std::vector<HeadOutput<S>> outs = forward(mixture, cache);
    const HeadOutput<S>& last = outs.back();
    const int e = select_expert(std::span<const S>(last.gate_logits));
    return {kSupportedCounts[static_cast<size_t>(e)],
            last.expert_waveforms[static_cast<size_t>(e)]};
  }

  void save(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
    const char magic[8] = {'S', 'E', 'P', 'K', 'T', '0', '0', '1'};
    out.write(magic, 8);
    const uint8_t dtype = sizeof(S);
    out.write(reinterpret_cast<const char*>(&dtype), 1);
    const int32_t fields[8] = {cfg_.num_features,    cfg_.kernel_size,
                               cfg_.chunk_size,      cfg_.chunk_step,
                               cfg_.num_blocks,      cfg_.hidden_size,
                               cfg_.sample_rate_hz,  cfg_.max_input_samples};
    out.write(reinterpret_cast<const char*>(fields), sizeof(fields));
    const uint8_t detach = cfg_.gate_detach ? 1 : 0;
    out.write(reinterpret_cast<const char*>(&detach), 1);
    auto ps = params();
    const uint32_t count = static_cast<uint32_t>(ps.size());
    out.write(reinterpret_cast<const char*>(&count), 4);
    for (auto* p : ps) {
      const uint16_t len = static_cast<uint16_t>(p->name.size());
      out.write(reinterpret_cast<const char*>(&len), 2);
      out.write(p->name.data(), len);
      const int32_t rows = static_cast<int32_t>(p->value.rows());
      const int32_t cols = static_cast<int32_t>(p->value.cols());
      out.write(reinterpret_cast<const char*>(&rows), 4);
      out.write(reinterpret_cast<const char*>(&cols), 4);
      out.write(reinterpret_cast<const char*>(p->value.data()),
                static_cast<std::streamsize>(p->value.size() * sizeof(S)));
    }
    if (!out) throw std::runtime_error("checkpoint write failed: " + path);
  }

  static Separator<S> load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, "SEPKT001", 8) != 0)
      throw std::runtime_error("bad checkpoint magic: " + path);
    uint8_t dtype = 0;
    in.read(reinterpret_cast<char*>(&dtype), 1);
    if (dtype != sizeof(S))
      throw std::runtime_error("checkpoint scalar width mismatch: " + path);
    int32_t fields[8];
    in.read(reinterpret_cast<char*>(fields), sizeof(fields));
    uint8_t detach = 0;
    in.read(reinterpret_cast<char*>(&detach), 1);
    SeparatorConfig cfg;
    cfg.num_features = fields[0];
    cfg.kernel_size = fields[1];
    cfg.chunk_size = fields[2];
    cfg.chunk_step = fields[3];
    cfg.num_blocks = fields[4];
    cfg.hidden_size = fields[5];
    cfg.sample_rate_hz = fields[6];
    cfg.max_input_samples = fields[7];
    cfg.gate_detach = detach != 0;
    Separator<S> model(cfg);
    auto ps = model.params();
    uint32_t count = 0;
    in.read(reinterpret_cast<char*>(&count), 4);
    if (count != ps.size())
      throw std::runtime_error("checkpoint parameter count mismatch: " + path);
    for (auto* p : ps) {
      uint16_t len = 0;
      in.read(reinterpret_cast<char*>(&len), 2);
      std::string name(len, '\0');
      in.read(name.data(), len);
      if (name != p->name)
        throw std::runtime_error("checkpoint parameter order mismatch at " + name);
      int32_t rows = 0, cols = 0;
      in.read(reinterpret_cast<char*>(&rows), 4);
      in.read(reinterpret_cast<char*>(&cols), 4);
      if (rows != p->value.rows() || cols != p->value.cols())
        throw std::runtime_error("checkpoint shape mismatch at " + name);
      in.read(reinterpret_cast<char*>(p->value.data()),
              static_cast<std::streamsize>(p->value.size() * sizeof(S)));
    }
    if (!in) throw std::runtime_error("checkpoint truncated: " + path);
    return model;
  }

  static int expert_index(int count) {
    for (int e = 0; e < 4; ++e)
      if (kSupportedCounts[static_cast<size_t>(e)] == count) return e;
    throw std::invalid_argument("unsupported speaker count");
  }

 private:
  std::vector<std::vector<S>> head_forward(int e, const nn::Mat<S>& o_l,
                                           const SeparatorCache<S>& sc,
                                           typename SeparatorCache<S>::HeadCache& hc) {
    const int count = kSupportedCounts[static_cast<size_t>(e)];
    const int k = cfg_.chunk_size, p = cfg_.chunk_step, n = cfg_.num_features;
    const int r = sc.num_chunks, tp = sc.t_prime;
    const int rcap = chunk_capacity_;
    hc.active = true;
    hc.a = expert_prelu_[static_cast<size_t>(e)].forward_cols(o_l, hc.prelu);
    Eigen::Map<const nn::Mat<S>> v(hc.a.data(), r, static_cast<int64_t>(k) * n);

    const int hop = cfg_.kernel_size / 2;
    const int64_t pad_t = static_cast<int64_t>(r - 1) * p + k;
    hc.proj.assign(static_cast<size_t>(count), {});
    std::vector<std::vector<S>> waves(static_cast<size_t>(count));
    for (int g = 0; g < count; ++g) {
      nn::Mat<S> expanded =
          expert_expand_[static_cast<size_t>(e)].value.block(
              static_cast<int64_t>(g) * rcap, 0, r, r) *
          v;
      nn::Mat<S> fm = nn::Mat<S>::Zero(pad_t, n);
      for (int rr = 0; rr < r; ++rr) {
        Eigen::Map<const nn::Mat<S>> chunk_rows(expanded.row(rr).data(), k, n);
        fm.middleRows(static_cast<int64_t>(rr) * p, k) += chunk_rows;
      }
      nn::Mat<S> frames = frame_proj_.forward(fm.topRows(tp), hc.proj[static_cast<size_t>(g)]);
      std::vector<S> wave(static_cast<size_t>(sc.padded_len), S(0));
      for (int f = 0; f < tp; ++f)
        for (int i = 0; i < cfg_.kernel_size; ++i)
          wave[static_cast<size_t>(f) * hop + i] += frames(f, i);
      wave.resize(static_cast<size_t>(sc.input_len));
      waves[static_cast<size_t>(g)] = std::move(wave);
    }
    return waves;
  }

  nn::Mat<S> head_backward(int e, const SeparatorCache<S>& sc,
                           typename SeparatorCache<S>::HeadCache& hc,
                           const std::vector<std::vector<S>>& wave_grads) {
    const int count = kSupportedCounts[static_cast<size_t>(e)];
    if (static_cast<int>(wave_grads.size()) != count)
      throw std::invalid_argument("head backward: waveform grad count mismatch");
    const int k = cfg_.chunk_size, p = cfg_.chunk_step, n = cfg_.num_features;
    const int r = sc.num_chunks, tp = sc.t_prime;
    const int rcap = chunk_capacity_;
    const int hop = cfg_.kernel_size / 2;
    const int64_t pad_t = static_cast<int64_t>(r - 1) * p + k;

    Eigen::Map<const nn::Mat<S>> v(hc.a.data(), r, static_cast<int64_t>(k) * n);
    nn::Mat<S> dv = nn::Mat<S>::Zero(r, static_cast<int64_t>(k) * n);
    for (int g = 0; g < count; ++g) {
      const std::vector<S>& dw = wave_grads[static_cast<size_t>(g)];
      nn::Mat<S> dframes(tp, cfg_.kernel_size);
      for (int f = 0; f < tp; ++f)
        for (int i = 0; i < cfg_.kernel_size; ++i) {
          const size_t idx = static_cast<size_t>(f) * hop + i;
          dframes(f, i) = idx < dw.size() ? dw[idx] : S(0);
        }
      nn::Mat<S> dfm_top =
          frame_proj_.backward(hc.proj[static_cast<size_t>(g)], dframes);
      nn::Mat<S> dfm = nn::Mat<S>::Zero(pad_t, n);
      dfm.topRows(tp) = dfm_top;
      nn::Mat<S> dexp(r, static_cast<int64_t>(k) * n);
      for (int rr = 0; rr < r; ++rr) {
        Eigen::Map<nn::Mat<S>> dst(dexp.row(rr).data(), k, n);
        dst = dfm.middleRows(static_cast<int64_t>(rr) * p, k);
      }
      auto& expand = expert_expand_[static_cast<size_t>(e)];
      expand.grad.block(static_cast<int64_t>(g) * rcap, 0, r, r).noalias() +=
          dexp * v.transpose();
      expand.touched = true;
      dv.noalias() +=
          expand.value.block(static_cast<int64_t>(g) * rcap, 0, r, r).transpose() *
          dexp;
    }
    Eigen::Map<const nn::Mat<S>> da(dv.data(), static_cast<int64_t>(r) * k, n);
    return expert_prelu_[static_cast<size_t>(e)].backward_cols(hc.prelu, da);
  }

  std::array<S, 4> gate_forward(const nn::Mat<S>& o_l, const SeparatorCache<S>& sc,
                                typename SeparatorCache<S>::GateCache& gc) {
    const int k = cfg_.chunk_size, n = cfg_.num_features, r = sc.num_chunks;
    gc.active = true;
    const int h0 = k, w0 = r;
    nn::Mat<S> image(n, static_cast<int64_t>(h0) * w0);
    for (int c = 0; c < n; ++c)
      for (int y = 0; y < h0; ++y)
        for (int x = 0; x < w0; ++x)
          image(c, static_cast<int64_t>(y) * w0 + x) =
              o_l(static_cast<int64_t>(x) * k + y, c);

    int h = h0, w = w0;
    gc.dims[0] = h;
    gc.dims[1] = w;
    nn::Mat<S> cur = image;
    nn::Conv2dCache<S>* ccs[4] = {&gc.c1, &gc.c2, &gc.c3, &gc.c4};
    nn::PReluCache<S>* pcs[4] = {&gc.p1, &gc.p2, &gc.p3, &gc.p4};
    nn::MaxPool2Cache<S>* mcs[4] = {&gc.m1, &gc.m2, &gc.m3, &gc.m4};
    for (int i = 0; i < 4; ++i) {
      cur = gate_conv_[static_cast<size_t>(i)].forward(cur, h, w, *ccs[i]);
      cur = gate_prelu_[static_cast<size_t>(i)].forward_rows(cur, *pcs[i]);
      cur = nn::maxpool2_forward(cur, h, w, *mcs[i]);
      h = (h + 1) / 2;
      w = (w + 1) / 2;
      gc.dims[2 * (i + 1)] = h;
      gc.dims[2 * (i + 1) + 1] = w;
    }
    cur = nn::adaptive_avgpool_forward(cur, h, w, 4, gc.ap);

    nn::Mat<S> flat(1, 8 * 16);
    for (int c = 0; c < 8; ++c)
      for (int i = 0; i < 16; ++i) flat(0, c * 16 + i) = cur(c, i);
    nn::Mat<S> f1 = gate_fc1_.forward(flat, gc.fc1);
    f1 = gate_fc_prelu_.forward_cols(f1, gc.p5);
    nn::Mat<S> logits = gate_fc2_.forward(f1, gc.fc2);
    return {logits(0, 0), logits(0, 1), logits(0, 2), logits(0, 3)};
  }

  nn::Mat<S> gate_backward(const SeparatorCache<S>& sc,
                           typename SeparatorCache<S>::GateCache& gc,
                           const std::array<S, 4>& dlogits) {
    const int k = cfg_.chunk_size, n = cfg_.num_features, r = sc.num_chunks;
    nn::Mat<S> dl(1, 4);
    for (int i = 0; i < 4; ++i) dl(0, i) = dlogits[static_cast<size_t>(i)];
    nn::Mat<S> df1 = gate_fc2_.backward(gc.fc2, dl);
    df1 = gate_fc_prelu_.backward_cols(gc.p5, df1);
    nn::Mat<S> dflat = gate_fc1_.backward(gc.fc1, df1);

    nn::Mat<S> dpool(8, 16);
    for (int c = 0; c < 8; ++c)
      for (int i = 0; i < 16; ++i) dpool(c, i) = dflat(0, c * 16 + i);
    nn::Mat<S> cur = nn::adaptive_avgpool_backward(gc.ap, dpool);

    nn::Conv2dCache<S>* ccs[4] = {&gc.c1, &gc.c2, &gc.c3, &gc.c4};
    nn::PReluCache<S>* pcs[4] = {&gc.p1, &gc.p2, &gc.p3, &gc.p4};
    nn::MaxPool2Cache<S>* mcs[4] = {&gc.m1, &gc.m2, &gc.m3, &gc.m4};
    for (int i = 3; i >= 0; --i) {
      cur = nn::maxpool2_backward(*mcs[i], cur);
      cur = gate_prelu_[static_cast<size_t>(i)].backward_rows(*pcs[i], cur);
      cur = gate_conv_[static_cast<size_t>(i)].backward(*ccs[i], cur);
    }
    if (cfg_.gate_detach)
      return nn::Mat<S>::Zero(static_cast<int64_t>(r) * k, n);

    const int h0 = gc.dims[0], w0 = gc.dims[1];
    nn::Mat<S> d_ol(static_cast<int64_t>(r) * k, n);
    for (int c = 0; c < n; ++c)
      for (int y = 0; y < h0; ++y)
        for (int x = 0; x < w0; ++x)
          d_ol(static_cast<int64_t>(x) * k + y, c) =
              cur(c, static_cast<int64_t>(y) * w0 + x);
    return d_ol;
  }

  SeparatorConfig cfg_;
  int chunk_capacity_ = 0;
  nn::Encoder<S> encoder_;
  std::vector<nn::MulcatBlock<S>> blocks_;
  std::array<nn::PRelu<S>, 4> expert_prelu_;
  std::array<nn::Param<S>, 4> expert_expand_;
  nn::Dense<S> frame_proj_;
  std::array<nn::Conv2d<S>, 4> gate_conv_;
  std::array<nn::PRelu<S>, 4> gate_prelu_;
  nn::Dense<S> gate_fc1_;
  nn::PRelu<S> gate_fc_prelu_;
  nn::Dense<S> gate_fc2_;
};

}  // namespace sepkit
