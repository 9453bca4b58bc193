// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "sepkit/audio.hpp"

namespace sepkit {

struct LossWeights {
  double lambda_stft = 0.5;
  double lambda_rec = 1.0;
  double lambda_gate = 1.0;
};

/// perm[i] is the reference index matched to estimate i.
struct PermutationResult {
  std::vector<int> perm;
  std::vector<double> pair_si_snr_db;
  double mean_si_snr_db = 0.0;
};

struct StftResolution {
  int fft_size;
  int hop;
  int win_length;
};

inline constexpr std::array<StftResolution, 3> kStftResolutions{
    {{512, 50, 240}, {1024, 120, 600}, {2048, 240, 1200}}};

constexpr double kSiSnrClampDb = 60.0;
constexpr double kLogMagFloor = 1e-7;

namespace detail {

template <typename S>
std::vector<double> to_double(std::span<const S> x) {
  return std::vector<double>(x.begin(), x.end());
}

/// SI-SNR in dB, clamped to +/-60; both signals mean-subtracted first.
/// grad_out, when non-null, receives d(si_snr)/d(est); the clamp is flat so
/// a clamped value has zero gradient.
inline double si_snr_impl(std::span<const double> ref, std::span<const double> est,
                          double* grad_out) {
  const size_t t = ref.size();
  if (t == 0 || est.size() != t)
    throw std::invalid_argument("si_snr: length mismatch");
  double ref_mean = 0.0, est_mean = 0.0;
  for (size_t i = 0; i < t; ++i) {
    ref_mean += ref[i];
    est_mean += est[i];
  }
  ref_mean /= static_cast<double>(t);
  est_mean /= static_cast<double>(t);

  double ss = 0.0, dot = 0.0;
  for (size_t i = 0; i < t; ++i) {
    const double r = ref[i] - ref_mean;
    const double e = est[i] - est_mean;
    ss += r * r;
    dot += r * e;
  }
  if (ss <= 0.0) throw std::invalid_argument("si_snr: zero-energy reference");

  const double alpha = dot / ss;
  double den = 0.0;
  for (size_t i = 0; i < t; ++i) {
    const double r = ref[i] - ref_mean;
    const double e = est[i] - est_mean;
    const double err = e - alpha * r;
    den += err * err;
  }
  const double num = dot * dot / ss;

  double value;
  bool clamped = true;
  if (num <= 0.0) {
    value = -kSiSnrClampDb;
  } else if (den <= 0.0) {
    value = kSiSnrClampDb;
  } else {
    value = 10.0 * std::log10(num / den);
    if (value > kSiSnrClampDb) {
      value = kSiSnrClampDb;
    } else if (value < -kSiSnrClampDb) {
      value = -kSiSnrClampDb;
    } else {
      clamped = false;
    }
  }

  if (grad_out != nullptr) {
    if (clamped) {
      std::fill(grad_out, grad_out + t, 0.0);
    } else {
      constexpr double k = 10.0 / 2.302585092994045684;  // 10 / ln 10
      double gmean = 0.0;
      for (size_t i = 0; i < t; ++i) {
        const double r = ref[i] - ref_mean;
        const double e = est[i] - est_mean;
        const double err = e - alpha * r;
        const double g = k * (2.0 * r / dot - 2.0 * err / den);
        grad_out[i] = g;
        gmean += g;
      }
      gmean /= static_cast<double>(t);
      for (size_t i = 0; i < t; ++i) grad_out[i] -= gmean;
    }
  }
  return value;
}

}  // namespace detail

template <typename S>
double si_snr(std::span<const S> ref, std::span<const S> est) {
  const std::vector<double> r = detail::to_double(ref);
  const std::vector<double> e = detail::to_double(est);
  return detail::si_snr_impl(r, e, nullptr);
}

/// Returns the value and writes d(si_snr)/d(est) into grad_est.
template <typename S>
double si_snr_grad(std::span<const S> ref, std::span<const S> est,
                   std::span<S> grad_est) {
  if (grad_est.size() != est.size())
    throw std::invalid_argument("si_snr_grad: gradient size mismatch");
  const std::vector<double> r = detail::to_double(ref);
  const std::vector<double> e = detail::to_double(est);
  std::vector<double> g(e.size());
  const double v = detail::si_snr_impl(r, e, g.data());
  for (size_t i = 0; i < g.size(); ++i) grad_est[i] = static_cast<S>(g[i]);
  return v;
}

template <typename S>
double si_snri(std::span<const S> ref, std::span<const S> est,
               std::span<const S> mixture) {
  return si_snr<S>(ref, est) - si_snr<S>(ref, mixture);
}

inline double si_snr(const AudioSignal& ref, const AudioSignal& est) {
  return si_snr<float>(ref.samples, est.samples);
}

inline double si_snri(const AudioSignal& ref, const AudioSignal& est,
                      const AudioSignal& mixture) {
  return si_snri<float>(ref.samples, est.samples, mixture.samples);
}

/// Exhaustive uPIT: loss = -max over permutations of the mean pairwise
/// SI-SNR. Ties keep the lexicographically smallest permutation.
template <typename S>
std::pair<double, PermutationResult> upit(
    const std::vector<std::vector<S>>& refs,
    const std::vector<std::vector<S>>& ests) {
  const size_t c = refs.size();
  if (c == 0 || ests.size() != c)
    throw std::invalid_argument("upit: count mismatch");
  if (c > 5) throw std::invalid_argument("upit: more than 5 sources");

  std::vector<std::vector<double>> pair_db(c, std::vector<double>(c));
  for (size_t e = 0; e < c; ++e)
    for (size_t r = 0; r < c; ++r)
      pair_db[e][r] = si_snr<S>(refs[r], ests[e]);

  std::vector<int> p(c);
  std::iota(p.begin(), p.end(), 0);
  PermutationResult best;
  best.mean_si_snr_db = -std::numeric_limits<double>::infinity();
  do {
    double mean = 0.0;
    for (size_t e = 0; e < c; ++e) mean += pair_db[e][static_cast<size_t>(p[e])];
    mean /= static_cast<double>(c);
    if (mean > best.mean_si_snr_db) {
      best.mean_si_snr_db = mean;
      best.perm = p;
    }
  } while (std::next_permutation(p.begin(), p.end()));

  best.pair_si_snr_db.resize(c);
  for (size_t e = 0; e < c; ++e)
    best.pair_si_snr_db[e] = pair_db[e][static_cast<size_t>(best.perm[e])];
  return {-best.mean_si_snr_db, best};
}

/// uPIT loss with d(loss)/d(est) per estimate; gradients flow through the
/// selected permutation only.
template <typename S>
double upit_grad(const std::vector<std::vector<S>>& refs,
                 const std::vector<std::vector<S>>& ests,
                 PermutationResult& perm_out,
                 std::vector<std::vector<S>>& grads) {
  auto [loss, perm] = upit(refs, ests);
  const size_t c = refs.size();
  grads.assign(c, {});
  for (size_t e = 0; e < c; ++e) {
    grads[e].assign(ests[e].size(), S(0));
    std::vector<S> g(ests[e].size());
    si_snr_grad<S>(refs[static_cast<size_t>(perm.perm[e])], ests[e], g);
    const double scale = -1.0 / static_cast<double>(c);
    for (size_t i = 0; i < g.size(); ++i)
      grads[e][i] = static_cast<S>(scale * static_cast<double>(g[i]));
  }
  perm_out = std::move(perm);
  return loss;
}

namespace detail {

/// Adjoint of the analysis STFT: scatters per-cell magnitude gradients back
/// to the waveform. dmag is frame-major like ComplexSpectrogram::cells.
inline void stft_adjoint_accumulate(const ComplexSpectrogram& spec,
                                    const std::vector<double>& dmag,
                                    std::span<double> grad) {
  const std::vector<double> win = hann_window(spec.win_length);
  const int lpad = (spec.fft_size - spec.win_length) / 2;
  const int64_t t_len = static_cast<int64_t>(grad.size());
  std::vector<std::complex<double>> h(static_cast<size_t>(spec.fft_size));
  for (int f = 0; f < spec.frames; ++f) {
    std::fill(h.begin(), h.end(), std::complex<double>(0.0, 0.0));
    bool any = false;
    for (int b = 0; b < spec.bins; ++b) {
      const double d = dmag[static_cast<size_t>(f) * spec.bins + b];
      if (d == 0.0) continue;
      const std::complex<double> x = spec.at(b, f);
      const double mag = std::abs(x);
      if (mag <= 0.0) continue;
      h[static_cast<size_t>(b)] = x * (d / mag);
      any = true;
    }
    if (!any) continue;
    // Only the stored bins carry loss; the adjoint of the forward DFT
    // restricted to them is a plain inverse-sign transform, real part taken.
    fft(h, true);
    const int64_t start = static_cast<int64_t>(f) * spec.hop - spec.fft_size / 2;
    for (int i = 0; i < spec.win_length; ++i) {
      const int64_t idx = start + lpad + i;
      if (idx < 0 || idx >= t_len) continue;
      grad[static_cast<size_t>(idx)] += win[static_cast<size_t>(i)] * h[static_cast<size_t>(lpad + i)].real();
    }
  }
}

/// One source at one resolution; accumulates into wave_grad when non-null.
inline double stft_pair_loss(std::span<const double> ref,
                             std::span<const double> est,
                             const StftResolution& res,
                             std::span<double> wave_grad) {
  const ComplexSpectrogram mr = stft(ref, res.fft_size, res.hop, res.win_length);
  const ComplexSpectrogram me = stft(est, res.fft_size, res.hop, res.win_length);
  const size_t cells = mr.cells.size();
  const double t_inv = 1.0 / static_cast<double>(ref.size());

  std::vector<double> ref_mag(cells), est_mag(cells);
  double f2 = 0.0, r2 = 0.0, mag_l1 = 0.0;
  for (size_t i = 0; i < cells; ++i) {
    ref_mag[i] = std::abs(mr.cells[i]);
    est_mag[i] = std::abs(me.cells[i]);
    const double d = ref_mag[i] - est_mag[i];
    f2 += d * d;
    r2 += ref_mag[i] * ref_mag[i];
    mag_l1 += std::abs(std::log(std::max(ref_mag[i], kLogMagFloor)) -
                       std::log(std::max(est_mag[i], kLogMagFloor)));
  }
  const double sc_den = std::max(std::sqrt(r2), 1e-12);
  const double sc = std::sqrt(f2) / sc_den;
  const double mag = t_inv * mag_l1;

  if (!wave_grad.empty()) {
    std::vector<double> dmag(cells, 0.0);
    const double sc_num = std::sqrt(f2);
    for (size_t i = 0; i < cells; ++i) {
      double d = 0.0;
      if (sc_num > 0.0) d += (est_mag[i] - ref_mag[i]) / (sc_num * sc_den);
      const double lr = std::log(std::max(ref_mag[i], kLogMagFloor));
      const double le = std::log(std::max(est_mag[i], kLogMagFloor));
      if (est_mag[i] > kLogMagFloor && le != lr)
        d += t_inv * (le > lr ? 1.0 : -1.0) / est_mag[i];
      dmag[i] = d;
    }
    stft_adjoint_accumulate(me, dmag, wave_grad);
  }
  return sc + mag;
}

}  // namespace detail

/// Inputs must already be aligned (estimate i against reference i).
template <typename S>
double multires_stft_loss(const std::vector<std::vector<S>>& refs,
                          const std::vector<std::vector<S>>& ests) {
  if (refs.size() != ests.size())
    throw std::invalid_argument("multires_stft_loss: count mismatch");
  double total = 0.0;
  for (size_t j = 0; j < refs.size(); ++j) {
    if (refs[j].size() != ests[j].size())
      throw std::invalid_argument("multires_stft_loss: length mismatch");
    const std::vector<double> r = detail::to_double<S>(refs[j]);
    const std::vector<double> e = detail::to_double<S>(ests[j]);
    for (const auto& res : kStftResolutions)
      total += detail::stft_pair_loss(r, e, res, {});
  }
  return total;
}

template <typename S>
double multires_stft_loss_grad(const std::vector<std::vector<S>>& refs,
                               const std::vector<std::vector<S>>& ests,
                               std::vector<std::vector<S>>& grads) {
  if (refs.size() != ests.size())
    throw std::invalid_argument("multires_stft_loss: count mismatch");
  double total = 0.0;
  grads.assign(ests.size(), {});
  for (size_t j = 0; j < refs.size(); ++j) {
    if (refs[j].size() != ests[j].size())
      throw std::invalid_argument("multires_stft_loss: length mismatch");
    const std::vector<double> r = detail::to_double<S>(refs[j]);
    const std::vector<double> e = detail::to_double<S>(ests[j]);
    std::vector<double> g(e.size(), 0.0);
    for (const auto& res : kStftResolutions)
      total += detail::stft_pair_loss(r, e, res, g);
    grads[j].resize(g.size());
    for (size_t i = 0; i < g.size(); ++i) grads[j][i] = static_cast<S>(g[i]);
  }
  return total;
}

/// Squared L2 between the summed estimates and the reference sum.
template <typename S>
double reconstruction_loss(const std::vector<std::vector<S>>& ests,
                           std::span<const S> reference_sum) {
  if (ests.empty()) throw std::invalid_argument("reconstruction_loss: no estimates");
  const size_t t = reference_sum.size();
  double loss = 0.0;
  for (size_t i = 0; i < t; ++i) {
    double sum = 0.0;
    for (const auto& e : ests) {
      if (e.size() != t)
        throw std::invalid_argument("reconstruction_loss: length mismatch");
      sum += static_cast<double>(e[i]);
    }
    const double d = sum - static_cast<double>(reference_sum[i]);
    loss += d * d;
  }
  return loss;
}

template <typename S>
double reconstruction_loss_grad(const std::vector<std::vector<S>>& ests,
                                std::span<const S> reference_sum,
                                std::vector<std::vector<S>>& grads) {
  if (ests.empty()) throw std::invalid_argument("reconstruction_loss: no estimates");
  const size_t t = reference_sum.size();
  for (const auto& e : ests)
    if (e.size() != t)
      throw std::invalid_argument("reconstruction_loss: length mismatch");
  double loss = 0.0;
  std::vector<double> shared(t);
  for (size_t i = 0; i < t; ++i) {
    double sum = 0.0;
    for (const auto& e : ests) sum += static_cast<double>(e[i]);
    const double d = sum - static_cast<double>(reference_sum[i]);
    loss += d * d;
    shared[i] = 2.0 * d;  // identical for every estimate
  }
  grads.assign(ests.size(), {});
  for (auto& g : grads) {
    g.resize(t);
    for (size_t i = 0; i < t; ++i) g[i] = static_cast<S>(shared[i]);
  }
  return loss;
}

/// Softmax cross-entropy over counts {2,3,4,5}.
template <typename S>
double gate_loss(std::span<const S> logits, int true_count) {
  if (logits.size() != 4) throw std::invalid_argument("gate_loss: need 4 logits");
  if (true_count < 2 || true_count > 5)
    throw std::invalid_argument("gate_loss: count out of range");
  double m = -std::numeric_limits<double>::infinity();
  for (S z : logits) m = std::max(m, static_cast<double>(z));
  double lse = 0.0;
  for (S z : logits) lse += std::exp(static_cast<double>(z) - m);
  lse = m + std::log(lse);
  return lse - static_cast<double>(logits[static_cast<size_t>(true_count - 2)]);
}

template <typename S>
double gate_loss_grad(std::span<const S> logits, int true_count,
                      std::span<S> grad) {
  const double loss = gate_loss(logits, true_count);
  if (grad.size() != 4) throw std::invalid_argument("gate_loss_grad: need 4 slots");
  double m = -std::numeric_limits<double>::infinity();
  for (S z : logits) m = std::max(m, static_cast<double>(z));
  double denom = 0.0;
  std::array<double, 4> ez{};
  for (size_t k = 0; k < 4; ++k) {
    ez[k] = std::exp(static_cast<double>(logits[k]) - m);
    denom += ez[k];
  }
  for (size_t k = 0; k < 4; ++k) {
    double g = ez[k] / denom;
    if (static_cast<int>(k) == true_count - 2) g -= 1.0;
    grad[k] = static_cast<S>(g);
  }
  return loss;
}

template <typename S>
struct TotalLossResult {
  double value = 0.0;
  double upit_value = 0.0;
  double stft_value = 0.0;
  double rec_value = 0.0;
  double gate_value = 0.0;
  PermutationResult perm;
  std::vector<std::vector<S>> est_grads;
  std::array<S, 4> logit_grads{};
};

/// Weighted multi-task objective. The STFT term is computed under the uPIT
/// permutation; reference_sum is the mixture (clean) or the sum of targets
/// (noisy-reverberant).
template <typename S>
TotalLossResult<S> total_loss(const std::vector<std::vector<S>>& refs,
                              const std::vector<std::vector<S>>& ests,
                              std::span<const S> logits, int true_count,
                              const LossWeights& w,
                              std::span<const S> reference_sum,
                              bool with_grad = true) {
  TotalLossResult<S> out;
  if (!with_grad) {
    auto [upit_loss, perm] = upit(refs, ests);
    out.upit_value = upit_loss;
    out.perm = std::move(perm);
    std::vector<std::vector<S>> aligned(refs.size());
    for (size_t e = 0; e < ests.size(); ++e)
      aligned[e] = refs[static_cast<size_t>(out.perm.perm[e])];
    out.stft_value = multires_stft_loss(aligned, ests);
    out.rec_value = reconstruction_loss(ests, reference_sum);
    out.gate_value = gate_loss(logits, true_count);
    out.value = out.upit_value + w.lambda_stft * out.stft_value +
                w.lambda_rec * out.rec_value + w.lambda_gate * out.gate_value;
    return out;
  }

  std::vector<std::vector<S>> upit_g, stft_g, rec_g;
  out.upit_value = upit_grad(refs, ests, out.perm, upit_g);
  std::vector<std::vector<S>> aligned(refs.size());
  for (size_t e = 0; e < ests.size(); ++e)
    aligned[e] = refs[static_cast<size_t>(out.perm.perm[e])];
  out.stft_value = multires_stft_loss_grad(aligned, ests, stft_g);
  out.rec_value = reconstruction_loss_grad(ests, reference_sum, rec_g);
  std::array<S, 4> gate_g{};
  out.gate_value =
      gate_loss_grad(logits, true_count, std::span<S>(gate_g.data(), 4));

  out.est_grads.assign(ests.size(), {});
  for (size_t e = 0; e < ests.size(); ++e) {
    const size_t t = ests[e].size();
    out.est_grads[e].resize(t);
    for (size_t i = 0; i < t; ++i) {
      const double g = static_cast<double>(upit_g[e][i]) +
                       w.lambda_stft * static_cast<double>(stft_g[e][i]) +
                       w.lambda_rec * static_cast<double>(rec_g[e][i]);
      out.est_grads[e][i] = static_cast<S>(g);
    }
  }
  for (size_t k = 0; k < 4; ++k)
    out.logit_grads[k] = static_cast<S>(w.lambda_gate * static_cast<double>(gate_g[k]));
  out.value = out.upit_value + w.lambda_stft * out.stft_value +
              w.lambda_rec * out.rec_value + w.lambda_gate * out.gate_value;
  return out;
}

}  // namespace sepkit
