// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <complex>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sepkit {

struct AudioError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Mono audio, linear amplitude nominally in [-1, 1].
struct AudioSignal {
  std::vector<float> samples;
  int sample_rate_hz = 8000;

  size_t size() const { return samples.size(); }
};

enum class WavEncoding { Pcm16, Float32 };

/// Reads a mono RIFF WAV (PCM16 or IEEE float32). PCM16 samples are scaled
/// by 1/32768. If expected_rate_hz > 0 and the file disagrees, throws;
/// signals are never silently resampled.
AudioSignal read_wav(const std::string& path, int expected_rate_hz = 0);

void write_wav(const std::string& path, const AudioSignal& signal,
               WavEncoding encoding = WavEncoding::Float32);

/// Sample count and rate from the WAV header alone (no payload read).
struct WavInfo {
  int64_t num_samples;
  int sample_rate_hz;
};
WavInfo read_wav_info(const std::string& path);

// ---------------------------------------------------------------------------
// FFT / STFT

/// In-place complex FFT, radix-2 for power-of-two sizes with a direct-DFT
/// fallback. inverse=true applies the conjugate transform without the 1/N
/// factor (callers scale when they need a true inverse).
void fft(std::vector<std::complex<double>>& buf, bool inverse = false);

/// Periodic Hann window of length n.
std::vector<double> hann_window(int n);

struct ComplexSpectrogram {
  int fft_size = 0;
  int hop = 0;
  int win_length = 0;
  int bins = 0;    // fft_size / 2 + 1
  int frames = 0;  // floor(T / hop) + 1
  std::vector<std::complex<double>> cells;  // frame-major: [frame][bin]

  std::complex<double>& at(int bin, int frame) {
    return cells[static_cast<size_t>(frame) * bins + bin];
  }
  std::complex<double> at(int bin, int frame) const {
    return cells[static_cast<size_t>(frame) * bins + bin];
  }
  double magnitude(int bin, int frame) const { return std::abs(at(bin, frame)); }
};

/// Center-padded analysis STFT. Hann window of win_length, zero-padded
/// symmetrically to fft_size; frame t is centered at t*hop.
ComplexSpectrogram stft(std::span<const double> signal, int fft_size, int hop,
                        int win_length);
ComplexSpectrogram stft(std::span<const float> signal, int fft_size, int hop,
                        int win_length);
ComplexSpectrogram stft(const AudioSignal& signal, int fft_size, int hop,
                        int win_length);

// ---------------------------------------------------------------------------
// Chunking / overlap-add. Generic over an item size so the same primitives
// serve waveforms (item = 1) and feature maps (item = N values per step).

template <class S>
struct ChunkTensor {
  int item = 0;        // values per time step (N)
  int chunk_len = 0;   // K
  int num_chunks = 0;  // R
  int pad_len = 0;     // zeros appended to the time axis before chunking
  std::vector<S> data;  // [chunk r][step k][item n]

  S* chunk(int r) { return data.data() + static_cast<size_t>(r) * chunk_len * item; }
  const S* chunk(int r) const {
    return data.data() + static_cast<size_t>(r) * chunk_len * item;
  }
};

/// R = floor((T + pad - K) / P) + 1 with minimal pad so the division is exact
/// and T + pad >= K. Chunk r is the padded slice [rP, rP + K).
inline int chunk_pad(int t_len, int chunk_len, int step) {
  int span = t_len < chunk_len ? chunk_len : t_len;
  int rem = (span - chunk_len) % step;
  return (span - t_len) + (rem == 0 ? 0 : step - rem);
}

template <class S>
ChunkTensor<S> chunk(const S* features, int item, int t_len, int chunk_len,
                     int step) {
  if (chunk_len <= 0 || step <= 0) throw std::invalid_argument("chunk: K and P must be positive");
  if (step > chunk_len) throw std::invalid_argument("chunk: P must not exceed K");
  if (t_len <= 0) throw std::invalid_argument("chunk: empty input");
  ChunkTensor<S> out;
  out.item = item;
  out.chunk_len = chunk_len;
  out.pad_len = chunk_pad(t_len, chunk_len, step);
  out.num_chunks = (t_len + out.pad_len - chunk_len) / step + 1;
  out.data.assign(static_cast<size_t>(out.num_chunks) * chunk_len * item, S(0));
  for (int r = 0; r < out.num_chunks; ++r) {
    S* dst = out.chunk(r);
    for (int k = 0; k < chunk_len; ++k) {
      int t = r * step + k;
      if (t >= t_len) break;  // zero padding region
      const S* src = features + static_cast<size_t>(t) * item;
      for (int n = 0; n < item; ++n) dst[k * item + n] = src[n];
    }
  }
  return out;
}

/// Plain overlap-add: output[t] accumulates every frame value that lands on t.
/// frames is frame-major [m][l*item + n]; output length (M-1)*hop + L.
template <class S>
std::vector<S> overlap_add(const S* frames, int frame_len, int num_frames,
                           int hop, int item = 1) {
  if (num_frames <= 0) throw std::invalid_argument("overlap_add: empty frame set");
  if (hop <= 0) throw std::invalid_argument("overlap_add: hop must be positive");
  int out_len = (num_frames - 1) * hop + frame_len;
  std::vector<S> out(static_cast<size_t>(out_len) * item, S(0));
  for (int m = 0; m < num_frames; ++m) {
    const S* f = frames + static_cast<size_t>(m) * frame_len * item;
    S* dst = out.data() + static_cast<size_t>(m) * hop * item;
    for (int i = 0; i < frame_len * item; ++i) dst[i] += f[i];
  }
  return out;
}

/// Companion weights: overlap-add of all-ones frames, for normalization.
template <class S = double>
std::vector<S> overlap_add_weights(int frame_len, int num_frames, int hop) {
  std::vector<S> ones(static_cast<size_t>(frame_len), S(1));
  std::vector<S> w(static_cast<size_t>((num_frames - 1) * hop + frame_len), S(0));
  for (int m = 0; m < num_frames; ++m)
    for (int i = 0; i < frame_len; ++i) w[m * hop + i] += S(1);
  return w;
}

}  // namespace sepkit
