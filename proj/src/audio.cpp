// SPDX-License-Identifier: Apache-2.0
#include "sepkit/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace sepkit {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct WavFormat {
  uint16_t format_tag = 0;
  uint16_t channels = 0;
  uint32_t sample_rate = 0;
  uint16_t bits_per_sample = 0;
};

uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

uint16_t read_u16(std::istream& in) {
  unsigned char b[2];
  in.read(reinterpret_cast<char*>(b), 2);
  return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

void write_u32(std::ostream& out, uint32_t v) {
  char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
               static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b, 4);
}

void write_u16(std::ostream& out, uint16_t v) {
  char b[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
  out.write(b, 2);
}

// Walks RIFF chunks until fmt and data are located. Returns the data chunk
// byte size and leaves the stream positioned at its payload.
uint32_t locate_chunks(std::istream& in, const std::string& path, WavFormat& fmt) {
  char tag[4];
  in.read(tag, 4);
  if (!in || std::memcmp(tag, "RIFF", 4) != 0)
    throw AudioError(path + ": not a RIFF file");
  read_u32(in);
  in.read(tag, 4);
  if (!in || std::memcmp(tag, "WAVE", 4) != 0)
    throw AudioError(path + ": not a WAVE file");

  bool have_fmt = false;
  while (in) {
    in.read(tag, 4);
    if (!in) break;
    uint32_t chunk_size = read_u32(in);
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      fmt.format_tag = read_u16(in);
      fmt.channels = read_u16(in);
      fmt.sample_rate = read_u32(in);
      read_u32(in);  // byte rate
      read_u16(in);  // block align
      fmt.bits_per_sample = read_u16(in);
      if (chunk_size > 16) in.seekg(chunk_size - 16, std::ios::cur);
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      if (!have_fmt) throw AudioError(path + ": data chunk before fmt chunk");
      return chunk_size;
    } else {
      in.seekg(chunk_size + (chunk_size & 1), std::ios::cur);
    }
  }
  throw AudioError(path + ": no data chunk");
}

void check_format(const std::string& path, const WavFormat& fmt) {
  if (fmt.channels != 1)
    throw AudioError(path + ": expected mono, got " + std::to_string(fmt.channels) +
                     " channels");
  const bool pcm16 = fmt.format_tag == 1 && fmt.bits_per_sample == 16;
  const bool f32 = fmt.format_tag == 3 && fmt.bits_per_sample == 32;
  if (!pcm16 && !f32)
    throw AudioError(path + ": unsupported encoding (format tag " +
                     std::to_string(fmt.format_tag) + ", " +
                     std::to_string(fmt.bits_per_sample) + " bit); PCM16 or float32 required");
}

}  // namespace

AudioSignal read_wav(const std::string& path, int expected_rate_hz) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw AudioError(path + ": cannot open for reading");
  WavFormat fmt;
  uint32_t data_size = locate_chunks(in, path, fmt);
  check_format(path, fmt);
  if (expected_rate_hz > 0 && static_cast<int>(fmt.sample_rate) != expected_rate_hz)
    throw AudioError(path + ": sample rate " + std::to_string(fmt.sample_rate) +
                     " Hz does not match configured " + std::to_string(expected_rate_hz) +
                     " Hz (resampling is not performed)");

  AudioSignal out;
  out.sample_rate_hz = static_cast<int>(fmt.sample_rate);
  if (fmt.bits_per_sample == 16) {
    size_t n = data_size / 2;
    std::vector<int16_t> raw(n);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * 2));
    if (!in) throw AudioError(path + ": truncated data chunk");
    out.samples.resize(n);
    for (size_t i = 0; i < n; ++i)
      out.samples[i] = static_cast<float>(raw[i]) / 32768.0f;
  } else {
    size_t n = data_size / 4;
    out.samples.resize(n);
    in.read(reinterpret_cast<char*>(out.samples.data()),
            static_cast<std::streamsize>(n * 4));
    if (!in) throw AudioError(path + ": truncated data chunk");
  }
  if (out.samples.empty()) throw AudioError(path + ": empty data chunk");
  return out;
}

WavInfo read_wav_info(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw AudioError(path + ": cannot open for reading");
  WavFormat fmt;
  uint32_t data_size = locate_chunks(in, path, fmt);
  check_format(path, fmt);
  int bytes = fmt.bits_per_sample / 8;
  return WavInfo{static_cast<int64_t>(data_size) / bytes,
                 static_cast<int>(fmt.sample_rate)};
}

void write_wav(const std::string& path, const AudioSignal& signal,
               WavEncoding encoding) {
  if (signal.samples.empty()) throw AudioError(path + ": refusing to write empty signal");
  if (signal.sample_rate_hz <= 0) throw AudioError(path + ": invalid sample rate");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw AudioError(path + ": cannot open for writing");

  const bool f32 = encoding == WavEncoding::Float32;
  const uint16_t bytes_per_sample = f32 ? 4 : 2;
  const uint32_t data_size =
      static_cast<uint32_t>(signal.samples.size()) * bytes_per_sample;

  out.write("RIFF", 4);
  write_u32(out, 36 + data_size);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  write_u32(out, 16);
  write_u16(out, f32 ? 3 : 1);
  write_u16(out, 1);
  write_u32(out, static_cast<uint32_t>(signal.sample_rate_hz));
  write_u32(out, static_cast<uint32_t>(signal.sample_rate_hz) * bytes_per_sample);
  write_u16(out, bytes_per_sample);
  write_u16(out, static_cast<uint16_t>(bytes_per_sample * 8));
  out.write("data", 4);
  write_u32(out, data_size);

  if (f32) {
    out.write(reinterpret_cast<const char*>(signal.samples.data()), data_size);
  } else {
    std::vector<int16_t> raw(signal.samples.size());
    for (size_t i = 0; i < signal.samples.size(); ++i) {
      double v = std::lround(static_cast<double>(signal.samples[i]) * 32768.0);
      raw[i] = static_cast<int16_t>(std::clamp(v, -32768.0, 32767.0));
    }
    out.write(reinterpret_cast<const char*>(raw.data()), data_size);
  }
  if (!out) throw AudioError(path + ": write failed");
}

// ---------------------------------------------------------------------------

void fft(std::vector<std::complex<double>>& buf, bool inverse) {
  const size_t n = buf.size();
  if (n == 0) return;
  if ((n & (n - 1)) != 0) {
    // Direct DFT fallback for non-power-of-two sizes.
    std::vector<std::complex<double>> out(n);
    const double sign = inverse ? 1.0 : -1.0;
    for (size_t k = 0; k < n; ++k) {
      std::complex<double> acc(0.0, 0.0);
      for (size_t t = 0; t < n; ++t) {
        double ang = sign * 2.0 * kPi * static_cast<double>(k * t % n) /
                     static_cast<double>(n);
        acc += buf[t] * std::complex<double>(std::cos(ang), std::sin(ang));
      }
      out[k] = acc;
    }
    buf.swap(out);
    return;
  }
  // Iterative radix-2 Cooley-Tukey.
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(buf[i], buf[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    double ang = (inverse ? 2.0 : -2.0) * kPi / static_cast<double>(len);
    std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (size_t k = 0; k < len / 2; ++k) {
        std::complex<double> u = buf[i + k];
        std::complex<double> v = buf[i + k + len / 2] * w;
        buf[i + k] = u + v;
        buf[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

std::vector<double> hann_window(int n) {
  std::vector<double> w(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    w[i] = 0.5 * (1.0 - std::cos(2.0 * kPi * i / static_cast<double>(n)));
  return w;
}

namespace {

template <class S>
ComplexSpectrogram stft_impl(std::span<const S> signal, int fft_size, int hop,
                             int win_length) {
  if (signal.empty()) throw AudioError("stft: empty signal");
  if (fft_size <= 0 || hop <= 0 || win_length <= 0)
    throw AudioError("stft: parameters must be positive");
  if (hop > win_length || win_length > fft_size)
    throw AudioError("stft: require hop <= win_length <= fft_size");

  ComplexSpectrogram spec;
  spec.fft_size = fft_size;
  spec.hop = hop;
  spec.win_length = win_length;
  spec.bins = fft_size / 2 + 1;
  spec.frames = static_cast<int>(signal.size()) / hop + 1;
  spec.cells.resize(static_cast<size_t>(spec.frames) * spec.bins);

  const std::vector<double> window = hann_window(win_length);
  const int t_len = static_cast<int>(signal.size());
  const int lpad = (fft_size - win_length) / 2;  // window centered in the frame

  std::vector<std::complex<double>> buf(static_cast<size_t>(fft_size));
  for (int f = 0; f < spec.frames; ++f) {
    std::fill(buf.begin(), buf.end(), std::complex<double>(0.0, 0.0));
    const int center = f * hop;
    const int start = center - fft_size / 2;  // center-padded analysis
    for (int i = 0; i < win_length; ++i) {
      int t = start + lpad + i;
      if (t < 0 || t >= t_len) continue;
      buf[static_cast<size_t>(lpad + i)] =
          static_cast<double>(signal[static_cast<size_t>(t)]) * window[i];
    }
    fft(buf);
    for (int b = 0; b < spec.bins; ++b)
      spec.cells[static_cast<size_t>(f) * spec.bins + b] = buf[static_cast<size_t>(b)];
  }
  return spec;
}

}  // namespace

ComplexSpectrogram stft(std::span<const double> signal, int fft_size, int hop,
                        int win_length) {
  return stft_impl(signal, fft_size, hop, win_length);
}

ComplexSpectrogram stft(std::span<const float> signal, int fft_size, int hop,
                        int win_length) {
  return stft_impl(signal, fft_size, hop, win_length);
}

ComplexSpectrogram stft(const AudioSignal& signal, int fft_size, int hop,
                        int win_length) {
  return stft(std::span<const float>(signal.samples), fft_size, hop, win_length);
}

}  // namespace sepkit
