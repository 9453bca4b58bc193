// SPDX-License-Identifier: Apache-2.0
#include "sepkit/room.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace sepkit {

namespace {
constexpr double kPi = 3.14159265358979323846;
constexpr int kSincHalfWidth = 40;  // 81-tap kernel

bool inside_room(const Vec3& p, const Vec3& dims) {
  return p.x > 0 && p.x < dims.x && p.y > 0 && p.y < dims.y && p.z > 0 &&
         p.z < dims.z;
}
}  // namespace

RoomSpec sample_room_spec(Rng& rng, int num_speakers, uint64_t seed) {
  if (num_speakers < 2 || num_speakers > 5)
    throw std::invalid_argument("sample_room_spec: num_speakers must be in {2..5}");
  RoomSpec spec;
  spec.seed = seed;
  spec.room_dims.x = rng.uniform(4.0, 7.0);
  spec.room_dims.y = rng.uniform(4.0, 7.0);
  spec.room_dims.z = 2.5;
  spec.t60_s = rng.uniform(0.16, 0.36);
  spec.mic_pos.x = spec.room_dims.x / 2.0 + rng.uniform(-0.2, 0.2);
  spec.mic_pos.y = spec.room_dims.y / 2.0 + rng.uniform(-0.2, 0.2);
  spec.mic_pos.z = 1.5;
  for (int j = 0; j < num_speakers; ++j) {
    double theta = rng.uniform(0.0, 180.0);
    double dist = 1.5 + rng.uniform(-0.2, 0.2);
    spec.source_angles_deg.push_back(theta);
    spec.source_distances_m.push_back(dist);
    double rad = theta * kPi / 180.0;
    // Sources co-planar with the mic at 1.5 m height.
    spec.source_positions.push_back(Vec3{spec.mic_pos.x + dist * std::cos(rad),
                                         spec.mic_pos.y + dist * std::sin(rad),
                                         spec.mic_pos.z});
  }
  spec.snr_db = rng.uniform(0.0, 15.0);
  return spec;
}

Absorption t60_to_absorption(double t60_s, const Vec3& d) {
  if (t60_s <= 0) throw std::invalid_argument("t60_to_absorption: t60 must be positive");
  if (d.x <= 0 || d.y <= 0 || d.z <= 0)
    throw std::invalid_argument("t60_to_absorption: invalid room dimensions");
  double volume = d.x * d.y * d.z;
  double surface = 2.0 * (d.x * d.y + d.x * d.z + d.y * d.z);
  double alpha = 0.161 * volume / (surface * t60_s);
  if (alpha > 1.0) return {1.0, true};
  return {alpha, false};
}

int default_max_order(double t60_s, const Vec3& room_dims) {
  double min_dim = std::min({room_dims.x, room_dims.y, room_dims.z});
  int order = static_cast<int>(std::ceil(kSpeedOfSound * t60_s / min_dim));
  return std::min(order, 30);
}

int default_rir_len(double t60_s, int fs) {
  return static_cast<int>(std::ceil(t60_s * fs)) + (2 * kSincHalfWidth + 1);
}

Rir simulate_rir(const Vec3& room, double absorption, const Vec3& source,
                 const Vec3& mic, int fs, int max_order, int rir_len) {
  if (!inside_room(source, room) || !inside_room(mic, room))
    throw std::invalid_argument("simulate_rir: source and mic must lie inside the room");
  if (max_order < 0) throw std::invalid_argument("simulate_rir: max_order must be >= 0");
  if (absorption <= 0.0 || absorption > 1.0)
    throw std::invalid_argument("simulate_rir: absorption must be in (0, 1]");
  const double direct = distance(source, mic);
  const int direct_delay = static_cast<int>(std::lround(fs * direct / kSpeedOfSound));
  if (rir_len <= direct_delay)
    throw std::invalid_argument("simulate_rir: rir_len shorter than the direct delay");

  Rir rir;
  rir.sample_rate_hz = fs;
  rir.direct_delay_samples = direct_delay;
  rir.taps.assign(static_cast<size_t>(rir_len), 0.0);

  const double beta = std::sqrt(1.0 - absorption);
  // Images beyond this distance cannot land inside the tap buffer.
  const double max_dist =
      (static_cast<double>(rir_len) + kSincHalfWidth) * kSpeedOfSound / fs;

  const double dims[3] = {room.x, room.y, room.z};
  const double src[3] = {source.x, source.y, source.z};
  const double mic_p[3] = {mic.x, mic.y, mic.z};
  int m_range[3];
  for (int a = 0; a < 3; ++a) {
    m_range[a] = std::min(
        max_order, static_cast<int>(std::ceil(max_dist / (2.0 * dims[a]))) + 1);
  }

  std::vector<double> kernel(2 * kSincHalfWidth + 1);
  for (int q = 0; q < 8; ++q) {
    const int p[3] = {q & 1, (q >> 1) & 1, (q >> 2) & 1};
    for (int mx = -m_range[0]; mx <= m_range[0]; ++mx) {
      int bx = std::abs(mx - p[0]) + std::abs(mx);
      if (bx > max_order) continue;
      for (int my = -m_range[1]; my <= m_range[1]; ++my) {
        int by = std::abs(my - p[1]) + std::abs(my);
        if (bx + by > max_order) continue;
        for (int mz = -m_range[2]; mz <= m_range[2]; ++mz) {
          int bounces = bx + by + std::abs(mz - p[2]) + std::abs(mz);
          if (bounces > max_order) continue;
          double img[3];
          for (int a = 0; a < 3; ++a) {
            int pa = (a == 0) ? p[0] : (a == 1) ? p[1] : p[2];
            int ma = (a == 0) ? mx : (a == 1) ? my : mz;
            img[a] = (1 - 2 * pa) * src[a] + 2.0 * ma * dims[a];
          }
          double dx = img[0] - mic_p[0], dy = img[1] - mic_p[1], dz = img[2] - mic_p[2];
          double d = std::sqrt(dx * dx + dy * dy + dz * dz);
          if (d > max_dist) continue;
          double amp = std::pow(beta, bounces) / (4.0 * kPi * std::max(d, 1e-3));
          double delay = fs * d / kSpeedOfSound;

          // Splat through the windowed-sinc fractional-delay kernel.
          int center = static_cast<int>(std::lround(delay));
          double frac = delay - center;
          for (int k = -kSincHalfWidth; k <= kSincHalfWidth; ++k) {
            double u = static_cast<double>(k) - frac;
            double sinc = (std::abs(u) < 1e-12) ? 1.0 : std::sin(kPi * u) / (kPi * u);
            double win = 0.5 * (1.0 + std::cos(kPi * u / (kSincHalfWidth + 0.5)));
            kernel[static_cast<size_t>(k + kSincHalfWidth)] = sinc * win;
          }
          for (int k = -kSincHalfWidth; k <= kSincHalfWidth; ++k) {
            int t = center + k;
            if (t < 0 || t >= rir_len) continue;
            rir.taps[static_cast<size_t>(t)] +=
                amp * kernel[static_cast<size_t>(k + kSincHalfWidth)];
          }
        }
      }
    }
  }
  return rir;
}

std::vector<float> convolve(std::span<const float> signal,
                            std::span<const double> rir) {
  if (signal.empty() || rir.empty())
    throw std::invalid_argument("convolve: empty operand");
  const size_t out_len = signal.size() + rir.size() - 1;
  std::vector<double> acc(out_len, 0.0);
  for (size_t i = 0; i < signal.size(); ++i) {
    const double s = signal[i];
    if (s == 0.0) continue;
    for (size_t j = 0; j < rir.size(); ++j) acc[i + j] += s * rir[j];
  }
  std::vector<float> out(out_len);
  for (size_t i = 0; i < out_len; ++i) out[i] = static_cast<float>(acc[i]);
  return out;
}

std::vector<double> schroeder_decay_db(std::span<const double> taps) {
  std::vector<double> edc(taps.size());
  double acc = 0.0;
  for (size_t i = taps.size(); i-- > 0;) {
    acc += taps[i] * taps[i];
    edc[i] = acc;
  }
  const double total = acc > 0.0 ? acc : 1.0;
  for (auto& v : edc) v = 10.0 * std::log10(std::max(v / total, 1e-30));
  return edc;
}

double decay_crossing_time(std::span<const double> taps, int fs,
                           double threshold_db) {
  std::vector<double> edc = schroeder_decay_db(taps);
  for (size_t i = 0; i < edc.size(); ++i)
    if (edc[i] <= threshold_db) return static_cast<double>(i) / fs;
  return -1.0;
}

}  // namespace sepkit
