// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "sepkit/audio.hpp"
#include "sepkit/rng.hpp"

namespace sepkit {

constexpr double kSpeedOfSound = 343.0;  // m/s

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

inline double distance(const Vec3& a, const Vec3& b) {
  double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

/// One sampled room/source/noise configuration (Table-1 style ranges).
struct RoomSpec {
  Vec3 room_dims;  // x,y in [4,7], z = 2.5
  double t60_s = 0.0;
  Vec3 mic_pos;
  std::vector<double> source_angles_deg;
  std::vector<double> source_distances_m;
  std::vector<Vec3> source_positions;
  double snr_db = 0.0;
  uint64_t seed = 0;

  int num_speakers() const { return static_cast<int>(source_positions.size()); }
};

/// Draw order is frozen: x, y, t60, mic dx, mic dy, then per source
/// (angle, distance), then snr. Manifest reproducibility depends on it.
RoomSpec sample_room_spec(Rng& rng, int num_speakers, uint64_t seed = 0);

struct Absorption {
  double alpha = 0.0;
  bool clamped = false;  // t60 so small that Sabine alpha exceeded 1
};

/// Sabine inversion: alpha = 0.161 V / (S t60), clamped to (0, 1].
Absorption t60_to_absorption(double t60_s, const Vec3& room_dims);

struct Rir {
  std::vector<double> taps;
  int direct_delay_samples = 0;
  int sample_rate_hz = 8000;
};

int default_max_order(double t60_s, const Vec3& room_dims);
int default_rir_len(double t60_s, int fs);

/// Shoebox image-source method. Uniform reflection coefficient
/// beta = sqrt(1 - absorption) on all six surfaces; each image contributes
/// beta^bounces / (4 pi d) at delay d/c, splatted through an 81-tap
/// Hann-windowed sinc fractional-delay kernel.
Rir simulate_rir(const Vec3& room_dims, double absorption, const Vec3& source_pos,
                 const Vec3& mic_pos, int fs, int max_order, int rir_len);

/// Full linear convolution, length len(signal) + len(rir) - 1.
std::vector<float> convolve(std::span<const float> signal,
                            std::span<const double> rir);

/// Backward-integrated energy decay curve in dB (0 dB at t = 0).
std::vector<double> schroeder_decay_db(std::span<const double> taps);

/// First time (seconds) the Schroeder curve falls below `threshold_db`.
/// Returns a negative value if it never does.
double decay_crossing_time(std::span<const double> taps, int fs,
                           double threshold_db);

}  // namespace sepkit
