// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sepkit/audio.hpp"
#include "sepkit/room.hpp"

namespace sepkit {

struct MixerError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SourceRef {
  std::string file;
  int64_t offset = 0;    // samples
  int64_t duration = 0;  // samples
};

struct NoiseRef {
  std::string file;
  int64_t offset = 0;
};

/// Full provenance of one synthesized mixture. A record plus the referenced
/// corpus files is enough to re-render the audio bit-for-bit.
struct MixtureRecord {
  std::string id;
  std::string split;  // train / val / test
  int num_speakers = 0;
  std::vector<SourceRef> source_refs;
  std::vector<double> gains_db;
  std::optional<RoomSpec> room;       // present iff noise_ref present
  std::optional<NoiseRef> noise_ref;
  uint64_t seed = 0;
  // Filled after rendering (eager builds only).
  std::optional<double> norm_scale;
  std::optional<bool> absorption_clamped;
};

std::string record_to_json(const MixtureRecord& rec);
MixtureRecord record_from_json(const std::string& line);

std::vector<MixtureRecord> load_manifest(const std::string& path);
void save_manifest(const std::string& path, const std::vector<MixtureRecord>& recs);

struct DatasetSpec {
  int train_count = 200;  // desk profile; the full profile is 20000/5000/3000
  int val_count = 50;
  int test_count = 50;
  int sample_rate_hz = 8000;
  double duration_s = 4.0;
  std::string speech_root;
  std::string noise_root;  // empty for the clean setting
  uint64_t master_seed = 0;
  int max_speakers = 5;
  int fixed_speakers = 0;  // 0 = sample uniformly over {2..max_speakers}
};

/// Noise scaled so that 10 log10(E_signal / E_noise) == snr_db, with E the
/// sum of squares over the full utterance.
AudioSignal scale_noise_to_snr(const AudioSignal& signal_ref,
                               const AudioSignal& noise, double snr_db);

struct RenderedMixture {
  AudioSignal mixture;
  std::vector<AudioSignal> targets;  // anechoic, gain-scaled (and delay-aligned
                                     // in the reverberant setting)
  std::vector<AudioSignal> reverberant_components;  // empty for clean renders
  AudioSignal scaled_noise;                         // empty for clean renders
  double norm_scale = 1.0;
  bool absorption_clamped = false;
};

RenderedMixture synthesize_clean(const std::vector<AudioSignal>& sources,
                                 const std::vector<double>& gains_db);

/// Per source: image-source RIR, convolve, sum; noise scaled against the sum
/// of the reverberant sources. Targets are the dry sources, gain-scaled and
/// delayed by each source's direct-path delay. Pass noise = nullopt for a
/// noise-free reverberant render.
RenderedMixture synthesize_reverberant(const std::vector<AudioSignal>& sources,
                                       const std::vector<double>& gains_db,
                                       const RoomSpec& room,
                                       const std::optional<AudioSignal>& noise);

/// Renders one record from the manifest (reads the referenced corpus files).
RenderedMixture render_record(const MixtureRecord& rec, int sample_rate_hz);

struct BuildResult {
  std::vector<MixtureRecord> records;
  std::string manifest_path;
};

/// Samples every record from the master seed and writes manifest.jsonl under
/// out_dir. With render = true also writes the WAV tree
/// (<split>/<id>/mix.wav, s1..sC.wav, noise.wav).
BuildResult build_dataset(const DatasetSpec& spec, bool noisy,
                          const std::string& out_dir, bool render = true);

/// Root-mean-square level in dBFS; the silent-segment gate uses -60.
double rms_dbfs(std::span<const float> samples);

double energy(std::span<const float> samples);

}  // namespace sepkit
