// SPDX-License-Identifier: Apache-2.0
#include "sepkit/mixer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "sepkit/audio.hpp"
#include "sepkit/room.hpp"
#include "testers.hpp"

using sepkit::AudioSignal;
using sepkit::build_dataset;
using sepkit::DatasetSpec;
using sepkit::energy;
using sepkit::load_manifest;
using sepkit::MixerError;
using sepkit::MixtureRecord;
using sepkit::read_wav;
using sepkit::record_from_json;
using sepkit::record_to_json;
using sepkit::render_record;
using sepkit::RenderedMixture;
using sepkit::RoomSpec;
using sepkit::scale_noise_to_snr;
using sepkit::synthesize_clean;
using sepkit::synthesize_reverberant;
using sepkit::Vec3;

namespace fs = std::filesystem;

namespace {

AudioSignal make_sig(std::vector<float> v, int rate = 8000) {
  return AudioSignal{std::move(v), rate};
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

// Replicates the fixed mixing order: stems in index order, noise last.
std::vector<float> sequential_sum(const std::vector<AudioSignal>& stems,
                                  const AudioSignal* extra = nullptr) {
  std::vector<float> acc(stems.front().samples.size(), 0.0f);
  for (const auto& s : stems)
    for (size_t i = 0; i < acc.size(); ++i) acc[i] += s.samples[i];
  if (extra)
    for (size_t i = 0; i < acc.size(); ++i) acc[i] += extra->samples[i];
  return acc;
}

}  // namespace

TEST_CASE("scale_noise_to_snr hits the requested ratio") {
  const AudioSignal sig = make_sig(testers::random_signal(4000, 10));
  const AudioSignal noise = make_sig(testers::random_signal(4000, 11));

  SUBCASE("0 dB means equal energies") {
    const AudioSignal out = scale_noise_to_snr(sig, noise, 0.0);
    CHECK(energy(out.samples) == doctest::Approx(energy(sig.samples)).epsilon(1e-6));
  }
  SUBCASE("15 dB leaves the noise 15 dB below the signal") {
    const AudioSignal out = scale_noise_to_snr(sig, noise, 15.0);
    const double ratio_db =
        10.0 * std::log10(energy(sig.samples) / energy(out.samples));
    CHECK(ratio_db == doctest::Approx(15.0).epsilon(1e-6));
  }
  SUBCASE("scaling is a single gain applied to every sample") {
    const AudioSignal out = scale_noise_to_snr(sig, noise, 7.0);
    const double k = out.samples[0] / noise.samples[0];
    for (size_t i = 1; i < out.samples.size(); ++i)
      CHECK(out.samples[i] == doctest::Approx(k * noise.samples[i]).epsilon(1e-5));
  }
  SUBCASE("degenerate operands throw") {
    const AudioSignal zeros = make_sig(std::vector<float>(4000, 0.0f));
    CHECK_THROWS_AS(scale_noise_to_snr(zeros, noise, 0.0), MixerError);
    CHECK_THROWS_AS(scale_noise_to_snr(sig, zeros, 0.0), MixerError);
    const AudioSignal shorter = make_sig(testers::random_signal(100, 1));
    CHECK_THROWS_AS(scale_noise_to_snr(sig, shorter, 0.0), MixerError);
  }
}

TEST_CASE("synthesize_clean sums gain-scaled sources") {
  SUBCASE("two identical sources at 0 dB double the signal") {
    const AudioSignal s = make_sig(testers::speech_like(4000, 8000, 0, 5));
    const RenderedMixture rm = synthesize_clean({s, s}, {0.0, 0.0});
    REQUIRE(rm.targets.size() == 2);
    REQUIRE(rm.mixture.samples.size() == s.samples.size());
    for (size_t i = 0; i < s.samples.size(); ++i) {
      CHECK(rm.targets[0].samples[i] == s.samples[i]);
      CHECK(rm.mixture.samples[i] == 2.0f * s.samples[i]);
    }
    CHECK(rm.norm_scale == 1.0);
    CHECK(rm.reverberant_components.empty());
    CHECK(rm.scaled_noise.samples.empty());
  }
  SUBCASE("a -5 dB gain shows up as a 5 dB energy gap") {
    const AudioSignal s = make_sig(testers::speech_like(4000, 8000, 1, 6));
    const RenderedMixture rm = synthesize_clean({s, s}, {0.0, -5.0});
    const double gap =
        10.0 * std::log10(energy(rm.targets[0].samples) / energy(rm.targets[1].samples));
    CHECK(gap == doctest::Approx(5.0).epsilon(1e-5));
  }
  SUBCASE("mixture is the sequential float sum of the targets") {
    std::vector<AudioSignal> srcs;
    for (int j = 0; j < 4; ++j)
      srcs.push_back(make_sig(testers::speech_like(3000, 8000, j, 20 + j)));
    const RenderedMixture rm = synthesize_clean(srcs, {0.4, -1.2, 0.0, 2.0});
    const std::vector<float> want = sequential_sum(rm.targets);
    for (size_t i = 0; i < want.size(); ++i) CHECK(rm.mixture.samples[i] == want[i]);
  }
  SUBCASE("five sources are accepted, one and six are not") {
    const AudioSignal s = make_sig(testers::speech_like(1000, 8000, 2, 7));
    CHECK_NOTHROW(synthesize_clean({s, s, s, s, s}, std::vector<double>(5, 0.0)));
    CHECK_THROWS_AS(synthesize_clean({s}, {0.0}), MixerError);
    CHECK_THROWS_AS(synthesize_clean(std::vector<AudioSignal>(6, s),
                                     std::vector<double>(6, 0.0)),
                    MixerError);
    CHECK_THROWS_AS(synthesize_clean({s, s}, {0.0}), MixerError);
  }
  SUBCASE("clipping mixtures are rescaled to a 0.9 peak") {
    std::vector<float> loud(1000);
    for (size_t i = 0; i < loud.size(); ++i)
      loud[i] = 0.8f * std::sin(2.0 * M_PI * 220.0 * static_cast<double>(i) / 8000.0);
    const AudioSignal s = make_sig(loud);
    const RenderedMixture rm = synthesize_clean({s, s}, {0.0, 0.0});
    CHECK(rm.norm_scale < 1.0);
    float peak = 0.0f;
    for (float v : rm.mixture.samples) peak = std::max(peak, std::abs(v));
    CHECK(peak == doctest::Approx(0.9).epsilon(1e-4));
    const std::vector<float> want = sequential_sum(rm.targets);
    for (size_t i = 0; i < want.size(); ++i) CHECK(rm.mixture.samples[i] == want[i]);
  }
  SUBCASE("mixture is truncated to the shortest source") {
    const AudioSignal a = make_sig(testers::speech_like(3000, 8000, 0, 1));
    const AudioSignal b = make_sig(testers::speech_like(2000, 8000, 1, 2));
    const RenderedMixture rm = synthesize_clean({a, b}, {0.0, 0.0});
    CHECK(rm.mixture.samples.size() == 2000);
    CHECK(rm.targets[0].samples.size() == 2000);
  }
}

TEST_CASE("synthesize_reverberant convolves, aligns targets, and meters noise") {
  RoomSpec room;
  room.room_dims = {5.0, 4.0, 2.5};
  room.t60_s = 0.22;
  room.mic_pos = {2.5, 2.0, 1.5};
  room.source_positions = {{3.9, 2.0, 1.5}, {2.5, 3.4, 1.5}};  // 1.4 m each
  room.source_angles_deg = {0.0, 90.0};
  room.source_distances_m = {1.4, 1.4};
  room.snr_db = 10.0;

  std::vector<AudioSignal> srcs = {
      make_sig(testers::speech_like(8000, 8000, 0, 31)),
      make_sig(testers::speech_like(8000, 8000, 1, 32))};
  const AudioSignal noise = make_sig(testers::random_signal(8000, 33, 0.05f));

  const RenderedMixture rm =
      synthesize_reverberant(srcs, {0.0, 0.0}, room, noise);

  REQUIRE(rm.targets.size() == 2);
  REQUIRE(rm.reverberant_components.size() == 2);
  REQUIRE(rm.mixture.samples.size() == 8000);
  REQUIRE(rm.scaled_noise.samples.size() == 8000);

  SUBCASE("mixture equals components plus noise, in order") {
    const std::vector<float> want =
        sequential_sum(rm.reverberant_components, &rm.scaled_noise);
    for (size_t i = 0; i < want.size(); ++i) CHECK(rm.mixture.samples[i] == want[i]);
  }
  SUBCASE("noise level is metered against the reverberant sum") {
    const std::vector<float> rev = sequential_sum(rm.reverberant_components);
    const double got =
        10.0 * std::log10(energy(rev) / energy(rm.scaled_noise.samples));
    CHECK(got == doctest::Approx(10.0).epsilon(0.001));
  }
  SUBCASE("targets are the dry sources delayed by the direct path") {
    // 1.4 m at 8 kHz: round(8000 * 1.4 / 343) = 33 samples.
    const int d = 33;
    for (int j = 0; j < 2; ++j) {
      const auto& tgt = rm.targets[static_cast<size_t>(j)].samples;
      for (int i = 0; i < d; ++i) CHECK(tgt[static_cast<size_t>(i)] == 0.0f);
      for (int i = d; i < 8000; ++i)
        CHECK(tgt[static_cast<size_t>(i)] ==
              doctest::Approx(srcs[static_cast<size_t>(j)].samples[static_cast<size_t>(i - d)])
                  .epsilon(1e-6));
    }
  }
  SUBCASE("reverberant component keeps most of its energy near the dry signal") {
    // Anechoic gain is 1/(4 pi d) ~ 0.057, so wet energy is way below dry;
    // just check it is nonzero and the tail extends past the direct path.
    CHECK(energy(rm.reverberant_components[0].samples) > 0.0);
  }
  SUBCASE("no noise means no noise channel") {
    const RenderedMixture dryrun =
        synthesize_reverberant(srcs, {0.0, 0.0}, room, std::nullopt);
    CHECK(dryrun.scaled_noise.samples.empty());
    const std::vector<float> want = sequential_sum(dryrun.reverberant_components);
    for (size_t i = 0; i < want.size(); ++i)
      CHECK(dryrun.mixture.samples[i] == want[i]);
  }
  SUBCASE("mismatched room spec throws") {
    CHECK_THROWS_AS(
        synthesize_reverberant({srcs[0]}, {0.0}, room, noise), MixerError);
  }
  SUBCASE("short noise throws") {
    const AudioSignal tiny = make_sig(testers::random_signal(100, 9));
    CHECK_THROWS_AS(synthesize_reverberant(srcs, {0.0, 0.0}, room, tiny),
                    MixerError);
  }
}

TEST_CASE("mixture records survive the json round trip") {
  MixtureRecord rec;
  rec.id = "ex000007";
  rec.split = "val";
  rec.num_speakers = 3;
  rec.source_refs = {{"a/spk0/u1.wav", 123, 32000},
                     {"b/spk4/u2.wav", 0, 32000},
                     {"c/spk9/u0.wav", 4567, 32000}};
  rec.gains_db = {0.25, -1.5, 1.25};
  rec.seed = 0xdeadbeefcafe1234ull;
  RoomSpec room;
  room.room_dims = {5.5, 4.25, 2.5};
  room.t60_s = 0.31;
  room.mic_pos = {2.7, 2.1, 1.5};
  room.source_positions = {{3.0, 2.0, 1.5}, {2.0, 3.0, 1.5}, {1.5, 1.5, 1.5}};
  room.source_angles_deg = {10.0, 95.0, 170.0};
  room.source_distances_m = {1.4, 1.5, 1.6};
  room.snr_db = 7.25;
  room.seed = 42;
  rec.room = room;
  rec.noise_ref = sepkit::NoiseRef{"n/amb0.wav", 999};
  rec.norm_scale = 0.875;
  rec.absorption_clamped = false;

  const std::string line = record_to_json(rec);
  CHECK(line.find('\n') == std::string::npos);  // one record per line
  const MixtureRecord back = record_from_json(line);

  CHECK(back.id == rec.id);
  CHECK(back.split == rec.split);
  CHECK(back.num_speakers == 3);
  REQUIRE(back.source_refs.size() == 3);
  CHECK(back.source_refs[1].file == "b/spk4/u2.wav");
  CHECK(back.source_refs[2].offset == 4567);
  CHECK(back.gains_db == rec.gains_db);
  CHECK(back.seed == rec.seed);
  REQUIRE(back.room.has_value());
  CHECK(back.room->t60_s == rec.room->t60_s);
  CHECK(back.room->source_positions[2].x == 1.5);
  CHECK(back.room->snr_db == 7.25);
  REQUIRE(back.noise_ref.has_value());
  CHECK(back.noise_ref->offset == 999);
  CHECK(back.norm_scale == rec.norm_scale);
  REQUIRE(back.absorption_clamped.has_value());
  CHECK_FALSE(*back.absorption_clamped);

  SUBCASE("inconsistent records are rejected") {
    MixtureRecord bad = rec;
    bad.gains_db.pop_back();
    CHECK_THROWS_AS(record_from_json(record_to_json(bad)), MixerError);
    MixtureRecord orphan = rec;
    orphan.noise_ref.reset();  // room without noise
    CHECK_THROWS_AS(record_from_json(record_to_json(orphan)), MixerError);
  }
}

TEST_CASE("build_dataset plans are reproducible and speaker-disjoint") {
  const fs::path corpus = testers::scratch_dir("mixer_corpus");
  testers::make_speech_corpus(corpus, 10, 3, 2.0);

  DatasetSpec spec;
  spec.train_count = 8;
  spec.val_count = 4;
  spec.test_count = 4;
  spec.duration_s = 1.5;
  spec.speech_root = corpus.string();
  spec.master_seed = 31337;
  spec.max_speakers = 3;

  const fs::path out_a = testers::scratch_dir("mixer_build_a");
  const fs::path out_b = testers::scratch_dir("mixer_build_b");
  const auto ra = build_dataset(spec, false, out_a.string(), false);
  const auto rb = build_dataset(spec, false, out_b.string(), false);

  CHECK(read_bytes(ra.manifest_path) == read_bytes(rb.manifest_path));
  REQUIRE(ra.records.size() == 16);

  std::map<std::string, int> split_counts;
  std::map<std::string, std::set<std::string>> split_speakers;
  for (const auto& rec : ra.records) {
    split_counts[rec.split]++;
    CHECK(rec.num_speakers >= 2);
    CHECK(rec.num_speakers <= 3);
    REQUIRE(rec.source_refs.size() == static_cast<size_t>(rec.num_speakers));
    double mean = 0.0;
    std::set<std::string> in_record;
    for (size_t j = 0; j < rec.source_refs.size(); ++j) {
      mean += rec.gains_db[j];
      const std::string spk =
          fs::path(rec.source_refs[j].file).parent_path().filename().string();
      CHECK(in_record.insert(spk).second);  // no speaker twice in one mixture
      split_speakers[rec.split].insert(spk);
    }
    CHECK(std::abs(mean / rec.num_speakers) < 1e-12);  // gains are centered
    CHECK_FALSE(rec.room.has_value());
    CHECK_FALSE(rec.norm_scale.has_value());  // plan only, not rendered
  }
  CHECK(split_counts["train"] == 8);
  CHECK(split_counts["val"] == 4);
  CHECK(split_counts["test"] == 4);

  for (const std::string& a : {"train", "val"})
    for (const std::string& b : {"val", "test"}) {
      if (a == b) continue;
      for (const auto& spk : split_speakers[a])
        CHECK(split_speakers[b].count(spk) == 0);
    }

  SUBCASE("a different master seed changes the plan") {
    DatasetSpec other = spec;
    other.master_seed = 31338;
    const fs::path out_c = testers::scratch_dir("mixer_build_c");
    const auto rc = build_dataset(other, false, out_c.string(), false);
    CHECK(read_bytes(rc.manifest_path) != read_bytes(ra.manifest_path));
  }
  SUBCASE("too few speakers for disjoint splits is an error") {
    const fs::path small = testers::scratch_dir("mixer_small");
    testers::make_speech_corpus(small, 4, 2, 2.0);
    DatasetSpec bad = spec;
    bad.speech_root = small.string();
    const fs::path out_d = testers::scratch_dir("mixer_build_d");
    CHECK_THROWS_WITH_AS(build_dataset(bad, false, out_d.string(), false),
                         doctest::Contains("insufficient speakers"), MixerError);
  }
  SUBCASE("manifest round-trips through save and load") {
    const auto loaded = load_manifest(ra.manifest_path);
    REQUIRE(loaded.size() == ra.records.size());
    for (size_t i = 0; i < loaded.size(); ++i) {
      CHECK(loaded[i].id == ra.records[i].id);
      CHECK(loaded[i].seed == ra.records[i].seed);
      CHECK(loaded[i].gains_db == ra.records[i].gains_db);
    }
  }
}

TEST_CASE("rendered clean build writes a self-consistent wav tree") {
  const fs::path corpus = testers::scratch_dir("mixer_corpus_r");
  testers::make_speech_corpus(corpus, 10, 2, 1.6);

  DatasetSpec spec;
  spec.train_count = 2;
  spec.val_count = 1;
  spec.test_count = 1;
  spec.duration_s = 1.0;
  spec.speech_root = corpus.string();
  spec.master_seed = 99;
  spec.max_speakers = 2;
  spec.fixed_speakers = 2;

  const fs::path out = testers::scratch_dir("mixer_render");
  const auto res = build_dataset(spec, false, out.string(), true);
  REQUIRE(res.records.size() == 4);

  for (const auto& rec : res.records) {
    const fs::path dir = out / rec.split / rec.id;
    const AudioSignal mix = read_wav((dir / "mix.wav").string(), 8000);
    std::vector<AudioSignal> stems;
    for (int s = 1; s <= rec.num_speakers; ++s)
      stems.push_back(read_wav((dir / ("s" + std::to_string(s) + ".wav")).string(), 8000));
    CHECK_FALSE(fs::exists(dir / "noise.wav"));

    REQUIRE(mix.samples.size() == 8000);
    const std::vector<float> want = sequential_sum(stems);
    for (size_t i = 0; i < want.size(); ++i) CHECK(mix.samples[i] == want[i]);

    // Re-rendering the manifest row reproduces the files bit-for-bit.
    const RenderedMixture rm = render_record(rec, 8000);
    CHECK(rm.mixture.samples == mix.samples);
    for (int s = 0; s < rec.num_speakers; ++s)
      CHECK(rm.targets[static_cast<size_t>(s)].samples ==
            stems[static_cast<size_t>(s)].samples);
    REQUIRE(rec.norm_scale.has_value());
    CHECK(rm.norm_scale == *rec.norm_scale);
  }
}

TEST_CASE("rendered noisy build stores anechoic targets beside the wet mixture") {
  const fs::path corpus = testers::scratch_dir("mixer_corpus_n");
  testers::make_speech_corpus(corpus, 10, 2, 1.6);
  const fs::path namb = testers::scratch_dir("mixer_noise_n");
  testers::make_noise_corpus(namb, 2, 3.0);

  DatasetSpec spec;
  spec.train_count = 1;
  spec.val_count = 1;
  spec.test_count = 1;
  spec.duration_s = 1.0;
  spec.speech_root = corpus.string();
  spec.noise_root = namb.string();
  spec.master_seed = 7;
  spec.max_speakers = 2;
  spec.fixed_speakers = 2;

  const fs::path out = testers::scratch_dir("mixer_render_n");
  const auto res = build_dataset(spec, true, out.string(), true);
  REQUIRE(res.records.size() == 3);

  for (const auto& rec : res.records) {
    REQUIRE(rec.room.has_value());
    REQUIRE(rec.noise_ref.has_value());
    REQUIRE(rec.absorption_clamped.has_value());

    const fs::path dir = out / rec.split / rec.id;
    const AudioSignal mix = read_wav((dir / "mix.wav").string(), 8000);
    const AudioSignal noise = read_wav((dir / "noise.wav").string(), 8000);
    const RenderedMixture rm = render_record(rec, 8000);

    CHECK(rm.mixture.samples == mix.samples);
    CHECK(rm.scaled_noise.samples == noise.samples);
    for (int s = 0; s < rec.num_speakers; ++s) {
      const AudioSignal tgt =
          read_wav((dir / ("s" + std::to_string(s + 1) + ".wav")).string(), 8000);
      CHECK(rm.targets[static_cast<size_t>(s)].samples == tgt.samples);
    }

    // The wet mixture is the component sum plus noise; the dry stems are not.
    const std::vector<float> want =
        sequential_sum(rm.reverberant_components, &rm.scaled_noise);
    for (size_t i = 0; i < want.size(); ++i) CHECK(mix.samples[i] == want[i]);

    const std::vector<float> rev = sequential_sum(rm.reverberant_components);
    const double got = 10.0 * std::log10(energy(rev) / energy(noise.samples));
    CHECK(got == doctest::Approx(rec.room->snr_db).epsilon(0.001));
  }
}
