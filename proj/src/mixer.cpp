// SPDX-License-Identifier: Apache-2.0
#include "sepkit/mixer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace sepkit {

namespace {

constexpr const char* kRecordSchema = "mixture-record-v1";
constexpr double kSilenceGateDbfs = -60.0;
constexpr int kMaxOffsetRetries = 8;

json vec3_to_json(const Vec3& v) { return json::array({v.x, v.y, v.z}); }

Vec3 vec3_from_json(const json& j) {
  if (!j.is_array() || j.size() != 3)
    throw MixerError("manifest: expected 3-element position array");
  return Vec3{j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

std::vector<float> slice_or_throw(const AudioSignal& sig, int64_t offset,
                                  int64_t duration, const std::string& file) {
  if (offset < 0 || duration <= 0 ||
      offset + duration > static_cast<int64_t>(sig.samples.size()))
    throw MixerError("source segment out of range in " + file);
  return {sig.samples.begin() + offset, sig.samples.begin() + offset + duration};
}

std::vector<float> looped_slice(const AudioSignal& sig, int64_t offset,
                                int64_t duration) {
  const int64_t n = static_cast<int64_t>(sig.samples.size());
  if (n == 0) throw MixerError("noise file is empty");
  std::vector<float> out(static_cast<size_t>(duration));
  for (int64_t i = 0; i < duration; ++i)
    out[static_cast<size_t>(i)] = sig.samples[static_cast<size_t>((offset + i) % n)];
  return out;
}

void check_counts(size_t num_sources, size_t num_gains) {
  if (num_sources != num_gains)
    throw MixerError("source/gain count mismatch");
  if (num_sources < 2 || num_sources > 5)
    throw MixerError("speaker count must be in {2..5}");
}

size_t min_length(const std::vector<AudioSignal>& sources) {
  size_t t = sources.front().samples.size();
  for (const auto& s : sources) t = std::min(t, s.samples.size());
  if (t == 0) throw MixerError("empty source signal");
  return t;
}

// Summation order is fixed (components in index order, noise last) so that
// the stored mixture is bit-identical to the re-summed stems.
std::vector<float> sum_stems(const std::vector<std::vector<float>>& stems,
                             const std::vector<float>* extra, size_t t) {
  std::vector<float> mix(t, 0.0f);
  for (const auto& s : stems)
    for (size_t i = 0; i < t; ++i) mix[i] += s[i];
  if (extra)
    for (size_t i = 0; i < t; ++i) mix[i] += (*extra)[i];
  return mix;
}

float peak_abs(std::span<const float> x) {
  float p = 0.0f;
  for (float v : x) p = std::max(p, std::abs(v));
  return p;
}

void scale_in_place(std::vector<float>& x, double s) {
  for (auto& v : x) v = static_cast<float>(v * s);
}

struct CorpusFile {
  std::string path;
  std::string speaker;
  int64_t num_samples = 0;
};

std::vector<CorpusFile> index_corpus(const std::string& root, int fs,
                                     int64_t min_samples) {
  if (!fs::exists(root))
    throw MixerError("corpus root does not exist: " + root);
  std::vector<CorpusFile> files;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (!entry.is_regular_file()) continue;
    const fs::path p = entry.path();
    if (p.extension() != ".wav") continue;
    WavInfo info = read_wav_info(p.string());
    if (info.sample_rate_hz != fs)
      throw MixerError("corpus file has wrong sample rate: " + p.string());
    if (info.num_samples < min_samples) continue;
    // Speaker label = parent directory, or the file stem when files sit
    // directly under the root.
    std::string speaker = fs::equivalent(p.parent_path(), fs::path(root))
                              ? p.stem().string()
                              : p.parent_path().filename().string();
    files.push_back({p.string(), speaker, info.num_samples});
  }
  std::sort(files.begin(), files.end(),
            [](const CorpusFile& a, const CorpusFile& b) { return a.path < b.path; });
  return files;
}

struct SplitPlan {
  std::string name;
  int count = 0;
  std::vector<std::string> speakers;  // disjoint across splits
};

std::vector<SplitPlan> partition_speakers(const std::vector<CorpusFile>& files,
                                          const DatasetSpec& spec, int c_max) {
  std::vector<std::string> roster;
  for (const auto& f : files)
    if (roster.empty() || roster.back() != f.speaker) {
      if (std::find(roster.begin(), roster.end(), f.speaker) == roster.end())
        roster.push_back(f.speaker);
    }
  std::sort(roster.begin(), roster.end());
  Rng rng(derive_seed(spec.master_seed, 0, 0));
  rng.shuffle(roster);

  std::vector<SplitPlan> plans = {{"train", spec.train_count, {}},
                                  {"val", spec.val_count, {}},
                                  {"test", spec.test_count, {}}};
  int active = 0;
  long total_records = 0;
  for (const auto& p : plans)
    if (p.count > 0) {
      ++active;
      total_records += p.count;
    }
  if (active == 0) throw MixerError("dataset spec requests zero records");
  const long need = static_cast<long>(active) * c_max;
  if (static_cast<long>(roster.size()) < need) {
    std::ostringstream msg;
    msg << "insufficient speakers: have " << roster.size() << ", need at least "
        << need << " (" << c_max << " per active split)";
    throw MixerError(msg.str());
  }
  // Proportional allocation with a floor of c_max per active split; the
  // remainder goes to the first active split.
  std::vector<long> alloc(plans.size(), 0);
  long assigned = 0;
  for (size_t i = 0; i < plans.size(); ++i) {
    if (plans[i].count <= 0) continue;
    long share = static_cast<long>(roster.size()) * plans[i].count / total_records;
    alloc[i] = std::max(share, static_cast<long>(c_max));
    assigned += alloc[i];
  }
  while (assigned > static_cast<long>(roster.size())) {
    // Trim the largest allocation above the floor.
    size_t k = plans.size();
    for (size_t i = 0; i < plans.size(); ++i)
      if (alloc[i] > c_max && (k == plans.size() || alloc[i] > alloc[k])) k = i;
    if (k == plans.size()) throw MixerError("insufficient speakers for splits");
    --alloc[k];
    --assigned;
  }
  for (size_t i = 0; i < plans.size(); ++i)
    if (plans[i].count > 0 && alloc[i] == 0) alloc[i] = 0;
  long spare = static_cast<long>(roster.size()) - assigned;
  for (size_t i = 0; i < plans.size() && spare > 0; ++i)
    if (plans[i].count > 0) {
      alloc[i] += spare;
      spare = 0;
    }
  size_t cursor = 0;
  for (size_t i = 0; i < plans.size(); ++i) {
    for (long k = 0; k < alloc[i]; ++k) plans[i].speakers.push_back(roster[cursor++]);
    std::sort(plans[i].speakers.begin(), plans[i].speakers.end());
  }
  return plans;
}

}  // namespace

double energy(std::span<const float> samples) {
  double e = 0.0;
  for (float v : samples) e += static_cast<double>(v) * v;
  return e;
}

double rms_dbfs(std::span<const float> samples) {
  if (samples.empty()) return -300.0;
  const double rms = std::sqrt(energy(samples) / static_cast<double>(samples.size()));
  return 20.0 * std::log10(std::max(rms, 1e-15));
}

AudioSignal scale_noise_to_snr(const AudioSignal& signal_ref,
                               const AudioSignal& noise, double snr_db) {
  if (signal_ref.samples.size() != noise.samples.size())
    throw MixerError("scale_noise_to_snr: length mismatch");
  const double e_sig = energy(signal_ref.samples);
  const double e_noise = energy(noise.samples);
  if (e_sig <= 0.0) throw MixerError("scale_noise_to_snr: zero-energy signal");
  if (e_noise <= 0.0) throw MixerError("scale_noise_to_snr: zero-energy noise");
  const double scale = std::sqrt(e_sig / (e_noise * std::pow(10.0, snr_db / 10.0)));
  AudioSignal out;
  out.sample_rate_hz = noise.sample_rate_hz;
  out.samples.resize(noise.samples.size());
  for (size_t i = 0; i < noise.samples.size(); ++i)
    out.samples[i] = static_cast<float>(noise.samples[i] * scale);
  return out;
}

RenderedMixture synthesize_clean(const std::vector<AudioSignal>& sources,
                                 const std::vector<double>& gains_db) {
  check_counts(sources.size(), gains_db.size());
  const size_t t = min_length(sources);
  const int rate = sources.front().sample_rate_hz;

  std::vector<std::vector<float>> targets(sources.size());
  for (size_t j = 0; j < sources.size(); ++j) {
    const double a = std::pow(10.0, gains_db[j] / 20.0);
    targets[j].resize(t);
    for (size_t i = 0; i < t; ++i)
      targets[j][i] = static_cast<float>(sources[j].samples[i] * a);
  }
  std::vector<float> mix = sum_stems(targets, nullptr, t);

  double norm = 1.0;
  const float peak = peak_abs(mix);
  if (peak > 1.0f) {
    norm = 0.9 / peak;
    for (auto& tg : targets) scale_in_place(tg, norm);
    mix = sum_stems(targets, nullptr, t);
  }

  RenderedMixture out;
  out.norm_scale = norm;
  out.mixture = AudioSignal{std::move(mix), rate};
  for (auto& tg : targets) out.targets.push_back(AudioSignal{std::move(tg), rate});
  return out;
}

RenderedMixture synthesize_reverberant(const std::vector<AudioSignal>& sources,
                                       const std::vector<double>& gains_db,
                                       const RoomSpec& room,
                                       const std::optional<AudioSignal>& noise) {
  check_counts(sources.size(), gains_db.size());
  if (room.num_speakers() != static_cast<int>(sources.size()))
    throw MixerError("room spec speaker count mismatch");
  const size_t t = min_length(sources);
  const int rate = sources.front().sample_rate_hz;

  const Absorption ab = t60_to_absorption(room.t60_s, room.room_dims);
  const int max_order = default_max_order(room.t60_s, room.room_dims);
  const int rir_len = default_rir_len(room.t60_s, rate);

  std::vector<std::vector<float>> components(sources.size());
  std::vector<std::vector<float>> targets(sources.size());
  for (size_t j = 0; j < sources.size(); ++j) {
    const double a = std::pow(10.0, gains_db[j] / 20.0);
    std::vector<float> dry(t);
    for (size_t i = 0; i < t; ++i)
      dry[i] = static_cast<float>(sources[j].samples[i] * a);

    Rir rir = simulate_rir(room.room_dims, ab.alpha, room.source_positions[j],
                           room.mic_pos, rate, max_order, rir_len);
    std::vector<float> wet = convolve(dry, rir.taps);
    wet.resize(t);
    components[j] = std::move(wet);

    // Target: same dry, gain-scaled source shifted by the direct-path delay.
    targets[j].assign(t, 0.0f);
    const size_t d = static_cast<size_t>(rir.direct_delay_samples);
    for (size_t i = d; i < t; ++i) targets[j][i] = dry[i - d];
  }

  std::vector<float> rev_sum = sum_stems(components, nullptr, t);
  std::vector<float> scaled_noise;
  if (noise.has_value()) {
    if (noise->samples.size() < t)
      throw MixerError("noise shorter than mixture; loop it to length first");
    AudioSignal noise_fit{{noise->samples.begin(), noise->samples.begin() + t}, rate};
    AudioSignal ref{rev_sum, rate};
    scaled_noise = scale_noise_to_snr(ref, noise_fit, room.snr_db).samples;
  }

  std::vector<float> mix =
      sum_stems(components, scaled_noise.empty() ? nullptr : &scaled_noise, t);

  double norm = 1.0;
  const float peak = peak_abs(mix);
  if (peak > 1.0f) {
    norm = 0.9 / peak;
    for (auto& c : components) scale_in_place(c, norm);
    for (auto& tg : targets) scale_in_place(tg, norm);
    if (!scaled_noise.empty()) scale_in_place(scaled_noise, norm);
    mix = sum_stems(components, scaled_noise.empty() ? nullptr : &scaled_noise, t);
  }

  RenderedMixture out;
  out.norm_scale = norm;
  out.absorption_clamped = ab.clamped;
  out.mixture = AudioSignal{std::move(mix), rate};
  for (auto& tg : targets) out.targets.push_back(AudioSignal{std::move(tg), rate});
  for (auto& c : components)
    out.reverberant_components.push_back(AudioSignal{std::move(c), rate});
  if (!scaled_noise.empty()) out.scaled_noise = AudioSignal{std::move(scaled_noise), rate};
  return out;
}

std::string record_to_json(const MixtureRecord& rec) {
  json j;
  j["schema"] = kRecordSchema;
  j["id"] = rec.id;
  j["split"] = rec.split;
  j["num_speakers"] = rec.num_speakers;
  json srcs = json::array();
  for (const auto& s : rec.source_refs)
    srcs.push_back({{"file", s.file}, {"offset", s.offset}, {"duration", s.duration}});
  j["sources"] = std::move(srcs);
  j["gains_db"] = rec.gains_db;
  if (rec.room.has_value()) {
    const RoomSpec& r = *rec.room;
    json room;
    room["dims"] = vec3_to_json(r.room_dims);
    room["t60_s"] = r.t60_s;
    room["mic"] = vec3_to_json(r.mic_pos);
    room["angles_deg"] = r.source_angles_deg;
    room["distances_m"] = r.source_distances_m;
    json pos = json::array();
    for (const auto& p : r.source_positions) pos.push_back(vec3_to_json(p));
    room["positions"] = std::move(pos);
    room["snr_db"] = r.snr_db;
    room["seed"] = r.seed;
    j["room"] = std::move(room);
  }
  if (rec.noise_ref.has_value())
    j["noise"] = {{"file", rec.noise_ref->file}, {"offset", rec.noise_ref->offset}};
  j["seed"] = rec.seed;
  if (rec.norm_scale.has_value()) j["norm_scale"] = *rec.norm_scale;
  if (rec.absorption_clamped.has_value())
    j["absorption_clamped"] = *rec.absorption_clamped;
  return j.dump();
}

MixtureRecord record_from_json(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw MixerError(std::string("manifest: bad JSON line: ") + e.what());
  }
  if (!j.contains("schema") || j["schema"].get<std::string>() != kRecordSchema)
    throw MixerError("manifest: unknown record schema");
  MixtureRecord rec;
  rec.id = j.at("id").get<std::string>();
  rec.split = j.at("split").get<std::string>();
  rec.num_speakers = j.at("num_speakers").get<int>();
  for (const auto& s : j.at("sources")) {
    SourceRef ref;
    ref.file = s.at("file").get<std::string>();
    ref.offset = s.at("offset").get<int64_t>();
    ref.duration = s.at("duration").get<int64_t>();
    rec.source_refs.push_back(std::move(ref));
  }
  rec.gains_db = j.at("gains_db").get<std::vector<double>>();
  if (j.contains("room")) {
    const json& r = j["room"];
    RoomSpec room;
    room.room_dims = vec3_from_json(r.at("dims"));
    room.t60_s = r.at("t60_s").get<double>();
    room.mic_pos = vec3_from_json(r.at("mic"));
    room.source_angles_deg = r.at("angles_deg").get<std::vector<double>>();
    room.source_distances_m = r.at("distances_m").get<std::vector<double>>();
    for (const auto& p : r.at("positions"))
      room.source_positions.push_back(vec3_from_json(p));
    room.snr_db = r.at("snr_db").get<double>();
    room.seed = r.at("seed").get<uint64_t>();
    rec.room = std::move(room);
  }
  if (j.contains("noise")) {
    NoiseRef n;
    n.file = j["noise"].at("file").get<std::string>();
    n.offset = j["noise"].at("offset").get<int64_t>();
    rec.noise_ref = std::move(n);
  }
  rec.seed = j.at("seed").get<uint64_t>();
  if (j.contains("norm_scale")) rec.norm_scale = j["norm_scale"].get<double>();
  if (j.contains("absorption_clamped"))
    rec.absorption_clamped = j["absorption_clamped"].get<bool>();

  if (rec.source_refs.size() != rec.gains_db.size() ||
      static_cast<int>(rec.source_refs.size()) != rec.num_speakers)
    throw MixerError("manifest: source/gain/count mismatch in record " + rec.id);
  if (rec.num_speakers < 2 || rec.num_speakers > 5)
    throw MixerError("manifest: speaker count out of range in record " + rec.id);
  if (rec.room.has_value() != rec.noise_ref.has_value())
    throw MixerError("manifest: room and noise must be present together in record " +
                     rec.id);
  return rec;
}

std::vector<MixtureRecord> load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MixerError("cannot open manifest: " + path);
  std::vector<MixtureRecord> recs;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    recs.push_back(record_from_json(line));
  }
  return recs;
}

void save_manifest(const std::string& path, const std::vector<MixtureRecord>& recs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MixerError("cannot write manifest: " + path);
  for (const auto& r : recs) out << record_to_json(r) << "\n";
}

RenderedMixture render_record(const MixtureRecord& rec, int sample_rate_hz) {
  std::vector<AudioSignal> sources;
  for (const auto& ref : rec.source_refs) {
    AudioSignal full = read_wav(ref.file, sample_rate_hz);
    AudioSignal seg;
    seg.sample_rate_hz = sample_rate_hz;
    seg.samples = slice_or_throw(full, ref.offset, ref.duration, ref.file);
    sources.push_back(std::move(seg));
  }
  if (!rec.room.has_value()) return synthesize_clean(sources, rec.gains_db);

  AudioSignal noise_full = read_wav(rec.noise_ref->file, sample_rate_hz);
  AudioSignal noise;
  noise.sample_rate_hz = sample_rate_hz;
  noise.samples = looped_slice(noise_full, rec.noise_ref->offset,
                               static_cast<int64_t>(rec.source_refs.front().duration));
  return synthesize_reverberant(sources, rec.gains_db, *rec.room, noise);
}

BuildResult build_dataset(const DatasetSpec& spec, bool noisy,
                          const std::string& out_dir, bool render) {
  const int c_max = spec.fixed_speakers > 0 ? spec.fixed_speakers : spec.max_speakers;
  if (c_max < 2 || c_max > 5) throw MixerError("speaker count must be in {2..5}");
  const int64_t duration =
      static_cast<int64_t>(std::llround(spec.duration_s * spec.sample_rate_hz));
  if (duration <= 0) throw MixerError("utterance duration must be positive");

  std::vector<CorpusFile> speech =
      index_corpus(spec.speech_root, spec.sample_rate_hz, duration);
  if (speech.empty()) throw MixerError("no usable speech files under " + spec.speech_root);
  std::vector<CorpusFile> noise_files;
  if (noisy) {
    if (spec.noise_root.empty())
      throw MixerError("noisy build requires a noise corpus root");
    noise_files = index_corpus(spec.noise_root, spec.sample_rate_hz, 1);
    if (noise_files.empty())
      throw MixerError("no usable noise files under " + spec.noise_root);
  }

  std::map<std::string, std::vector<size_t>> by_speaker;
  for (size_t i = 0; i < speech.size(); ++i)
    by_speaker[speech[i].speaker].push_back(i);

  std::vector<SplitPlan> plans = partition_speakers(speech, spec, c_max);
  for (const auto& plan : plans)
    if (plan.count > 0 && static_cast<int>(plan.speakers.size()) < c_max)
      throw MixerError("insufficient speakers for split " + plan.name);

  fs::create_directories(out_dir);
  BuildResult result;
  result.manifest_path = (fs::path(out_dir) / "manifest.jsonl").string();

  // Cache: silent-gate probing and rendering reread files; tiny LRU-free map
  // is fine at desk scale.
  std::map<std::string, AudioSignal> wav_cache;
  auto load = [&](const std::string& path) -> const AudioSignal& {
    auto it = wav_cache.find(path);
    if (it == wav_cache.end())
      it = wav_cache.emplace(path, read_wav(path, spec.sample_rate_hz)).first;
    return it->second;
  };

  long global_index = 0;
  for (const auto& plan : plans) {
    for (int i = 0; i < plan.count; ++i, ++global_index) {
      const uint64_t child = derive_seed(spec.master_seed, 1, global_index);
      Rng rng(child);

      // Frozen draw order: count, speakers, per-source (file, offset with
      // silence retry), gains, then room + noise when noisy.
      const int c = spec.fixed_speakers > 0
                        ? spec.fixed_speakers
                        : 2 + static_cast<int>(rng.uniform_int(spec.max_speakers - 1));
      std::vector<std::string> pool = plan.speakers;
      rng.shuffle(pool);
      pool.resize(static_cast<size_t>(c));

      MixtureRecord rec;
      rec.split = plan.name;
      rec.num_speakers = c;
      rec.seed = child;
      {
        std::ostringstream id;
        id << "ex" << std::setw(6) << std::setfill('0') << i;
        rec.id = id.str();
      }

      for (int s = 0; s < c; ++s) {
        const auto& file_ids = by_speaker.at(pool[static_cast<size_t>(s)]);
        const CorpusFile& f = speech[file_ids[static_cast<size_t>(
            rng.uniform_int(static_cast<int64_t>(file_ids.size())))]];
        const int64_t span = f.num_samples - duration + 1;
        int64_t offset = rng.uniform_int(span);
        const AudioSignal& sig = load(f.path);
        double best_rms = rms_dbfs(
            std::span<const float>(sig.samples.data() + offset,
                                   static_cast<size_t>(duration)));
        int64_t best_offset = offset;
        for (int attempt = 1; attempt < kMaxOffsetRetries && best_rms < kSilenceGateDbfs;
             ++attempt) {
          offset = rng.uniform_int(span);
          const double r = rms_dbfs(
              std::span<const float>(sig.samples.data() + offset,
                                     static_cast<size_t>(duration)));
          if (r > best_rms) {
            best_rms = r;
            best_offset = offset;
          }
        }
        rec.source_refs.push_back({f.path, best_offset, duration});
      }

      rec.gains_db.resize(static_cast<size_t>(c));
      double mean = 0.0;
      for (auto& g : rec.gains_db) {
        g = rng.uniform(-2.5, 2.5);
        mean += g;
      }
      mean /= static_cast<double>(c);
      for (auto& g : rec.gains_db) g -= mean;

      if (noisy) {
        rec.room = sample_room_spec(rng, c, child);
        const CorpusFile& nf = noise_files[static_cast<size_t>(
            rng.uniform_int(static_cast<int64_t>(noise_files.size())))];
        rec.noise_ref = NoiseRef{nf.path, rng.uniform_int(nf.num_samples)};
      }

      if (render) {
        RenderedMixture rm = render_record(rec, spec.sample_rate_hz);
        rec.norm_scale = rm.norm_scale;
        if (noisy) rec.absorption_clamped = rm.absorption_clamped;
        const fs::path dir = fs::path(out_dir) / plan.name / rec.id;
        fs::create_directories(dir);
        write_wav((dir / "mix.wav").string(), rm.mixture);
        for (size_t j = 0; j < rm.targets.size(); ++j) {
          std::ostringstream name;
          name << "s" << (j + 1) << ".wav";
          write_wav((dir / name.str()).string(), rm.targets[j]);
        }
        if (noisy) write_wav((dir / "noise.wav").string(), rm.scaled_noise);
      }
      result.records.push_back(std::move(rec));
    }
  }

  save_manifest(result.manifest_path, result.records);
  return result;
}

}  // namespace sepkit
