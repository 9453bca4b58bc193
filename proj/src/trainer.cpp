// SPDX-License-Identifier: Apache-2.0
#include "sepkit/trainer.hpp"

#include <algorithm>
#include <filesystem>

#include "sepkit/mixer.hpp"

namespace fs = std::filesystem;

namespace sepkit {

int sample_batch_count(Rng& rng, const std::vector<int>& count_set) {
  if (count_set.empty())
    throw std::invalid_argument("sample_batch_count: empty count set");
  return count_set[static_cast<size_t>(
      rng.uniform_int(static_cast<int64_t>(count_set.size())))];
}

TrainData TrainData::load(const std::string& manifest_path, const std::string& root,
                          const std::string& split, const std::vector<int>& counts,
                          int expected_rate_hz) {
  TrainData data;
  const std::vector<MixtureRecord> records = load_manifest(manifest_path);
  for (const MixtureRecord& rec : records) {
    if (rec.split != split) continue;
    if (std::find(counts.begin(), counts.end(), rec.num_speakers) == counts.end())
      continue;
    const fs::path dir = fs::path(root) / rec.split / rec.id;
    TrainItem item;
    item.id = rec.id;
    item.count = rec.num_speakers;
    AudioSignal mix = read_wav((dir / "mix.wav").string(), expected_rate_hz);
    item.mixture = std::move(mix.samples);
    for (int s = 1; s <= rec.num_speakers; ++s) {
      AudioSignal tgt = read_wav((dir / ("s" + std::to_string(s) + ".wav")).string(),
                                 expected_rate_hz);
      if (tgt.samples.size() != item.mixture.size())
        throw std::runtime_error("target/mixture length mismatch in " +
                                 dir.string());
      item.targets.push_back(std::move(tgt.samples));
    }
    data.add(std::move(item));
  }
  return data;
}

}  // namespace sepkit
