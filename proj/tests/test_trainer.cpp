// SPDX-License-Identifier: Apache-2.0
#include "sepkit/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "sepkit/audio.hpp"
#include "sepkit/mixer.hpp"
#include "testers.hpp"

using sepkit::Adam;
using sepkit::Rng;
using sepkit::sample_batch_count;
using sepkit::Separator;
using sepkit::SeparatorConfig;
using sepkit::StepMetrics;
using sepkit::TrainConfig;
using sepkit::TrainData;
using sepkit::TrainItem;
using sepkit::train_step;

namespace fs = std::filesystem;

namespace {

SeparatorConfig tiny_config() {
  SeparatorConfig cfg;
  cfg.num_features = 12;
  cfg.kernel_size = 8;
  cfg.chunk_size = 10;
  cfg.chunk_step = 5;
  cfg.num_blocks = 2;
  cfg.hidden_size = 12;
  cfg.max_input_samples = 4000;
  return cfg;
}

TrainItem make_item(const std::string& id, int count, int t_len, int seed) {
  TrainItem item;
  item.id = id;
  item.count = count;
  for (int j = 0; j < count; ++j)
    item.targets.push_back(testers::speech_like(t_len, 8000, j, seed + j));
  item.mixture.assign(static_cast<size_t>(t_len), 0.0f);
  for (const auto& tgt : item.targets)
    for (size_t i = 0; i < item.mixture.size(); ++i) item.mixture[i] += tgt[i];
  return item;
}

template <class S>
sepkit::nn::Param<S>* find_param(Separator<S>& model, const std::string& name) {
  for (auto* p : model.params())
    if (p->name == name) return p;
  return nullptr;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

}  // namespace

TEST_CASE("sample_batch_count draws uniformly from the configured set") {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) CHECK(sample_batch_count(rng, {2}) == 2);

  const std::vector<int> all = {2, 3, 4, 5};
  std::map<int, int> freq;
  const int draws = 20000;
  for (int i = 0; i < draws; ++i) freq[sample_batch_count(rng, all)]++;
  for (int c : all)
    CHECK(static_cast<double>(freq[c]) / draws == doctest::Approx(0.25).epsilon(0.08));

  Rng a(9), b(9);
  for (int i = 0; i < 50; ++i)
    CHECK(sample_batch_count(a, all) == sample_batch_count(b, all));

  CHECK_THROWS(sample_batch_count(rng, {}));
}

TEST_CASE("adam applies the textbook update to touched parameters only") {
  sepkit::nn::Param<float> p, q;
  p.configure("p", sepkit::nn::ParamKind::Weight, 1, 1);
  q.configure("q", sepkit::nn::ParamKind::Weight, 1, 1);
  p.value(0, 0) = 1.0f;
  q.value(0, 0) = 2.0f;

  Adam<float> opt({&p, &q}, 0.1);

  p.grad(0, 0) = 0.5f;
  p.touched = true;
  q.grad(0, 0) = 0.5f;
  q.touched = false;  // stale gradient, module outside this step's graph
  opt.step();

  // First step: mhat = g, vhat = g^2, so the update is lr * g / (|g| + eps).
  const double want = 1.0 - 0.1 * (0.5 / (std::sqrt(0.25) + 1e-8));
  CHECK(p.value(0, 0) == doctest::Approx(want).epsilon(1e-7));
  CHECK(q.value(0, 0) == 2.0f);

  // A later first touch of q gets the t=1 bias correction, not t=2.
  p.touched = false;
  q.touched = true;
  opt.step();
  const double want_q = 2.0 - 0.1 * (0.5 / (std::sqrt(0.25) + 1e-8));
  CHECK(q.value(0, 0) == doctest::Approx(want_q).epsilon(1e-7));
  CHECK(p.value(0, 0) == doctest::Approx(want).epsilon(1e-7));
}

TEST_CASE("train_step composes the objective and updates only the active head") {
  Separator<float> model(tiny_config());
  model.init_params(3);
  Adam<float> opt(model.params(), 1e-3);
  TrainConfig cfg;

  const TrainItem a = make_item("a", 2, 1600, 10);
  const TrainItem b = make_item("b", 2, 1600, 20);
  const std::vector<const TrainItem*> batch = {&a, &b};

  // Inactive heads must come through the step bit-identical.
  const auto snap = [&](const std::string& name) {
    return find_param(model, name)->value.eval();
  };
  const auto frozen_names = std::vector<std::string>{
      "expert3.expand", "expert4.expand", "expert5.expand",
      "expert3.prelu.slope", "expert4.prelu.slope", "expert5.prelu.slope"};
  const auto live_names = std::vector<std::string>{
      "encoder.w", "expert2.expand", "expert2.prelu.slope",
      "decoder.frame_proj.w", "gate.fc2.w", "block0.intra.proj.w"};
  std::map<std::string, sepkit::nn::Mat<float>> before;
  for (const auto& n : frozen_names) before[n] = snap(n);
  for (const auto& n : live_names) before[n] = snap(n);

  const StepMetrics m =
      train_step(model, opt, std::span<const TrainItem* const>(batch), 2, cfg);

  CHECK_FALSE(m.aborted);
  CHECK(std::isfinite(m.total));
  CHECK(m.grad_norm > 0.0);
  CHECK(m.gate_hits >= 0);
  CHECK(m.gate_hits <= 2);
  // total = upit + 0.5 stft + rec + gate under the default weights.
  CHECK(m.total ==
        doctest::Approx(m.upit + 0.5 * m.stft + m.rec + m.gate).epsilon(1e-9));

  for (const auto& n : frozen_names) {
    INFO(n);
    CHECK((snap(n).array() == before[n].array()).all());
  }
  for (const auto& n : live_names) {
    INFO(n);
    CHECK((snap(n).array() != before[n].array()).any());
  }

  SUBCASE("count mismatch in the batch throws") {
    const TrainItem three = make_item("c", 3, 1600, 30);
    const std::vector<const TrainItem*> bad = {&three};
    CHECK_THROWS(train_step(model, opt, std::span<const TrainItem* const>(bad), 2, cfg));
    CHECK_THROWS(train_step(model, opt, std::span<const TrainItem* const>(), 2, cfg));
  }
}

TEST_CASE("repeated steps on one batch drive the loss down") {
  Separator<float> model(tiny_config());
  model.init_params(5);
  Adam<float> opt(model.params(), 2e-3);
  TrainConfig cfg;

  const TrainItem a = make_item("a", 3, 1600, 40);
  const std::vector<const TrainItem*> batch = {&a};

  std::vector<double> losses;
  for (int s = 0; s < 30; ++s) {
    const StepMetrics m =
        train_step(model, opt, std::span<const TrainItem* const>(batch), 3, cfg);
    REQUIRE_FALSE(m.aborted);
    losses.push_back(m.total);
  }
  const double first = (losses[0] + losses[1] + losses[2]) / 3.0;
  const double last = (losses[27] + losses[28] + losses[29]) / 3.0;
  CHECK(last < first);
}

TEST_CASE("a non-finite loss aborts the step without touching the weights") {
  Separator<float> model(tiny_config());
  model.init_params(7);
  Adam<float> opt(model.params(), 1e-3);
  TrainConfig cfg;

  // Blow up one head so its waveforms overflow to inf.
  find_param(model, "expert2.expand")->value.setConstant(1e30f);
  const auto witness = find_param(model, "gate.fc2.w")->value.eval();

  const TrainItem a = make_item("a", 2, 1600, 50);
  const std::vector<const TrainItem*> batch = {&a};
  const StepMetrics m =
      train_step(model, opt, std::span<const TrainItem* const>(batch), 2, cfg);

  CHECK(m.aborted);
  CHECK((find_param(model, "gate.fc2.w")->value.array() == witness.array()).all());
  // Gradients are dropped, not carried into the next step.
  for (auto* p : model.params()) CHECK_FALSE(p->touched);
}

TEST_CASE("TrainData::load reads rendered splits grouped by count") {
  const fs::path corpus = testers::scratch_dir("trainer_corpus");
  testers::make_speech_corpus(corpus, 10, 2, 1.2);

  sepkit::DatasetSpec spec;
  spec.train_count = 6;
  spec.val_count = 3;
  spec.test_count = 3;
  spec.duration_s = 0.6;
  spec.speech_root = corpus.string();
  spec.master_seed = 404;
  spec.max_speakers = 3;

  const fs::path out = testers::scratch_dir("trainer_data");
  const auto built = sepkit::build_dataset(spec, false, out.string(), true);

  const TrainData train =
      TrainData::load(built.manifest_path, out.string(), "train", {2, 3}, 8000);
  int manifest_train = 0;
  for (const auto& rec : built.records)
    if (rec.split == "train") ++manifest_train;
  CHECK(static_cast<int>(train.total()) == manifest_train);

  for (int c : train.counts()) {
    for (const TrainItem& item : train.items(c)) {
      CHECK(item.count == c);
      REQUIRE(item.targets.size() == static_cast<size_t>(c));
      CHECK(item.mixture.size() == 4800);
      for (const auto& t : item.targets) CHECK(t.size() == item.mixture.size());
      // Clean profile: the mixture is exactly the stem sum.
      std::vector<float> sum(item.mixture.size(), 0.0f);
      for (const auto& t : item.targets)
        for (size_t i = 0; i < sum.size(); ++i) sum[i] += t[i];
      CHECK(sum == item.mixture);
    }
  }

  SUBCASE("count filter drops other mixtures") {
    const TrainData only2 =
        TrainData::load(built.manifest_path, out.string(), "train", {2}, 8000);
    CHECK(only2.counts() == std::vector<int>{2});
    CHECK_FALSE(only2.has_count(3));
    CHECK_THROWS(only2.items(3));
  }
  SUBCASE("split filter is exact") {
    const TrainData val =
        TrainData::load(built.manifest_path, out.string(), "val", {2, 3}, 8000);
    CHECK(val.total() == 3);
  }
  SUBCASE("a configured rate rejects mismatched audio") {
    CHECK_THROWS(
        TrainData::load(built.manifest_path, out.string(), "train", {2, 3}, 16000));
  }
  SUBCASE("missing manifest throws") {
    CHECK_THROWS(TrainData::load((out / "nope.jsonl").string(), out.string(),
                                 "train", {2, 3}, 8000));
  }
  SUBCASE("a stem that disagrees with its mixture length throws") {
    std::string victim;
    for (const auto& rec : built.records)
      if (rec.split == "val") {
        victim = (out / "val" / rec.id / "s1.wav").string();
        break;
      }
    REQUIRE_FALSE(victim.empty());
    sepkit::AudioSignal stub;
    stub.sample_rate_hz = 8000;
    stub.samples.assign(100, 0.01f);
    sepkit::write_wav(victim, stub, sepkit::WavEncoding::Float32);
    CHECK_THROWS(TrainData::load(built.manifest_path, out.string(), "val", {2, 3}, 8000));
  }
}

TEST_CASE("the training loop logs, checkpoints, and early-stops") {
  TrainData train_data, val_data;
  for (int i = 0; i < 4; ++i)
    train_data.add(make_item("t" + std::to_string(i), 2, 1600, 100 + 10 * i));
  for (int i = 0; i < 2; ++i)
    val_data.add(make_item("v" + std::to_string(i), 2, 1600, 200 + 10 * i));

  TrainConfig cfg;
  cfg.learning_rate = 3e-4;
  cfg.batch_size = 2;
  cfg.max_epochs = 2;
  cfg.patience = 5;
  cfg.seed = 11;
  cfg.count_set = {2};

  SUBCASE("fresh run, then resume to extend it") {
    const fs::path dir = testers::scratch_dir("trainer_run");
    Separator<float> model(tiny_config());
    model.init_params(cfg.seed);

    const auto res = sepkit::train(model, train_data, val_data, cfg, dir.string());
    CHECK(res.epochs_run == 2);
    CHECK(res.best_epoch >= 1);
    CHECK(fs::exists(dir / "ckpt-001"));
    CHECK(fs::exists(dir / "ckpt-002"));
    CHECK(fs::exists(dir / "best"));
    CHECK(fs::exists(dir / "state"));

    const auto lines = read_lines(res.log_path);
    REQUIRE(lines.size() == 4);  // comment, header, two epochs
    CHECK(lines[0].find("lr=0.0003") != std::string::npos);
    CHECK(lines[0].find("batch=2") != std::string::npos);
    CHECK(lines[1] ==
          "epoch,train_loss,val_loss,gate_acc,si_snri_2,si_snri_3,si_snri_4,si_snri_5");
    CHECK(lines[2].rfind("1,", 0) == 0);
    CHECK(lines[3].rfind("2,", 0) == 0);
    // Counts 3..5 are absent from the data, so their columns read nan.
    CHECK(lines[2].find(",nan,nan,nan") != std::string::npos);

    // Resume picks up at epoch 3 and appends.
    TrainConfig more = cfg;
    more.max_epochs = 4;
    const auto res2 =
        sepkit::train(model, train_data, val_data, more, dir.string(), true);
    CHECK(res2.epochs_run == 4);
    CHECK(fs::exists(dir / "ckpt-004"));
    const auto lines2 = read_lines(res2.log_path);
    REQUIRE(lines2.size() == 6);
    CHECK(lines2[4].rfind("3,", 0) == 0);
    CHECK(lines2[5].rfind("4,", 0) == 0);

    // Best value matches the smallest logged validation loss.
    double min_val = 1e300;
    for (size_t i = 2; i < lines2.size(); ++i) {
      std::stringstream ss(lines2[i]);
      std::string field;
      std::getline(ss, field, ',');
      std::getline(ss, field, ',');
      std::getline(ss, field, ',');
      min_val = std::min(min_val, std::stod(field));
    }
    CHECK(res2.best_val_loss == doctest::Approx(min_val).epsilon(1e-4));
    CHECK(res2.best_checkpoint == (dir / "best").string());
    CHECK_NOTHROW(Separator<float>::load(res2.best_checkpoint));
  }

  SUBCASE("the first epoch is deterministic across identical runs") {
    const fs::path da = testers::scratch_dir("trainer_det_a");
    const fs::path db = testers::scratch_dir("trainer_det_b");
    TrainConfig one = cfg;
    one.max_epochs = 1;
    Separator<float> ma(tiny_config()), mb(tiny_config());
    ma.init_params(77);
    mb.init_params(77);
    sepkit::train(ma, train_data, val_data, one, da.string());
    sepkit::train(mb, train_data, val_data, one, db.string());
    CHECK(read_lines((da / "log.csv").string()) ==
          read_lines((db / "log.csv").string()));
  }

  SUBCASE("patience ends a stalled run") {
    // A vanishing learning rate leaves the weights bit-identical, so the
    // validation loss repeats and only the first epoch counts as best.
    const fs::path dir = testers::scratch_dir("trainer_stall");
    TrainConfig stall = cfg;
    stall.learning_rate = 1e-30;
    stall.max_epochs = 10;
    stall.patience = 2;
    Separator<float> model(tiny_config());
    model.init_params(13);
    const auto res = sepkit::train(model, train_data, val_data, stall, dir.string());
    CHECK(res.epochs_run == 3);
    CHECK(res.best_epoch == 1);
    CHECK_FALSE(fs::exists(dir / "ckpt-004"));
  }

  SUBCASE("a count missing from the data is rejected up front") {
    const fs::path dir = testers::scratch_dir("trainer_missing");
    TrainConfig wide = cfg;
    wide.count_set = {2, 3};
    Separator<float> model(tiny_config());
    model.init_params(1);
    CHECK_THROWS(sepkit::train(model, train_data, val_data, wide, dir.string()));
  }

  SUBCASE("resume without prior state is an error") {
    const fs::path dir = testers::scratch_dir("trainer_nostate");
    Separator<float> model(tiny_config());
    model.init_params(1);
    CHECK_THROWS(sepkit::train(model, train_data, val_data, cfg, dir.string(), true));
  }
}

TEST_CASE("validate reports a bounded gate accuracy and per-count si-snri") {
  TrainData val_data;
  val_data.add(make_item("v0", 2, 1600, 300));
  val_data.add(make_item("v1", 3, 1600, 310));

  Separator<float> model(tiny_config());
  model.init_params(17);
  TrainConfig cfg;
  const auto vm = sepkit::validate(model, val_data, cfg);

  CHECK(std::isfinite(vm.loss));
  CHECK(vm.gate_acc >= 0.0);
  CHECK(vm.gate_acc <= 1.0);
  CHECK(vm.has_si_snri[0]);
  CHECK(vm.has_si_snri[1]);
  CHECK_FALSE(vm.has_si_snri[2]);
  CHECK_FALSE(vm.has_si_snri[3]);
  CHECK(std::isfinite(vm.si_snri[0]));
}
