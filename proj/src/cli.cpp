// SPDX-License-Identifier: Apache-2.0
#include "sepkit/cli.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "sepkit/losses.hpp"

namespace fs = std::filesystem;

namespace sepkit {

namespace {

using nlohmann::ordered_json;

int usage_error(const std::string& msg) {
  std::cerr << "error: " << msg << "\n";
  return 2;
}

/// SEPKIT_SEED outranks both the config file and the command line.
bool apply_env_seed(uint64_t& seed) {
  const char* env = std::getenv("SEPKIT_SEED");
  if (env == nullptr || *env == '\0') return true;
  char* end = nullptr;
  errno = 0;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (errno != 0 || end == env || *end != '\0') {
    std::cerr << "error: SEPKIT_SEED is not an unsigned integer: " << env
              << "\n";
    return false;
  }
  seed = static_cast<uint64_t>(v);
  return true;
}

std::string quoted(const std::string& s) { return "\"" + s + "\""; }

std::string int_list(const std::vector<int>& v) {
  std::ostringstream o;
  o << '[';
  for (size_t i = 0; i < v.size(); ++i) o << (i ? ", " : "") << v[i];
  o << ']';
  return o.str();
}

bool valid_counts(const std::vector<int>& v) {
  if (v.empty()) return false;
  for (int c : v)
    if (c < 2 || c > 5) return false;
  return true;
}

std::string synth_config_text(const RunConfig& c) {
  std::ostringstream o;
  o << std::setprecision(15);
  o << "[synth]\n";
  o << "speech-root = " << quoted(c.dataset.speech_root) << "\n";
  o << "noise-root = " << quoted(c.dataset.noise_root) << "\n";
  o << "out = " << quoted(c.out_dir) << "\n";
  o << "noisy = " << (c.noisy ? "true" : "false") << "\n";
  o << "render = " << (c.render ? "true" : "false") << "\n";
  o << "train-count = " << c.dataset.train_count << "\n";
  o << "val-count = " << c.dataset.val_count << "\n";
  o << "test-count = " << c.dataset.test_count << "\n";
  o << "rate = " << c.dataset.sample_rate_hz << "\n";
  o << "duration = " << c.dataset.duration_s << "\n";
  o << "seed = " << c.dataset.master_seed << "\n";
  o << "max-speakers = " << c.dataset.max_speakers << "\n";
  o << "fixed-speakers = " << c.dataset.fixed_speakers << "\n";
  o << "workers = " << c.workers << "\n";
  return o.str();
}

std::string train_config_text(const RunConfig& c) {
  std::ostringstream o;
  o << std::setprecision(15);
  o << "[train]\n";
  o << "data = " << quoted(c.manifest) << "\n";
  o << "data-root = " << quoted(c.data_root) << "\n";
  o << "run = " << quoted(c.run_name) << "\n";
  o << "runs-dir = " << quoted(c.runs_dir) << "\n";
  o << "resume = " << (c.resume ? "true" : "false") << "\n";
  o << "features = " << c.model.num_features << "\n";
  o << "kernel = " << c.model.kernel_size << "\n";
  o << "chunk-size = " << c.model.chunk_size << "\n";
  o << "chunk-step = " << c.model.chunk_step << "\n";
  o << "blocks = " << c.model.num_blocks << "\n";
  o << "hidden = " << c.model.hidden_size << "\n";
  o << "rate = " << c.model.sample_rate_hz << "\n";
  o << "max-input = " << c.model.max_input_samples << "\n";
  o << "gate-detach = " << (c.model.gate_detach ? "true" : "false") << "\n";
  o << "lr = " << c.train.learning_rate << "\n";
  o << "batch = " << c.train.batch_size << "\n";
  o << "epochs = " << c.train.max_epochs << "\n";
  o << "patience = " << c.train.patience << "\n";
  o << "seed = " << c.train.seed << "\n";
  o << "clip = " << c.train.clip_norm << "\n";
  o << "counts = " << int_list(c.train.count_set) << "\n";
  o << "lambda-stft = " << c.train.weights.lambda_stft << "\n";
  o << "lambda-rec = " << c.train.weights.lambda_rec << "\n";
  o << "lambda-gate = " << c.train.weights.lambda_gate << "\n";
  return o.str();
}

std::string eval_config_text(const RunConfig& c) {
  std::ostringstream o;
  o << std::setprecision(15);
  o << "[eval]\n";
  o << "checkpoint = " << quoted(c.checkpoint) << "\n";
  o << "data = " << quoted(c.manifest) << "\n";
  o << "data-root = " << quoted(c.data_root) << "\n";
  o << "split = " << quoted(c.split) << "\n";
  o << "mode = " << quoted(c.mode) << "\n";
  o << "selector = " << quoted(c.selector) << "\n";
  o << "silent-threshold = " << c.silent_threshold_db << "\n";
  o << "counts = " << int_list(c.eval_counts) << "\n";
  o << "out = " << quoted(c.report_dir) << "\n";
  o << "workers = " << c.workers << "\n";
  return o.str();
}

std::string separate_config_text(const RunConfig& c) {
  std::ostringstream o;
  o << "[separate]\n";
  o << "checkpoint = " << quoted(c.checkpoint) << "\n";
  o << "input = " << quoted(c.input_wav) << "\n";
  o << "out = " << quoted(c.out_dir) << "\n";
  return o.str();
}

std::array<double, 4> softmax4(const std::array<float, 4>& logits) {
  double m = logits[0];
  for (float l : logits) m = std::max(m, static_cast<double>(l));
  std::array<double, 4> p{};
  double sum = 0.0;
  for (size_t i = 0; i < 4; ++i) {
    p[i] = std::exp(static_cast<double>(logits[i]) - m);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

struct SeparateOutcome {
  int count = 0;
  std::array<double, 4> probs{};
  std::vector<std::vector<float>> waves;
};

/// Inputs longer than the model window are processed in half-overlapping
/// windows: the gate decides once on the first window, later windows keep
/// the running channel order by overlap correlation and are crossfaded in.
SeparateOutcome separate_any_length(Separator<float>& model,
                                    const std::vector<float>& x) {
  const int64_t cap = model.config().max_input_samples;
  const int64_t t = static_cast<int64_t>(x.size());
  const int64_t w0 = std::min(cap, t);

  SeparateOutcome out;
  SeparatorCache<float> cache;
  const auto outs =
      model.forward(std::span<const float>(x.data(), static_cast<size_t>(w0)),
                    cache);
  const auto& last = outs.back();
  const int e =
      Separator<float>::select_expert(std::span<const float>(last.gate_logits));
  out.count = kSupportedCounts[static_cast<size_t>(e)];
  out.probs = softmax4(last.gate_logits);

  std::vector<std::vector<float>> acc(
      static_cast<size_t>(out.count),
      std::vector<float>(static_cast<size_t>(t), 0.0f));
  const auto& first = last.expert_waveforms[static_cast<size_t>(e)];
  for (int c = 0; c < out.count; ++c)
    std::copy(first[static_cast<size_t>(c)].begin(),
              first[static_cast<size_t>(c)].end(),
              acc[static_cast<size_t>(c)].begin());

  int64_t prev_end = w0;
  const int64_t hop = std::max<int64_t>(cap / 2, 1);
  int64_t start = hop;
  while (prev_end < t) {
    if (start + cap > t) start = t - cap;
    SeparatorCache<float> wc;
    const auto wouts = model.forward(
        std::span<const float>(x.data() + start, static_cast<size_t>(cap)), wc,
        out.count);
    const auto& waves = wouts.back().expert_waveforms[static_cast<size_t>(e)];
    const int64_t ov = prev_end - start;

    std::vector<std::vector<double>> rho(
        static_cast<size_t>(out.count),
        std::vector<double>(static_cast<size_t>(out.count)));
    for (int i = 0; i < out.count; ++i)
      for (int j = 0; j < out.count; ++j)
        rho[static_cast<size_t>(i)][static_cast<size_t>(j)] = pearson_abs(
            std::span<const float>(waves[static_cast<size_t>(i)].data(),
                                   static_cast<size_t>(ov)),
            std::span<const float>(acc[static_cast<size_t>(j)].data() + start,
                                   static_cast<size_t>(ov)));
    const std::vector<int> assign =
        correlation_assignment(rho, out.count, out.count);

    for (int j = 0; j < out.count; ++j) {
      const auto& nw = waves[static_cast<size_t>(assign[static_cast<size_t>(j)])];
      auto& aj = acc[static_cast<size_t>(j)];
      for (int64_t k = 0; k < ov; ++k) {
        const float a = static_cast<float>(k + 1) / static_cast<float>(ov + 1);
        aj[static_cast<size_t>(start + k)] =
            (1.0f - a) * aj[static_cast<size_t>(start + k)] +
            a * nw[static_cast<size_t>(k)];
      }
      for (int64_t k = ov; k < cap; ++k)
        aj[static_cast<size_t>(start + k)] = nw[static_cast<size_t>(k)];
    }
    prev_end = start + cap;
    start += hop;
  }

  out.waves = std::move(acc);
  return out;
}

}  // namespace

int cmd_synth(RunConfig cfg) {
  if (!apply_env_seed(cfg.dataset.master_seed)) return 2;
  if (cfg.full_profile) {
    cfg.dataset.train_count = 20000;
    cfg.dataset.val_count = 5000;
    cfg.dataset.test_count = 3000;
  }
  std::cout << synth_config_text(cfg);

  if (cfg.dataset.speech_root.empty())
    return usage_error("synth requires --speech-root");
  if (!fs::is_directory(cfg.dataset.speech_root))
    return usage_error("speech root is not a directory: " +
                       cfg.dataset.speech_root);
  if (cfg.noisy && cfg.dataset.noise_root.empty())
    return usage_error("--noisy requires --noise-root");
  if (cfg.noisy && !fs::is_directory(cfg.dataset.noise_root))
    return usage_error("noise root is not a directory: " +
                       cfg.dataset.noise_root);
  if (cfg.dataset.train_count < 0 || cfg.dataset.val_count < 0 ||
      cfg.dataset.test_count < 0 ||
      cfg.dataset.train_count + cfg.dataset.val_count + cfg.dataset.test_count ==
          0)
    return usage_error("split counts must be non-negative and not all zero");
  if (cfg.dataset.sample_rate_hz < 1) return usage_error("rate must be positive");
  if (cfg.dataset.duration_s <= 0.0)
    return usage_error("duration must be positive");
  if (cfg.dataset.max_speakers < 2 || cfg.dataset.max_speakers > 5)
    return usage_error("max speakers must be within 2..5");
  if (cfg.dataset.fixed_speakers != 0 &&
      (cfg.dataset.fixed_speakers < 2 ||
       cfg.dataset.fixed_speakers > cfg.dataset.max_speakers))
    return usage_error("fixed speakers must be 0 or within 2..max-speakers");
  if (cfg.workers < 1) return usage_error("workers must be positive");

  try {
    const BuildResult res =
        build_dataset(cfg.dataset, cfg.noisy, cfg.out_dir, cfg.render);
    std::map<std::string, int> per_split;
    for (const MixtureRecord& r : res.records) per_split[r.split]++;
    std::cout << "\nwrote " << res.manifest_path << "\n";
    for (const char* s : {"train", "val", "test"})
      std::cout << s << ": " << per_split[s] << " records\n";
    std::cout << "master seed: " << cfg.dataset.master_seed << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

int cmd_train(RunConfig cfg) {
  if (!apply_env_seed(cfg.train.seed)) return 2;
  if (cfg.manifest.empty()) return usage_error("train requires --data <manifest>");
  if (!fs::is_regular_file(cfg.manifest))
    return usage_error("manifest not found: " + cfg.manifest);
  if (cfg.data_root.empty())
    cfg.data_root = fs::path(cfg.manifest).parent_path().string();
  if (cfg.data_root.empty()) cfg.data_root = ".";
  if (cfg.run_name.empty()) return usage_error("run name must not be empty");
  if (!valid_counts(cfg.train.count_set))
    return usage_error("counts must be a non-empty subset of 2..5");
  try {
    cfg.model.validate();
    cfg.train.validate();
  } catch (const std::exception& e) {
    return usage_error(e.what());
  }

  const std::string run_dir = (fs::path(cfg.runs_dir) / cfg.run_name).string();
  const std::string text = train_config_text(cfg);
  std::cout << text;

  try {
    fs::create_directories(run_dir);
    {
      std::ofstream snap(fs::path(run_dir) / "config.ini");
      snap << text;
      if (!snap) throw std::runtime_error("cannot write config snapshot");
    }
    const TrainData train_data =
        TrainData::load(cfg.manifest, cfg.data_root, "train",
                        cfg.train.count_set, cfg.model.sample_rate_hz);
    const TrainData val_data =
        TrainData::load(cfg.manifest, cfg.data_root, "val",
                        cfg.train.count_set, cfg.model.sample_rate_hz);
    Separator<float> model(cfg.model);
    model.init_params(cfg.train.seed);
    const TrainResult res =
        train(model, train_data, val_data, cfg.train, run_dir, cfg.resume);
    std::cout << "\nrun dir: " << run_dir << "\n"
              << "epochs run: " << res.epochs_run << "\n"
              << "best epoch: " << res.best_epoch << " (val loss "
              << res.best_val_loss << ")\n"
              << "best checkpoint: " << res.best_checkpoint << "\n"
              << "log: " << res.log_path << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

int cmd_eval(RunConfig cfg) {
  if (cfg.checkpoint.empty()) return usage_error("eval requires a checkpoint");
  if (!fs::is_regular_file(cfg.checkpoint))
    return usage_error("checkpoint not found: " + cfg.checkpoint);
  if (cfg.manifest.empty()) return usage_error("eval requires --data <manifest>");
  if (!fs::is_regular_file(cfg.manifest))
    return usage_error("manifest not found: " + cfg.manifest);
  if (cfg.mode != "known" && cfg.mode != "unknown")
    return usage_error("mode must be known or unknown");
  if (cfg.selector != "gate" && cfg.selector != "silent")
    return usage_error("selector must be gate or silent");
  if (!valid_counts(cfg.eval_counts))
    return usage_error("counts must be a non-empty subset of 2..5");
  if (cfg.workers < 1) return usage_error("workers must be positive");
  if (cfg.data_root.empty())
    cfg.data_root = fs::path(cfg.manifest).parent_path().string();
  if (cfg.data_root.empty()) cfg.data_root = ".";
  std::cout << eval_config_text(cfg);

  try {
    Separator<float> model = Separator<float>::load(cfg.checkpoint);
    const TrainData data =
        TrainData::load(cfg.manifest, cfg.data_root, cfg.split, cfg.eval_counts,
                        model.config().sample_rate_hz);
    std::vector<int> present;
    for (int c : cfg.eval_counts)
      if (data.has_count(c)) present.push_back(c);
    if (present.empty())
      throw std::runtime_error("no utterances for the requested counts in split " +
                               cfg.split);

    EvalReport rep;
    if (cfg.mode == "known") {
      rep = evaluate_known(model, data, present);
    } else {
      const CountSelector sel = cfg.selector == "gate"
                                    ? gate_selector()
                                    : silent_selector(cfg.silent_threshold_db);
      rep = evaluate_unknown(model, data, sel, present);
    }

    fs::create_directories(cfg.report_dir);
    const fs::path out(cfg.report_dir);
    write_report_json(rep, (out / "report.json").string());
    write_utterance_csv(rep, (out / "utterances.csv").string());
    if (cfg.mode == "unknown")
      write_confusion_csv(rep, (out / "confusion.csv").string());

    std::cout << "\ncount  utterances  si-snri-db\n";
    std::cout << std::fixed << std::setprecision(2);
    for (const auto& [c, mean] : rep.per_count_si_snri_db)
      std::cout << std::setw(5) << c << "  " << std::setw(10)
                << rep.per_count_total.at(c) << "  " << std::setw(10) << mean
                << "\n";
    std::cout << "overall mean si-snri: " << rep.mean_si_snri_db << " dB over "
              << rep.total << " utterances\n";
    if (cfg.mode == "unknown") {
      std::cout << "count accuracy: " << rep.count_accuracy << "\n";
      std::cout << "confusion (rows true 2..5, cols predicted 2..5):\n";
      for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j)
          std::cout << std::setw(6)
                    << rep.confusion[static_cast<size_t>(i)][static_cast<size_t>(j)];
        std::cout << "\n";
      }
    }
    std::cout << "reports written to " << cfg.report_dir << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

int cmd_separate(RunConfig cfg) {
  if (cfg.checkpoint.empty())
    return usage_error("separate requires a checkpoint");
  if (!fs::is_regular_file(cfg.checkpoint))
    return usage_error("checkpoint not found: " + cfg.checkpoint);
  if (cfg.input_wav.empty()) return usage_error("separate requires an input WAV");
  if (!fs::is_regular_file(cfg.input_wav))
    return usage_error("input not found: " + cfg.input_wav);
  std::cout << separate_config_text(cfg);

  try {
    Separator<float> model = Separator<float>::load(cfg.checkpoint);

    AudioSignal in;
    try {
      in = read_wav(cfg.input_wav, model.config().sample_rate_hz);
    } catch (const std::exception& e) {
      return usage_error(e.what());  // not mono / wrong rate / not a WAV
    }
    if (in.samples.empty()) return usage_error("input is empty");

    const SeparateOutcome out = separate_any_length(model, in.samples);
    fs::create_directories(cfg.out_dir);
    const fs::path dir(cfg.out_dir);
    std::vector<std::string> files;
    for (int c = 0; c < out.count; ++c) {
      AudioSignal sig{out.waves[static_cast<size_t>(c)], in.sample_rate_hz};
      const std::string path =
          (dir / ("s" + std::to_string(c + 1) + ".wav")).string();
      write_wav(path, sig);
      files.push_back(path);
    }

    ordered_json side;
    side["schema"] = "separation-v1";
    side["input"] = cfg.input_wav;
    side["checkpoint"] = cfg.checkpoint;
    side["sample_rate_hz"] = in.sample_rate_hz;
    side["num_samples"] = in.samples.size();
    side["predicted_count"] = out.count;
    ordered_json probs = ordered_json::object();
    for (size_t i = 0; i < 4; ++i)
      probs[std::to_string(kSupportedCounts[i])] = out.probs[i];
    side["gate_probabilities"] = probs;
    ordered_json jfiles = ordered_json::array();
    for (const std::string& f : files) jfiles.push_back(f);
    side["files"] = jfiles;
    {
      std::ofstream o(dir / "separation.json");
      if (!o) throw std::runtime_error("cannot write separation.json");
      o << side.dump(2) << '\n';
    }

    std::cout << "\npredicted count: " << out.count << "\n";
    for (const std::string& f : files) std::cout << f << "\n";
    std::cout << (dir / "separation.json").string() << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

int run_cli(int argc, const char* const* argv) {
  RunConfig cfg;
  CLI::App app{"sepkit: variable speaker-count speech separation toolkit"};
  app.require_subcommand(1);
  app.set_config("--config", "",
                 "Read options from an INI file with one section per subcommand");

  CLI::App* synth = app.add_subcommand(
      "synth", "Synthesize a mixture dataset (manifest + WAV tree)");
  synth->configurable();
  synth->add_option("--speech-root", cfg.dataset.speech_root,
                    "Speech corpus root (speaker directories of WAV files)");
  synth->add_option("--noise-root", cfg.dataset.noise_root,
                    "Noise corpus root (WAV files)");
  synth->add_option("--out", cfg.out_dir, "Output dataset directory")
      ->capture_default_str();
  synth->add_flag("--noisy", cfg.noisy,
                  "Render noisy reverberant mixtures instead of clean ones");
  synth->add_flag("--full-profile", cfg.full_profile,
                  "Use the 20000/5000/3000 split profile (overrides counts)");
  synth->add_flag("--render,!--no-render", cfg.render,
                  "Write WAV stems next to the manifest")
      ->capture_default_str();
  synth->add_option("--train-count", cfg.dataset.train_count,
                    "Training records")
      ->capture_default_str();
  synth->add_option("--val-count", cfg.dataset.val_count, "Validation records")
      ->capture_default_str();
  synth->add_option("--test-count", cfg.dataset.test_count, "Test records")
      ->capture_default_str();
  synth->add_option("--rate", cfg.dataset.sample_rate_hz, "Sample rate in Hz")
      ->capture_default_str();
  synth->add_option("--duration", cfg.dataset.duration_s,
                    "Utterance length in seconds")
      ->capture_default_str();
  synth->add_option("--seed", cfg.dataset.master_seed,
                    "Master seed (SEPKIT_SEED env var overrides)")
      ->capture_default_str();
  synth->add_option("--max-speakers", cfg.dataset.max_speakers,
                    "Largest speaker count")
      ->capture_default_str();
  synth->add_option("--fixed-speakers", cfg.dataset.fixed_speakers,
                    "Fix every record to this count (0 = sample 2..max)")
      ->capture_default_str();
  synth->add_option("--workers", cfg.workers,
                    "Worker cap (this build renders sequentially)")
      ->capture_default_str();

  CLI::App* train_cmd =
      app.add_subcommand("train", "Train a separator on a synthesized dataset");
  train_cmd->configurable();
  train_cmd->add_option("--data", cfg.manifest, "Dataset manifest (JSON lines)");
  train_cmd->add_option("--data-root", cfg.data_root,
                        "WAV tree root (default: manifest directory)");
  train_cmd->add_option("--run", cfg.run_name, "Run name")->capture_default_str();
  train_cmd->add_option("--runs-dir", cfg.runs_dir, "Directory holding runs")
      ->capture_default_str();
  train_cmd->add_flag("--resume", cfg.resume,
                      "Resume from the run's saved state");
  train_cmd->add_option("--features", cfg.model.num_features,
                        "Encoder feature channels")
      ->capture_default_str();
  train_cmd->add_option("--kernel", cfg.model.kernel_size,
                        "Encoder kernel length in samples")
      ->capture_default_str();
  train_cmd->add_option("--chunk-size", cfg.model.chunk_size,
                        "Chunk length in frames")
      ->capture_default_str();
  train_cmd->add_option("--chunk-step", cfg.model.chunk_step,
                        "Chunk hop in frames")
      ->capture_default_str();
  train_cmd->add_option("--blocks", cfg.model.num_blocks,
                        "Dual-path block count")
      ->capture_default_str();
  train_cmd->add_option("--hidden", cfg.model.hidden_size, "LSTM hidden size")
      ->capture_default_str();
  train_cmd->add_option("--rate", cfg.model.sample_rate_hz,
                        "Model sample rate in Hz")
      ->capture_default_str();
  train_cmd->add_option("--max-input", cfg.model.max_input_samples,
                        "Longest input the model accepts, in samples")
      ->capture_default_str();
  train_cmd->add_flag("--gate-detach", cfg.model.gate_detach,
                      "Stop count-gate gradients at the trunk");
  train_cmd->add_option("--lr", cfg.train.learning_rate, "Adam learning rate")
      ->capture_default_str();
  train_cmd->add_option("--batch", cfg.train.batch_size, "Batch size")
      ->capture_default_str();
  train_cmd->add_option("--epochs", cfg.train.max_epochs, "Epoch cap")
      ->capture_default_str();
  train_cmd->add_option("--patience", cfg.train.patience,
                        "Early-stop patience in epochs")
      ->capture_default_str();
  train_cmd->add_option("--seed", cfg.train.seed,
                        "Training seed (SEPKIT_SEED env var overrides)")
      ->capture_default_str();
  train_cmd->add_option("--clip", cfg.train.clip_norm, "Gradient norm clip")
      ->capture_default_str();
  train_cmd->add_option("--counts", cfg.train.count_set,
                        "Speaker counts to train on")
      ->delimiter(',')
      ->capture_default_str();
  train_cmd->add_option("--lambda-stft", cfg.train.weights.lambda_stft,
                        "Spectral loss weight")
      ->capture_default_str();
  train_cmd->add_option("--lambda-rec", cfg.train.weights.lambda_rec,
                        "Reconstruction loss weight")
      ->capture_default_str();
  train_cmd->add_option("--lambda-gate", cfg.train.weights.lambda_gate,
                        "Count classification loss weight")
      ->capture_default_str();

  CLI::App* eval_cmd =
      app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  eval_cmd->configurable();
  eval_cmd->add_option("checkpoint,--checkpoint", cfg.checkpoint,
                       "Model checkpoint");
  eval_cmd->add_option("--data", cfg.manifest, "Dataset manifest (JSON lines)");
  eval_cmd->add_option("--data-root", cfg.data_root,
                       "WAV tree root (default: manifest directory)");
  eval_cmd->add_option("--split", cfg.split, "Dataset split")
      ->capture_default_str();
  eval_cmd->add_option("--mode", cfg.mode, "known or unknown speaker count")
      ->check(CLI::IsMember({"known", "unknown"}))
      ->capture_default_str();
  eval_cmd
      ->add_option("--selector", cfg.selector,
                   "Count selector for unknown mode: gate or silent")
      ->check(CLI::IsMember({"gate", "silent"}))
      ->capture_default_str();
  eval_cmd
      ->add_option("--silent-threshold", cfg.silent_threshold_db,
                   "Silent-channel threshold in dB relative to the loudest")
      ->capture_default_str();
  eval_cmd->add_option("--counts", cfg.eval_counts, "Speaker counts to evaluate")
      ->delimiter(',')
      ->capture_default_str();
  eval_cmd->add_option("--out", cfg.report_dir, "Report directory")
      ->capture_default_str();
  eval_cmd->add_option("--workers", cfg.workers,
                       "Worker cap (this build evaluates sequentially)")
      ->capture_default_str();

  CLI::App* sep_cmd = app.add_subcommand(
      "separate", "Separate one WAV file with a trained checkpoint");
  sep_cmd->configurable();
  sep_cmd->add_option("checkpoint,--checkpoint", cfg.checkpoint,
                      "Model checkpoint");
  sep_cmd->add_option("input,--input", cfg.input_wav,
                      "Input mono WAV at the model sample rate");
  sep_cmd->add_option("--out", cfg.out_dir, "Output directory")
      ->capture_default_str();

  int code = 0;
  synth->callback([&] { code = cmd_synth(cfg); });
  train_cmd->callback([&] { code = cmd_train(cfg); });
  eval_cmd->callback([&] { code = cmd_eval(cfg); });
  sep_cmd->callback([&] { code = cmd_separate(cfg); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return code;
}

}  // namespace sepkit
