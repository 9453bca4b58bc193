// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "sepkit/losses.hpp"
#include "sepkit/model.hpp"
#include "sepkit/rng.hpp"

namespace sepkit {

struct TrainConfig {
  double learning_rate = 3e-4;
  int batch_size = 2;
  int max_epochs = 100;
  int patience = 5;
  uint64_t seed = 0;
  LossWeights weights;
  std::vector<int> count_set = {2, 3, 4, 5};
  double clip_norm = 5.0;

  void validate() const {
    if (learning_rate <= 0 || batch_size < 1 || max_epochs < 1 || patience < 1 ||
        clip_norm <= 0)
      throw std::invalid_argument("train config: all fields must be positive");
    if (count_set.empty()) throw std::invalid_argument("train config: empty count set");
    for (int c : count_set)
      if (c < 2 || c > 5)
        throw std::invalid_argument("train config: counts must be in {2..5}");
  }
};

/// One loaded utterance: mixture plus its anechoic targets.
struct TrainItem {
  std::string id;
  int count = 0;
  std::vector<float> mixture;
  std::vector<std::vector<float>> targets;
};

/// Eagerly loaded split, grouped by speaker count.
class TrainData {
 public:
  /// Reads <root>/<split>/<id>/{mix.wav,s*.wav} for every manifest record of
  /// the split whose count is in `counts`. expected_rate_hz > 0 rejects WAVs
  /// at any other rate.
  static TrainData load(const std::string& manifest_path, const std::string& root,
                        const std::string& split, const std::vector<int>& counts,
                        int expected_rate_hz = 0);

  const std::vector<TrainItem>& items(int count) const {
    auto it = by_count_.find(count);
    if (it == by_count_.end() || it->second.empty())
      throw std::runtime_error("no training items for count " + std::to_string(count));
    return it->second;
  }
  bool has_count(int count) const {
    auto it = by_count_.find(count);
    return it != by_count_.end() && !it->second.empty();
  }
  size_t total() const {
    size_t n = 0;
    for (const auto& [c, v] : by_count_) n += v.size();
    return n;
  }
  std::vector<int> counts() const {
    std::vector<int> cs;
    for (const auto& [c, v] : by_count_)
      if (!v.empty()) cs.push_back(c);
    return cs;
  }
  void add(TrainItem item) { by_count_[item.count].push_back(std::move(item)); }

 private:
  std::map<int, std::vector<TrainItem>> by_count_;
};

int sample_batch_count(Rng& rng, const std::vector<int>& count_set);

struct StepMetrics {
  double total = 0.0;
  double upit = 0.0;
  double stft = 0.0;
  double rec = 0.0;
  double gate = 0.0;
  double grad_norm = 0.0;
  int gate_hits = 0;  // over the last block, per batch item
  bool aborted = false;
};

template <typename S>
class Adam {
 public:
  Adam(std::vector<nn::Param<S>*> params, double lr, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    states_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      states_[i].m = nn::Mat<S>::Zero(params_[i]->value.rows(), params_[i]->value.cols());
      states_[i].v = states_[i].m;
    }
  }

  /// Updates only parameters whose gradient was touched since zero_grad, so
  /// modules outside the step's graph keep their values and moments.
  void step() {
    for (size_t i = 0; i < params_.size(); ++i) {
      nn::Param<S>* p = params_[i];
      if (!p->touched) continue;
      State& st = states_[i];
      ++st.t;
      const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(st.t));
      const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(st.t));
      S* m = st.m.data();
      S* v = st.v.data();
      S* val = p->value.data();
      const S* g = p->grad.data();
      for (int64_t j = 0; j < p->value.size(); ++j) {
        const double gj = static_cast<double>(g[j]);
        const double mj = b1_ * static_cast<double>(m[j]) + (1.0 - b1_) * gj;
        const double vj = b2_ * static_cast<double>(v[j]) + (1.0 - b2_) * gj * gj;
        m[j] = static_cast<S>(mj);
        v[j] = static_cast<S>(vj);
        const double mhat = mj / bc1;
        const double vhat = vj / bc2;
        val[j] =
            static_cast<S>(static_cast<double>(val[j]) - lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

  double learning_rate() const { return lr_; }

  void save(std::ostream& out) const {
    const uint64_t n = params_.size();
    out.write(reinterpret_cast<const char*>(&n), 8);
    for (size_t i = 0; i < params_.size(); ++i) {
      const State& st = states_[i];
      out.write(reinterpret_cast<const char*>(&st.t), 8);
      out.write(reinterpret_cast<const char*>(st.m.data()),
                static_cast<std::streamsize>(st.m.size() * sizeof(S)));
      out.write(reinterpret_cast<const char*>(st.v.data()),
                static_cast<std::streamsize>(st.v.size() * sizeof(S)));
    }
  }

  void load(std::istream& in) {
    uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), 8);
    if (n != params_.size())
      throw std::runtime_error("optimizer state: parameter count mismatch");
    for (size_t i = 0; i < params_.size(); ++i) {
      State& st = states_[i];
      in.read(reinterpret_cast<char*>(&st.t), 8);
      in.read(reinterpret_cast<char*>(st.m.data()),
              static_cast<std::streamsize>(st.m.size() * sizeof(S)));
      in.read(reinterpret_cast<char*>(st.v.data()),
              static_cast<std::streamsize>(st.v.size() * sizeof(S)));
    }
    if (!in) throw std::runtime_error("optimizer state: truncated");
  }

 private:
  struct State {
    uint64_t t = 0;
    nn::Mat<S> m, v;
  };
  std::vector<nn::Param<S>*> params_;
  std::vector<State> states_;
  double lr_, b1_, b2_, eps_;
};

namespace trainer_detail {

template <typename S>
std::vector<S> to_scalar(std::span<const float> x) {
  return std::vector<S>(x.begin(), x.end());
}

}  // namespace trainer_detail

/// One optimization step on a count-homogeneous batch. Per item and block,
/// the loss uses only expert `count` plus the gate; per-block losses are
/// averaged, then the batch is averaged, gradients are norm-clipped and one
/// Adam update applied. A non-finite loss aborts the step (no update).
template <typename S>
StepMetrics train_step(Separator<S>& model, Adam<S>& opt,
                       std::span<const TrainItem* const> batch, int count,
                       const TrainConfig& cfg) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  const int blocks = model.config().num_blocks;
  const double scale = 1.0 / (static_cast<double>(blocks) * batch.size());
  const int e = Separator<S>::expert_index(count);

  model.zero_grad();
  StepMetrics metrics;
  for (const TrainItem* item : batch) {
    if (item->count != count || static_cast<int>(item->targets.size()) != count)
      throw std::invalid_argument("train_step: batch item count mismatch");
    const std::vector<S> mixture = trainer_detail::to_scalar<S>(item->mixture);
    std::vector<std::vector<S>> refs(item->targets.size());
    std::vector<S> ref_sum(mixture.size(), S(0));
    for (size_t j = 0; j < item->targets.size(); ++j) {
      refs[j] = trainer_detail::to_scalar<S>(item->targets[j]);
      for (size_t i = 0; i < ref_sum.size(); ++i) ref_sum[i] += refs[j][i];
    }

    SeparatorCache<S> cache;
    std::vector<HeadOutput<S>> outs = model.forward(mixture, cache, count);
    std::vector<BlockGrads<S>> grads(static_cast<size_t>(blocks));
    for (int l = 0; l < blocks; ++l) {
      const auto& ests = outs[static_cast<size_t>(l)].expert_waveforms[static_cast<size_t>(e)];
      TotalLossResult<S> tl = total_loss<S>(
          refs, ests, outs[static_cast<size_t>(l)].gate_logits, count, cfg.weights,
          ref_sum, true);
      metrics.total += scale * tl.value;
      metrics.upit += scale * tl.upit_value;
      metrics.stft += scale * tl.stft_value;
      metrics.rec += scale * tl.rec_value;
      metrics.gate += scale * tl.gate_value;
      BlockGrads<S>& bg = grads[static_cast<size_t>(l)];
      bg.expert_count = count;
      bg.waveform_grads = std::move(tl.est_grads);
      for (auto& wg : bg.waveform_grads)
        for (auto& g : wg) g = static_cast<S>(g * scale);
      for (size_t k = 0; k < 4; ++k)
        bg.logit_grads[k] = static_cast<S>(tl.logit_grads[k] * scale);
    }
    const auto& last_logits = outs.back().gate_logits;
    if (Separator<S>::select_expert(std::span<const S>(last_logits)) == e)
      ++metrics.gate_hits;
    model.backward(cache, grads);
  }

  if (!std::isfinite(metrics.total)) {
    metrics.aborted = true;
    model.zero_grad();
    return metrics;
  }

  double norm2 = 0.0;
  auto params = model.params();
  for (auto* p : params) {
    if (!p->touched) continue;
    norm2 += static_cast<double>(p->grad.template cast<double>().squaredNorm());
  }
  metrics.grad_norm = std::sqrt(norm2);
  if (!std::isfinite(metrics.grad_norm)) {
    metrics.aborted = true;
    model.zero_grad();
    return metrics;
  }
  if (metrics.grad_norm > cfg.clip_norm) {
    const S factor = static_cast<S>(cfg.clip_norm / metrics.grad_norm);
    for (auto* p : params)
      if (p->touched) p->grad *= factor;
  }
  opt.step();
  return metrics;
}

struct ValMetrics {
  double loss = 0.0;
  double gate_acc = 0.0;
  std::array<double, 4> si_snri{};     // indexed by count-2
  std::array<bool, 4> has_si_snri{};   // counts present in the subsample
};

/// Deterministic validation pass: items interleaved round-robin over counts,
/// loss = mean per-item total_loss (mean over blocks); SI-SNRi on a fixed
/// per-count subsample of up to `snri_subsample` items.
template <typename S>
ValMetrics validate(Separator<S>& model, const TrainData& data,
                    const TrainConfig& cfg, int snri_subsample = 4) {
  ValMetrics vm;
  const int blocks = model.config().num_blocks;
  std::vector<int> counts = data.counts();
  size_t done = 0, idx = 0, total = data.total();
  int gate_hits = 0;
  std::array<double, 4> snri_sum{};
  std::array<int, 4> snri_n{};
  while (done < total) {
    for (int c : counts) {
      const auto& items = data.items(c);
      if (idx >= items.size()) continue;
      const TrainItem& item = items[idx];
      const int e = Separator<S>::expert_index(c);
      const std::vector<S> mixture = trainer_detail::to_scalar<S>(item.mixture);
      std::vector<std::vector<S>> refs(item.targets.size());
      std::vector<S> ref_sum(mixture.size(), S(0));
      for (size_t j = 0; j < item.targets.size(); ++j) {
        refs[j] = trainer_detail::to_scalar<S>(item.targets[j]);
        for (size_t i = 0; i < ref_sum.size(); ++i) ref_sum[i] += refs[j][i];
      }
      SeparatorCache<S> cache;
      std::vector<HeadOutput<S>> outs = model.forward(mixture, cache, c);
      double item_loss = 0.0;
      for (int l = 0; l < blocks; ++l) {
        TotalLossResult<S> tl = total_loss<S>(
            refs, outs[static_cast<size_t>(l)].expert_waveforms[static_cast<size_t>(e)],
            outs[static_cast<size_t>(l)].gate_logits, c, cfg.weights, ref_sum, false);
        item_loss += tl.value / blocks;
      }
      vm.loss += item_loss;
      const auto& logits = outs.back().gate_logits;
      if (Separator<S>::select_expert(std::span<const S>(logits)) == e) ++gate_hits;

      if (static_cast<int>(idx) < snri_subsample) {
        const auto& ests = outs.back().expert_waveforms[static_cast<size_t>(e)];
        auto [ignored, perm] = upit(refs, ests);
        (void)ignored;
        double acc = 0.0;
        for (size_t s = 0; s < ests.size(); ++s) {
          const auto& ref = refs[static_cast<size_t>(perm.perm[s])];
          acc += si_snr<S>(ref, ests[s]) - si_snr<S>(ref, mixture);
        }
        snri_sum[static_cast<size_t>(c - 2)] += acc / static_cast<double>(ests.size());
        ++snri_n[static_cast<size_t>(c - 2)];
      }
      ++done;
    }
    ++idx;
  }
  vm.loss /= static_cast<double>(total);
  vm.gate_acc = static_cast<double>(gate_hits) / static_cast<double>(total);
  for (int c = 2; c <= 5; ++c) {
    const size_t k = static_cast<size_t>(c - 2);
    if (snri_n[k] > 0) {
      vm.si_snri[k] = snri_sum[k] / snri_n[k];
      vm.has_si_snri[k] = true;
    }
  }
  return vm;
}

struct TrainResult {
  int epochs_run = 0;
  int best_epoch = 0;
  double best_val_loss = 0.0;
  std::string best_checkpoint;
  std::string log_path;
};

namespace trainer_detail {

inline void atomic_copy_file(const std::string& src, const std::string& dst) {
  const std::string tmp = dst + ".tmp";
  std::filesystem::copy_file(src, tmp,
                             std::filesystem::copy_options::overwrite_existing);
  std::filesystem::rename(tmp, dst);
}

}  // namespace trainer_detail

/// Full training run with per-epoch validation, early stopping and resumable
/// state under run_dir. Returns once patience is exhausted or max_epochs hit.
template <typename S>
TrainResult train(Separator<S>& model, const TrainData& train_data,
                  const TrainData& val_data, const TrainConfig& cfg,
                  const std::string& run_dir, bool resume = false) {
  cfg.validate();
  namespace fs = std::filesystem;
  for (int c : cfg.count_set) {
    if (!train_data.has_count(c))
      throw std::runtime_error("train split missing count " + std::to_string(c));
    if (!val_data.has_count(c))
      throw std::runtime_error("val split missing count " + std::to_string(c));
  }
  fs::create_directories(run_dir);
  const std::string log_path = (fs::path(run_dir) / "log.csv").string();
  const std::string state_path = (fs::path(run_dir) / "state").string();

  Adam<S> opt(model.params(), cfg.learning_rate);
  Rng rng(cfg.seed);
  int start_epoch = 0, best_epoch = 0, since_best = 0;
  double best_val = std::numeric_limits<double>::infinity();

  if (resume) {
    std::ifstream st(state_path, std::ios::binary);
    if (!st) throw std::runtime_error("resume requested but no state at " + state_path);
    st.read(reinterpret_cast<char*>(&start_epoch), sizeof(start_epoch));
    st.read(reinterpret_cast<char*>(&best_epoch), sizeof(best_epoch));
    st.read(reinterpret_cast<char*>(&since_best), sizeof(since_best));
    st.read(reinterpret_cast<char*>(&best_val), sizeof(best_val));
    std::string rng_text;
    uint64_t len = 0;
    st.read(reinterpret_cast<char*>(&len), 8);
    rng_text.resize(len);
    st.read(rng_text.data(), static_cast<std::streamsize>(len));
    std::istringstream is(rng_text);
    is >> rng.engine();
    opt.load(st);
    std::ostringstream ck;
    ck << "ckpt-" << std::setw(3) << std::setfill('0') << start_epoch;
    Separator<S> saved = Separator<S>::load((fs::path(run_dir) / ck.str()).string());
    auto dst = model.params();
    auto src = saved.params();
    for (size_t i = 0; i < dst.size(); ++i) dst[i]->value = src[i]->value;
  } else {
    std::ofstream log(log_path, std::ios::trunc);
    log << "# lr=" << cfg.learning_rate << " batch=" << cfg.batch_size
        << " patience=" << cfg.patience << " clip=" << cfg.clip_norm
        << " seed=" << cfg.seed << "\n";
    log << "epoch,train_loss,val_loss,gate_acc,si_snri_2,si_snri_3,si_snri_4,si_snri_5\n";
  }

  // Per-count shuffled cyclic iterators.
  struct CountIter {
    std::vector<size_t> order;
    size_t pos = 0;
  };
  std::map<int, CountIter> iters;
  for (int c : cfg.count_set) {
    CountIter it;
    it.order.resize(train_data.items(c).size());
    std::iota(it.order.begin(), it.order.end(), size_t{0});
    rng.shuffle(it.order);
    iters[c] = std::move(it);
  }
  const size_t steps_per_epoch =
      (train_data.total() + cfg.batch_size - 1) / static_cast<size_t>(cfg.batch_size);

  TrainResult result;
  result.log_path = log_path;
  for (int epoch = start_epoch + 1; epoch <= cfg.max_epochs; ++epoch) {
    double train_loss = 0.0;
    size_t steps_done = 0;
    for (size_t s = 0; s < steps_per_epoch; ++s) {
      const int c = sample_batch_count(rng, cfg.count_set);
      CountIter& it = iters[c];
      const auto& items = train_data.items(c);
      std::vector<const TrainItem*> batch;
      for (int b = 0; b < cfg.batch_size; ++b) {
        if (it.pos >= it.order.size()) {
          rng.shuffle(it.order);
          it.pos = 0;
        }
        batch.push_back(&items[it.order[it.pos++]]);
      }
      StepMetrics m = train_step(model, opt, std::span<const TrainItem* const>(batch),
                                 c, cfg);
      if (!m.aborted) {
        train_loss += m.total;
        ++steps_done;
      }
    }
    train_loss = steps_done ? train_loss / static_cast<double>(steps_done)
                            : std::numeric_limits<double>::quiet_NaN();

    ValMetrics vm = validate(model, val_data, cfg);

    {
      std::ofstream log(log_path, std::ios::app);
      log << epoch << ',' << train_loss << ',' << vm.loss << ',' << vm.gate_acc;
      for (int c = 2; c <= 5; ++c) {
        const size_t k = static_cast<size_t>(c - 2);
        log << ',';
        if (vm.has_si_snri[k])
          log << vm.si_snri[k];
        else
          log << "nan";
      }
      log << '\n';
    }

    std::ostringstream ck;
    ck << "ckpt-" << std::setw(3) << std::setfill('0') << epoch;
    const std::string ckpt_path = (fs::path(run_dir) / ck.str()).string();
    model.save(ckpt_path + ".tmp");
    fs::rename(ckpt_path + ".tmp", ckpt_path);

    if (vm.loss < best_val) {
      best_val = vm.loss;
      best_epoch = epoch;
      since_best = 0;
      trainer_detail::atomic_copy_file(ckpt_path,
                                       (fs::path(run_dir) / "best").string());
    } else {
      ++since_best;
    }

    {
      std::ofstream st(state_path + ".tmp", std::ios::binary);
      st.write(reinterpret_cast<const char*>(&epoch), sizeof(epoch));
      st.write(reinterpret_cast<const char*>(&best_epoch), sizeof(best_epoch));
      st.write(reinterpret_cast<const char*>(&since_best), sizeof(since_best));
      st.write(reinterpret_cast<const char*>(&best_val), sizeof(best_val));
      std::ostringstream os;
      os << rng.engine();
      const std::string rng_text = os.str();
      const uint64_t len = rng_text.size();
      st.write(reinterpret_cast<const char*>(&len), 8);
      st.write(rng_text.data(), static_cast<std::streamsize>(len));
      opt.save(st);
      st.close();
      fs::rename(state_path + ".tmp", state_path);
    }

    result.epochs_run = epoch;
    if (since_best >= cfg.patience) break;
  }

  result.best_epoch = best_epoch;
  result.best_val_loss = best_val;
  result.best_checkpoint = (fs::path(run_dir) / "best").string();
  return result;
}

}  // namespace sepkit
