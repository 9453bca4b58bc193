// SPDX-License-Identifier: Apache-2.0
#include "sepkit/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "sepkit/losses.hpp"

namespace sepkit {

namespace {

using nlohmann::ordered_json;

bool supported_count(int c) {
  return std::find(kSupportedCounts.begin(), kSupportedCounts.end(), c) !=
         kSupportedCounts.end();
}

double channel_energy(const std::vector<float>& x) {
  double e = 0.0;
  for (float v : x) e += static_cast<double>(v) * static_cast<double>(v);
  return e;
}

}  // namespace

std::vector<int> correlation_assignment(
    const std::vector<std::vector<double>>& rho, int num_preds,
    int num_targets) {
  if (num_targets < 1 || num_preds < num_targets || num_preds > 6)
    throw std::invalid_argument("correlation_assignment: bad channel counts");
  std::vector<int> p(static_cast<size_t>(num_preds));
  std::iota(p.begin(), p.end(), 0);
  std::vector<int> best;
  double best_score = -std::numeric_limits<double>::infinity();
  do {
    double score = 0.0;
    for (int j = 0; j < num_targets; ++j)
      score += rho[static_cast<size_t>(p[static_cast<size_t>(j)])]
                  [static_cast<size_t>(j)];
    if (score > best_score) {
      best_score = score;
      best.assign(p.begin(), p.begin() + num_targets);
    }
  } while (std::next_permutation(p.begin(), p.end()));
  return best;
}

namespace {

void finalize_report(EvalReport& rep, const std::map<int, double>& sums,
                     double total_sum) {
  for (const auto& [c, s] : sums)
    rep.per_count_si_snri_db[c] = s / rep.per_count_total.at(c);
  rep.mean_si_snri_db =
      rep.total > 0 ? total_sum / static_cast<double>(rep.total) : 0.0;
  int trace = 0;
  for (int i = 0; i < 4; ++i)
    trace += rep.confusion[static_cast<size_t>(i)][static_cast<size_t>(i)];
  rep.count_accuracy =
      rep.total > 0 ? static_cast<double>(trace) / rep.total : 0.0;
}

}  // namespace

double pearson_abs(std::span<const float> a, std::span<const float> b) {
  const size_t n = std::min(a.size(), b.size());
  if (n == 0) return 0.0;
  double ma = 0.0, mb = 0.0;
  for (size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double saa = 0.0, sbb = 0.0, sab = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    saa += da * da;
    sbb += db * db;
    sab += da * db;
  }
  if (saa <= 0.0 || sbb <= 0.0) return 0.0;
  return std::abs(sab / std::sqrt(saa * sbb));
}

std::vector<std::vector<float>> match_channels(
    const std::vector<std::vector<float>>& preds,
    const std::vector<std::vector<float>>& targets) {
  const int cp = static_cast<int>(preds.size());
  const int ct = static_cast<int>(targets.size());
  if (cp < 1 || cp > 5 || ct < 1 || ct > 5)
    throw std::invalid_argument("match_channels: channel counts must be 1..5");

  std::vector<std::vector<float>> out(static_cast<size_t>(ct));
  if (cp == ct) {
    auto [loss, perm] = upit<float>(targets, preds);
    (void)loss;
    for (int e = 0; e < cp; ++e)
      out[static_cast<size_t>(perm.perm[static_cast<size_t>(e)])] =
          preds[static_cast<size_t>(e)];
    return out;
  }

  std::vector<std::vector<double>> rho(
      static_cast<size_t>(cp), std::vector<double>(static_cast<size_t>(ct)));
  for (int i = 0; i < cp; ++i)
    for (int j = 0; j < ct; ++j)
      rho[static_cast<size_t>(i)][static_cast<size_t>(j)] =
          pearson_abs(preds[static_cast<size_t>(i)],
                      targets[static_cast<size_t>(j)]);

  if (cp > ct) {
    const std::vector<int> assign = correlation_assignment(rho, cp, ct);
    for (int j = 0; j < ct; ++j)
      out[static_cast<size_t>(j)] =
          preds[static_cast<size_t>(assign[static_cast<size_t>(j)])];
  } else {
    for (int j = 0; j < ct; ++j) {
      int best = 0;
      for (int i = 1; i < cp; ++i)
        if (rho[static_cast<size_t>(i)][static_cast<size_t>(j)] >
            rho[static_cast<size_t>(best)][static_cast<size_t>(j)])
          best = i;
      out[static_cast<size_t>(j)] = preds[static_cast<size_t>(best)];
    }
  }
  return out;
}

std::vector<int> silent_channel_select(
    const std::vector<std::vector<float>>& waveforms, double threshold_db) {
  const int n = static_cast<int>(waveforms.size());
  if (n < 2)
    throw std::invalid_argument("silent_channel_select: need >= 2 channels");

  std::vector<double> energy(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    energy[static_cast<size_t>(i)] = channel_energy(waveforms[static_cast<size_t>(i)]);
  const double emax = *std::max_element(energy.begin(), energy.end());

  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const double ea = energy[static_cast<size_t>(a)];
    const double eb = energy[static_cast<size_t>(b)];
    return ea != eb ? ea > eb : a < b;
  });

  std::vector<char> keep(static_cast<size_t>(n), 0);
  keep[static_cast<size_t>(order[0])] = 1;
  keep[static_cast<size_t>(order[1])] = 1;
  for (int i = 0; i < n; ++i) {
    if (keep[static_cast<size_t>(i)]) continue;
    const double e = energy[static_cast<size_t>(i)];
    if (emax <= 0.0) {
      keep[static_cast<size_t>(i)] = 1;  // all channels silent: all equal
    } else if (e > 0.0 && 10.0 * std::log10(e / emax) >= threshold_db) {
      keep[static_cast<size_t>(i)] = 1;
    }
  }

  std::vector<int> active;
  for (int i = 0; i < n; ++i)
    if (keep[static_cast<size_t>(i)]) active.push_back(i);
  return active;
}

CountSelector gate_selector() {
  return [](Separator<float>& model, const TrainItem& item) {
    auto [count, waves] =
        model.infer(std::span<const float>(item.mixture));
    return SelectionResult{count, std::move(waves)};
  };
}

CountSelector silent_selector(double threshold_db) {
  return [threshold_db](Separator<float>& model, const TrainItem& item) {
    SeparatorCache<float> cache;
    const auto outs =
        model.forward(std::span<const float>(item.mixture), cache, 5);
    const auto& waves =
        outs.back().expert_waveforms[static_cast<size_t>(
            Separator<float>::expert_index(5))];
    const std::vector<int> active = silent_channel_select(waves, threshold_db);
    SelectionResult sel;
    sel.predicted_count = static_cast<int>(active.size());
    for (int i : active) sel.estimates.push_back(waves[static_cast<size_t>(i)]);
    return sel;
  };
}

EvalReport evaluate_known(Separator<float>& model, const TrainData& data,
                          const std::vector<int>& counts) {
  EvalReport rep;
  std::map<int, double> sums;
  double total_sum = 0.0;
  for (int c : counts) {
    if (!supported_count(c))
      throw std::invalid_argument("unsupported speaker count " +
                                  std::to_string(c));
    for (const TrainItem& item : data.items(c)) {
      SeparatorCache<float> cache;
      const auto outs =
          model.forward(std::span<const float>(item.mixture), cache, c);
      const auto& ests = outs.back().expert_waveforms[static_cast<size_t>(
          Separator<float>::expert_index(c))];
      auto [loss, perm] = upit<float>(item.targets, ests);
      (void)loss;
      double snri = 0.0;
      for (size_t e = 0; e < ests.size(); ++e) {
        const auto& ref =
            item.targets[static_cast<size_t>(perm.perm[e])];
        snri += perm.pair_si_snr_db[e] - si_snr<float>(ref, item.mixture);
      }
      snri /= static_cast<double>(ests.size());

      rep.utterances.push_back({item.id, c, c, snri});
      rep.confusion[static_cast<size_t>(c - 2)][static_cast<size_t>(c - 2)]++;
      rep.per_count_total[c]++;
      sums[c] += snri;
      total_sum += snri;
      rep.total++;
    }
  }
  finalize_report(rep, sums, total_sum);
  return rep;
}

EvalReport evaluate_unknown(Separator<float>& model, const TrainData& data,
                            const CountSelector& selector,
                            const std::vector<int>& counts) {
  EvalReport rep;
  std::map<int, double> sums;
  double total_sum = 0.0;
  for (int c : counts) {
    if (!supported_count(c))
      throw std::invalid_argument("unsupported speaker count " +
                                  std::to_string(c));
    for (const TrainItem& item : data.items(c)) {
      const SelectionResult sel = selector(model, item);
      if (!supported_count(sel.predicted_count) ||
          sel.estimates.size() !=
              static_cast<size_t>(sel.predicted_count))
        throw std::runtime_error("selector returned inconsistent result for " +
                                 item.id);
      const auto aligned = match_channels(sel.estimates, item.targets);
      double snri = 0.0;
      for (size_t j = 0; j < item.targets.size(); ++j)
        snri += si_snri<float>(item.targets[j], aligned[j], item.mixture);
      snri /= static_cast<double>(item.targets.size());

      rep.utterances.push_back({item.id, c, sel.predicted_count, snri});
      rep.confusion[static_cast<size_t>(c - 2)]
                   [static_cast<size_t>(sel.predicted_count - 2)]++;
      rep.per_count_total[c]++;
      sums[c] += snri;
      total_sum += snri;
      rep.total++;
    }
  }
  finalize_report(rep, sums, total_sum);
  return rep;
}

void write_report_json(const EvalReport& report, const std::string& path) {
  ordered_json j;
  j["schema"] = "eval-report-v1";
  j["total_utterances"] = report.total;
  j["mean_si_snri_db"] = report.mean_si_snri_db;
  j["count_accuracy"] = report.count_accuracy;

  ordered_json per = ordered_json::object();
  for (const auto& [c, mean] : report.per_count_si_snri_db) {
    ordered_json entry;
    entry["utterances"] = report.per_count_total.at(c);
    entry["mean_si_snri_db"] = mean;
    per[std::to_string(c)] = entry;
  }
  j["per_count"] = per;

  ordered_json counts = ordered_json::array();
  ordered_json acc = ordered_json::array();
  for (int i = 0; i < 4; ++i) {
    const auto& row = report.confusion[static_cast<size_t>(i)];
    int row_total = 0;
    for (int v : row) row_total += v;
    ordered_json crow = ordered_json::array();
    ordered_json arow = ordered_json::array();
    for (int jv = 0; jv < 4; ++jv) {
      crow.push_back(row[static_cast<size_t>(jv)]);
      arow.push_back(row_total > 0
                         ? static_cast<double>(row[static_cast<size_t>(jv)]) /
                               row_total
                         : 0.0);
    }
    counts.push_back(crow);
    acc.push_back(arow);
  }
  j["confusion"]["true_counts"] = {2, 3, 4, 5};
  j["confusion"]["counts"] = counts;
  j["confusion"]["accuracy"] = acc;

  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << '\n';
}

void write_utterance_csv(const EvalReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "id,true_count,predicted_count,si_snri_db\n";
  out << std::fixed << std::setprecision(6);
  for (const UtteranceResult& u : report.utterances)
    out << u.id << ',' << u.true_count << ',' << u.predicted_count << ','
        << u.si_snri_db << '\n';
}

void write_confusion_csv(const EvalReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "true_count,pred_2,pred_3,pred_4,pred_5\n";
  for (int i = 0; i < 4; ++i) {
    out << (i + 2);
    for (int jv = 0; jv < 4; ++jv)
      out << ',' << report.confusion[static_cast<size_t>(i)][static_cast<size_t>(jv)];
    out << '\n';
  }
}

}  // namespace sepkit
