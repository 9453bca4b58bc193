// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "sepkit/model.hpp"
#include "sepkit/trainer.hpp"

namespace sepkit {

/// Channels quieter than this (relative to the loudest channel) are treated
/// as silent by the max-count selection baseline.
inline constexpr double kSilentThresholdDb = -20.0;

struct UtteranceResult {
  std::string id;
  int true_count = 0;
  int predicted_count = 0;
  double si_snri_db = 0.0;
};

/// Aggregated evaluation outcome. The confusion matrix is indexed
/// [true_count - 2][predicted_count - 2]; each row sums to the number of
/// utterances evaluated at that true count.
struct EvalReport {
  std::map<int, double> per_count_si_snri_db;
  std::map<int, int> per_count_total;
  double mean_si_snri_db = 0.0;
  std::array<std::array<int, 4>, 4> confusion{};
  double count_accuracy = 0.0;
  int total = 0;
  std::vector<UtteranceResult> utterances;
};

/// |Pearson correlation| at zero lag over the common prefix of the two
/// signals. A zero-variance channel correlates 0 with everything.
double pearson_abs(std::span<const float> a, std::span<const float> b);

/// Exhaustive injective assignment target -> prediction maximizing total
/// correlation; rho is indexed [pred][target] and num_preds >= num_targets.
/// Ties keep the lexicographically smallest assignment. Returns one
/// prediction index per target.
std::vector<int> correlation_assignment(
    const std::vector<std::vector<double>>& rho, int num_preds,
    int num_targets);

/// Aligns predictions to targets and returns exactly targets.size() signals
/// in target order. Equal counts align by best mean SI-SNR permutation; with
/// extra predictions the subset maximizing total |Pearson| is assigned
/// exhaustively; with missing predictions each target takes its
/// best-correlated prediction, reuse allowed.
std::vector<std::vector<float>> match_channels(
    const std::vector<std::vector<float>>& preds,
    const std::vector<std::vector<float>>& targets);

/// Indices (ascending) of channels within threshold_db of the loudest one.
/// The two loudest channels are always kept.
std::vector<int> silent_channel_select(
    const std::vector<std::vector<float>>& waveforms,
    double threshold_db = kSilentThresholdDb);

/// What a count selector hands back for one utterance: the predicted speaker
/// count and the estimate channels to score (predicted_count of them).
struct SelectionResult {
  int predicted_count = 0;
  std::vector<std::vector<float>> estimates;
};

using CountSelector =
    std::function<SelectionResult(Separator<float>&, const TrainItem&)>;

/// Picks the expert chosen by the final-block gate and returns its outputs.
CountSelector gate_selector();

/// Always runs the max-count expert and keeps its non-silent channels.
CountSelector silent_selector(double threshold_db = kSilentThresholdDb);

/// Known-count protocol: every utterance is run through the expert matching
/// its true count and scored after best-permutation alignment.
EvalReport evaluate_known(Separator<float>& model, const TrainData& data,
                          const std::vector<int>& counts);

/// Unknown-count protocol: the selector predicts the count, estimates are
/// matched to targets, and the (true, predicted) pair feeds the confusion
/// matrix.
EvalReport evaluate_unknown(Separator<float>& model, const TrainData& data,
                            const CountSelector& selector,
                            const std::vector<int>& counts);

void write_report_json(const EvalReport& report, const std::string& path);
void write_utterance_csv(const EvalReport& report, const std::string& path);
void write_confusion_csv(const EvalReport& report, const std::string& path);

}  // namespace sepkit
