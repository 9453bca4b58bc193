// SPDX-License-Identifier: Apache-2.0
#include "sepkit/evaluator.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "sepkit/losses.hpp"
#include "testers.hpp"

using sepkit::correlation_assignment;
using sepkit::CountSelector;
using sepkit::EvalReport;
using sepkit::evaluate_known;
using sepkit::evaluate_unknown;
using sepkit::match_channels;
using sepkit::pearson_abs;
using sepkit::SelectionResult;
using sepkit::Separator;
using sepkit::SeparatorConfig;
using sepkit::silent_channel_select;
using sepkit::si_snr;
using sepkit::TrainData;
using sepkit::TrainItem;

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

TrainData two_and_three(int per_count, int t_len) {
  TrainData data;
  int seed = 1000;
  for (int c : {2, 3})
    for (int i = 0; i < per_count; ++i, seed += 100)
      data.add(make_item("c" + std::to_string(c) + "_" + std::to_string(i), c,
                         t_len, seed));
  return data;
}

}  // namespace

TEST_CASE("pearson_abs on hand-checked vectors") {
  const std::vector<float> a = {1.0f, 2.0f, 3.0f, 4.0f};
  const std::vector<float> twice = {2.0f, 4.0f, 6.0f, 8.0f};
  const std::vector<float> neg = {-1.0f, -2.0f, -3.0f, -4.0f};
  CHECK(pearson_abs(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(pearson_abs(a, twice) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(pearson_abs(a, neg) == doctest::Approx(1.0).epsilon(1e-12));  // absolute value

  // By hand: centered a = [-1,0,1], b = [-1,1,0]; sab=1, saa=sbb=2.
  const std::vector<float> x = {1.0f, 2.0f, 3.0f};
  const std::vector<float> y = {1.0f, 3.0f, 2.0f};
  CHECK(pearson_abs(x, y) == doctest::Approx(0.5).epsilon(1e-12));

  const std::vector<float> u = {1.0f, 0.0f, 1.0f, 0.0f};
  const std::vector<float> v = {1.0f, 0.0f, 0.0f, 1.0f};
  CHECK(pearson_abs(u, v) == 0.0);

  const std::vector<float> flat = {0.5f, 0.5f, 0.5f};
  CHECK(pearson_abs(flat, x) == 0.0);  // zero variance correlates with nothing

  // Lengths differ: only the common prefix counts.
  const std::vector<float> longer = {1.0f, 2.0f, 3.0f, -100.0f, 50.0f};
  CHECK(pearson_abs(longer, x) == doctest::Approx(1.0).epsilon(1e-12));

  CHECK(pearson_abs(std::span<const float>(), x) == 0.0);
}

TEST_CASE("correlation_assignment maximizes total correlation") {
  const std::vector<std::vector<double>> rho = {
      {0.9, 0.1}, {0.2, 0.8}, {0.5, 0.4}};
  CHECK(correlation_assignment(rho, 3, 2) == std::vector<int>{0, 1});

  // Swapped optimum.
  const std::vector<std::vector<double>> cross = {
      {0.1, 0.9}, {0.8, 0.2}, {0.0, 0.0}};
  CHECK(correlation_assignment(cross, 3, 2) == std::vector<int>{1, 0});

  // All-equal scores keep the lexicographically smallest assignment.
  const std::vector<std::vector<double>> flat(
      4, std::vector<double>(2, 0.5));
  CHECK(correlation_assignment(flat, 4, 2) == std::vector<int>{0, 1});

  CHECK_THROWS(correlation_assignment(rho, 1, 2));  // fewer preds than targets
  CHECK_THROWS(correlation_assignment(rho, 3, 0));
  const std::vector<std::vector<double>> wide(
      7, std::vector<double>(2, 0.1));
  CHECK_THROWS(correlation_assignment(wide, 7, 2));
}

TEST_CASE("match_channels aligns, discards, or reuses predictions") {
  const std::vector<float> t0 = testers::speech_like(900, 8000, 0, 11);
  const std::vector<float> t1 = testers::speech_like(900, 8000, 1, 22);
  const std::vector<float> t2 = testers::speech_like(900, 8000, 2, 33);

  SUBCASE("equal counts use the best si-snr permutation") {
    const auto out = match_channels({t1, t0}, {t0, t1});
    REQUIRE(out.size() == 2);
    CHECK(out[0] == t0);
    CHECK(out[1] == t1);
  }
  SUBCASE("equal counts on noisy estimates still track their sources") {
    std::vector<float> e0(t1), e1(t0);
    const std::vector<float> n = testers::random_signal(900, 44, 0.05f);
    for (size_t i = 0; i < e0.size(); ++i) {
      e0[i] += n[i];
      e1[i] -= n[i];
    }
    const auto out = match_channels({e0, e1}, {t0, t1});
    CHECK(out[0] == e1);
    CHECK(out[1] == e0);
  }
  SUBCASE("surplus predictions drop the uncorrelated channel") {
    std::vector<float> p0(t0), p2(t1);
    const std::vector<float> noise = testers::random_signal(900, 55, 0.3f);
    for (size_t i = 0; i < p0.size(); ++i) {
      p0[i] += 0.02f * noise[i];
      p2[i] -= 0.02f * noise[i];
    }
    const auto out = match_channels({p0, noise, p2}, {t0, t1});
    REQUIRE(out.size() == 2);
    CHECK(out[0] == p0);
    CHECK(out[1] == p2);
  }
  SUBCASE("a single prediction serves every target") {
    const auto out = match_channels({t0}, {t0, t1});
    REQUIRE(out.size() == 2);
    CHECK(out[0] == t0);
    CHECK(out[1] == t0);
  }
  SUBCASE("missing predictions are reused by best correlation") {
    std::vector<float> p0(t0);
    for (size_t i = 0; i < p0.size(); ++i) p0[i] += 0.1f * t1[i];
    const auto out = match_channels({p0, t2}, {t0, t1, t2});
    REQUIRE(out.size() == 3);
    CHECK(out[0] == p0);
    CHECK(out[1] == p0);  // best available, reused
    CHECK(out[2] == t2);
  }
  SUBCASE("channel counts outside 1..5 throw") {
    CHECK_THROWS(match_channels({}, {t0}));
    const std::vector<std::vector<float>> six(6, t0);
    CHECK_THROWS(match_channels(six, {t0, t1}));
    CHECK_THROWS(match_channels({t0}, {}));
  }
}

TEST_CASE("silent_channel_select applies the relative-energy gate") {
  const std::vector<float> loud = testers::sine(800, 8000, 300.0, 0.5);
  const std::vector<float> zero(800, 0.0f);

  SUBCASE("zero channels are dropped, the two loudest stay") {
    const std::vector<float> mid = testers::sine(800, 8000, 500.0, 0.3);
    const auto keep = silent_channel_select({zero, loud, zero, mid, zero});
    CHECK(keep == std::vector<int>{1, 3});
  }
  SUBCASE("equal channels are all kept") {
    const auto keep = silent_channel_select({loud, loud, loud, loud});
    CHECK(keep == std::vector<int>{0, 1, 2, 3});
  }
  SUBCASE("the threshold separates -25 dB from -15 dB") {
    auto scaled = [&](double gain_db) {
      std::vector<float> s(loud);
      const float g = static_cast<float>(std::pow(10.0, gain_db / 20.0));
      for (float& v : s) v *= g;
      return s;
    };
    const auto keep =
        silent_channel_select({loud, scaled(-25.0), scaled(-15.0)}, -20.0);
    CHECK(keep == std::vector<int>{0, 2});
    // A looser threshold readmits the quiet channel.
    const auto keep30 =
        silent_channel_select({loud, scaled(-25.0), scaled(-15.0)}, -30.0);
    CHECK(keep30 == std::vector<int>{0, 1, 2});
  }
  SUBCASE("the two loudest survive any threshold") {
    auto quiet = [&](float g) {
      std::vector<float> s(loud);
      for (float& v : s) v *= g;
      return s;
    };
    const auto keep = silent_channel_select({loud, quiet(0.01f), quiet(0.005f)});
    CHECK(keep == std::vector<int>{0, 1});
  }
  SUBCASE("all-silent input keeps everything") {
    const auto keep = silent_channel_select({zero, zero, zero});
    CHECK(keep == std::vector<int>{0, 1, 2});
  }
  SUBCASE("fewer than two channels is an error") {
    CHECK_THROWS(silent_channel_select({loud}));
  }
}

TEST_CASE("bundled selectors produce self-consistent results") {
  Separator<float> model(tiny_config());
  model.init_params(9);
  const TrainItem item = make_item("x", 3, 1600, 500);

  const SelectionResult g = sepkit::gate_selector()(model, item);
  CHECK(g.predicted_count >= 2);
  CHECK(g.predicted_count <= 5);
  CHECK(g.estimates.size() == static_cast<size_t>(g.predicted_count));
  const auto [count, waves] = model.infer(std::span<const float>(item.mixture));
  CHECK(g.predicted_count == count);
  CHECK(g.estimates == waves);

  const SelectionResult s = sepkit::silent_selector()(model, item);
  CHECK(s.predicted_count >= 2);
  CHECK(s.predicted_count <= 5);
  CHECK(s.estimates.size() == static_cast<size_t>(s.predicted_count));
  for (const auto& w : s.estimates) CHECK(w.size() == item.mixture.size());
}

TEST_CASE("evaluate_known scores each count through its own expert") {
  Separator<float> model(tiny_config());
  model.init_params(19);
  const TrainData data = two_and_three(2, 1600);

  const EvalReport rep = evaluate_known(model, data, {2, 3});

  CHECK(rep.total == 4);
  CHECK(rep.per_count_total.at(2) == 2);
  CHECK(rep.per_count_total.at(3) == 2);
  CHECK(rep.count_accuracy == 1.0);  // known count: confusion is diagonal
  CHECK(rep.confusion[0][0] == 2);
  CHECK(rep.confusion[1][1] == 2);
  CHECK(rep.confusion[0][1] == 0);
  CHECK(rep.confusion[2][2] == 0);
  REQUIRE(rep.utterances.size() == 4);

  double sum = 0.0;
  for (const auto& u : rep.utterances) {
    CHECK(u.true_count == u.predicted_count);
    CHECK(std::isfinite(u.si_snri_db));
    sum += u.si_snri_db;
  }
  CHECK(rep.mean_si_snri_db == doctest::Approx(sum / 4.0).epsilon(1e-12));
  const double mean2 = rep.per_count_si_snri_db.at(2);
  const double mean3 = rep.per_count_si_snri_db.at(3);
  CHECK(rep.mean_si_snri_db ==
        doctest::Approx((2 * mean2 + 2 * mean3) / 4.0).epsilon(1e-12));

  CHECK_THROWS(evaluate_known(model, data, {6}));
}

TEST_CASE("evaluate_unknown with oracle selectors") {
  Separator<float> model(tiny_config());  // never consulted by the stubs
  const TrainData data = two_and_three(3, 1200);

  SUBCASE("a perfect selector lands on the diagonal at the clamp ceiling") {
    const CountSelector perfect = [](Separator<float>&, const TrainItem& item) {
      return SelectionResult{item.count, item.targets};
    };
    const EvalReport rep = evaluate_unknown(model, data, perfect, {2, 3});
    CHECK(rep.total == 6);
    CHECK(rep.count_accuracy == 1.0);
    CHECK(rep.confusion[0][0] == 3);
    CHECK(rep.confusion[1][1] == 3);

    // Perfect estimates clamp at +60, so the improvement per target is
    // exactly 60 minus the mixture baseline.
    for (const auto& u : rep.utterances) {
      const TrainItem* item = nullptr;
      for (int c : {2, 3})
        for (const auto& it : data.items(c))
          if (it.id == u.id) item = &it;
      REQUIRE(item != nullptr);
      double want = 0.0;
      for (const auto& tgt : item->targets)
        want += 60.0 - si_snr<float>(tgt, item->mixture);
      want /= static_cast<double>(item->targets.size());
      CHECK(u.si_snri_db == doctest::Approx(want).epsilon(1e-9));
    }
  }

  SUBCASE("echoing the mixture scores exactly zero improvement") {
    const CountSelector echo = [](Separator<float>&, const TrainItem& item) {
      SelectionResult sel;
      sel.predicted_count = item.count;
      sel.estimates.assign(static_cast<size_t>(item.count), item.mixture);
      return sel;
    };
    const EvalReport rep = evaluate_unknown(model, data, echo, {2, 3});
    CHECK(rep.mean_si_snri_db == doctest::Approx(0.0).epsilon(1e-12));
    for (const auto& u : rep.utterances)
      CHECK(u.si_snri_db == doctest::Approx(0.0).epsilon(1e-12));
  }

  SUBCASE("a constant-count selector fills one confusion column") {
    const CountSelector always2 = [](Separator<float>&, const TrainItem& item) {
      SelectionResult sel;
      sel.predicted_count = 2;
      sel.estimates.assign(2, item.mixture);
      return sel;
    };
    const EvalReport rep = evaluate_unknown(model, data, always2, {2, 3});
    CHECK(rep.confusion[0][0] == 3);
    CHECK(rep.confusion[1][0] == 3);
    CHECK(rep.confusion[1][1] == 0);
    CHECK(rep.count_accuracy == doctest::Approx(0.5).epsilon(1e-12));
    // Row sums count the utterances per true count.
    for (int i = 0; i < 2; ++i) {
      int row = 0;
      for (int j = 0; j < 4; ++j) row += rep.confusion[static_cast<size_t>(i)][static_cast<size_t>(j)];
      CHECK(row == 3);
    }
  }

  SUBCASE("inconsistent selector output is rejected") {
    const CountSelector liar = [](Separator<float>&, const TrainItem& item) {
      SelectionResult sel;
      sel.predicted_count = 3;
      sel.estimates.assign(2, item.mixture);  // claims 3, returns 2
      return sel;
    };
    CHECK_THROWS_AS(evaluate_unknown(model, data, liar, {2}), std::runtime_error);
    const CountSelector wild = [](Separator<float>&, const TrainItem& item) {
      SelectionResult sel;
      sel.predicted_count = 1;
      sel.estimates.assign(1, item.mixture);
      return sel;
    };
    CHECK_THROWS_AS(evaluate_unknown(model, data, wild, {2}), std::runtime_error);
  }
}

TEST_CASE("report writers emit the documented schema") {
  Separator<float> model(tiny_config());
  const TrainData data = two_and_three(2, 1200);
  const CountSelector always2 = [](Separator<float>&, const TrainItem& item) {
    SelectionResult sel;
    sel.predicted_count = 2;
    sel.estimates.assign(2, item.mixture);
    return sel;
  };
  const EvalReport rep = evaluate_unknown(model, data, always2, {2, 3});

  const fs::path dir = testers::scratch_dir("eval_report");
  const std::string jpath = (dir / "report.json").string();
  const std::string upath = (dir / "utterances.csv").string();
  const std::string cpath = (dir / "confusion.csv").string();
  sepkit::write_report_json(rep, jpath);
  sepkit::write_utterance_csv(rep, upath);
  sepkit::write_confusion_csv(rep, cpath);

  std::ifstream jin(jpath);
  REQUIRE(jin.good());
  const nlohmann::json j = nlohmann::json::parse(jin);
  CHECK(j.at("schema") == "eval-report-v1");
  CHECK(j.at("total_utterances") == 4);
  CHECK(j.at("count_accuracy").get<double>() == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(j.at("per_count").at("2").at("utterances") == 2);
  CHECK(j.at("per_count").at("3").at("mean_si_snri_db").is_number());
  CHECK(j.at("confusion").at("true_counts") == nlohmann::json({2, 3, 4, 5}));
  CHECK(j.at("confusion").at("counts")[0][0] == 2);
  CHECK(j.at("confusion").at("counts")[1][0] == 2);
  // Per-cell accuracy is the cell over its row total; empty rows read zero.
  CHECK(j.at("confusion").at("accuracy")[0][0].get<double>() ==
        doctest::Approx(1.0).epsilon(1e-9));
  CHECK(j.at("confusion").at("accuracy")[1][0].get<double>() ==
        doctest::Approx(1.0).epsilon(1e-9));
  CHECK(j.at("confusion").at("accuracy")[1][1].get<double>() == 0.0);
  CHECK(j.at("confusion").at("accuracy")[3][3].get<double>() == 0.0);

  std::ifstream uin(upath);
  std::string line;
  std::getline(uin, line);
  CHECK(line == "id,true_count,predicted_count,si_snri_db");
  int rows = 0;
  while (std::getline(uin, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 4);

  std::ifstream cin_(cpath);
  std::getline(cin_, line);
  CHECK(line == "true_count,pred_2,pred_3,pred_4,pred_5");
  std::getline(cin_, line);
  CHECK(line == "2,2,0,0,0");
  std::getline(cin_, line);
  CHECK(line == "3,2,0,0,0");
}
