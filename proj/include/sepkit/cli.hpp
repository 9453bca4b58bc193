// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "sepkit/evaluator.hpp"
#include "sepkit/mixer.hpp"
#include "sepkit/model.hpp"
#include "sepkit/trainer.hpp"

namespace sepkit {

/// Merged option surface for all subcommands. One instance backs the parser;
/// each command reads only its slice. Defaults are the desk profile.
struct RunConfig {
  DatasetSpec dataset;
  SeparatorConfig model;
  TrainConfig train;

  // synth
  bool noisy = false;
  bool full_profile = false;
  bool render = true;
  std::string out_dir = "data";

  // train
  std::string manifest;
  std::string data_root;  // defaults to the manifest's directory
  std::string run_name = "run";
  std::string runs_dir = "runs";
  bool resume = false;

  // eval
  std::string checkpoint;
  std::string mode = "known";
  std::string selector = "gate";
  double silent_threshold_db = kSilentThresholdDb;
  std::string split = "test";
  std::vector<int> eval_counts = {2, 3, 4, 5};
  std::string report_dir = ".";

  // separate
  std::string input_wav;

  int workers = 1;
};

/// Exit codes shared by every command: 0 success, 2 usage or configuration
/// error, 1 runtime failure.
int cmd_synth(RunConfig cfg);
int cmd_train(RunConfig cfg);
int cmd_eval(RunConfig cfg);
int cmd_separate(RunConfig cfg);

/// Parses argv (subcommand + flags + optional config file) and dispatches.
int run_cli(int argc, const char* const* argv);

}  // namespace sepkit
