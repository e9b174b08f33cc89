#pragma once

#include <cstdint>
#include <string>

#include "attnprior/config.hpp"

namespace attnprior::cli {

struct RunOptions {
  std::string command;
  std::uint64_t seed = 2024;
  std::string out_dir = "out";
  std::string config_path;
  std::string corpus_path;
  std::string input_path;       // density: embedding CSV
  std::string checkpoint_path;  // robustness: evaluate an existing model
  std::string preset = "desk";  // desk | paper
  bool svg = true;
  bool corrupt_cache = false;   // verify negative-control hook
  Config cfg;                   // file values with flag overrides applied
};

int cmd_theory_figures(const RunOptions& opts);
int cmd_density(const RunOptions& opts);
int cmd_verify(const RunOptions& opts);
int cmd_train(const RunOptions& opts);
int cmd_robustness(const RunOptions& opts);
int cmd_lambda_sweep(const RunOptions& opts);

int run_command(RunOptions& opts);

}  // namespace attnprior::cli
