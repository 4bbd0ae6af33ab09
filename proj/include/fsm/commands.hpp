#pragma once

// Pipeline commands behind the CLI: dataset preparation, pair mining,
// training, and evaluation. Each command throws ConfigError for configuration
// or validation problems and other exceptions for runtime failures;
// exit_code_of translates that convention into process exit codes
// (0 success, 1 runtime failure, 2 config/validation error).

#include <functional>
#include <string>

#include "fsm/config.hpp"

namespace fsm {

// Writes the synthetic dataset(s) named by the config: IDX images with a
// label/split sidecar, per-item WAV files with a TSV manifest, and the
// resolved config. Split values and background/in-domain label disjointness
// are validated before anything is written.
void run_prepare(const ExperimentConfig& cfg);

// Mines a PairSet over the non-test items of the configured dataset and
// modality and writes it as text (pairs.file, or a derived path under
// run.out).
void run_mine_pairs(const ExperimentConfig& cfg);

// Trains train.seeds models (seeds run.seed + 0..n-1) and writes one
// checkpoint, metadata sidecar, and training-curve TSV per seed.
void run_train(const ExperimentConfig& cfg);

// Evaluates checkpoints (or the raw DTW + pixels baseline) over the test
// split and writes the results table, JSON records, and optional per-episode
// audit records. `baseline` is empty or "dtw+pixels".
void run_eval(const ExperimentConfig& cfg, const std::string& baseline = "");

// Runs fn, reporting exceptions on stderr: returns 0 on success, 2 for
// ConfigError, 1 for any other exception.
int exit_code_of(const std::function<void()>& fn);

// Artifact locations, shared between the commands and their tests.
std::string dataset_dir(const ExperimentConfig& cfg, const DatasetParams& d);
std::string checkpoint_path(const ExperimentConfig& cfg, uint64_t model_seed);
std::string curve_path(const ExperimentConfig& cfg, uint64_t model_seed);
std::string pairs_path(const ExperimentConfig& cfg);
std::string report_path(const ExperimentConfig& cfg, const std::string& ext);

}  // namespace fsm
