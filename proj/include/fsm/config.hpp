#pragma once

// Experiment configuration: a line-oriented "section.key = value" format with
// comments and file includes, typed lookup with documented defaults, rejection
// of unknown keys, and a deterministic echo of the resolved configuration for
// provenance.

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>

#include "fsm/dsp.hpp"

namespace fsm {

// Configuration or validation failure; commands translate it to exit code 2
// (runtime failures exit with 1).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Raw parse result: fully-qualified key -> value, later assignments winning so
// an including file can override its include's defaults.
using KeyValues = std::map<std::string, std::string>;

// Parses "section.key = value" lines. '#' starts a comment, blank lines are
// skipped, and "include <path>" pulls in another file relative to the current
// one (files only; the text parser rejects includes).
KeyValues parse_config_text(const std::string& text, const std::string& origin);
KeyValues parse_config_file(const std::string& path);

// Synthetic dataset parameters for one dataset (in-domain or background).
struct DatasetParams {
    std::string id = "synth";
    std::string dir;       // artifact directory; empty derives <run.out>/<id>
    std::string manifest;  // existing speech manifest to validate instead of generating
    int classes = 10;
    int speakers = 4;
    int items_per_class = 40;
    double image_noise = 0.08;
    double speech_noise = 0.012;
    double base_word_sec = 0.30;
    int class_offset = 0;
};

// Every knob of the pipeline, one field per config key, all defaulted. The
// config file only needs the keys that differ.
struct ExperimentConfig {
    ExperimentConfig() {
        background.id = "background";
        background.class_offset = 10;  // keeps labels clear of the digits
    }

    DatasetParams dataset;

    bool background_enabled = false;
    DatasetParams background;

    MfccConfig mfcc;

    std::string model_modality = "speech";  // speech | vision
    std::string model_objective = "ae";     // ae | cae | ae_cae | classifier | siamese
    int embed_dim = 130;
    int conv1 = 32, conv2 = 64, conv3 = 128;
    int gru_units = 400;
    int gru_layers = 3;
    double margin = 0.2;
    int model_classes = 0;  // classifier/siamese class count; 0 derives from labels

    std::string pairs_source = "unsupervised";  // unsupervised | encoder | oracle
    int pairs_k = 1;
    std::string pairs_file;     // mined pairs consumed by training
    std::string pairs_encoder;  // checkpoint that embeds items for encoder mining

    int train_epochs = 50;
    int train_pretrain_epochs = 0;  // ae_cae reconstruction phase
    int train_batch = 0;            // 0 picks the modality default
    double train_lr = 0.001;
    int train_patience = 10;
    int train_seeds = 5;  // checkpoints per run, seeds run.seed + 0..n-1
    bool train_verbose = false;

    std::string eval_task = "multimodal";  // unimodal-speech | unimodal-vision | multimodal
    int eval_l = 11;
    int eval_k = 1;
    int eval_episodes = 400;
    int eval_queries = 10;
    int eval_seeds = 5;
    bool eval_class_mean = false;
    std::string eval_speech_models;  // comma-separated checkpoint paths, one per seed
    std::string eval_vision_models;
    std::string eval_label;  // table row label; empty derives from checkpoint metadata
    bool eval_audit = false;

    uint64_t seed = 0;
    int threads = 0;  // 0 keeps the hardware default
    std::string out = "out";
};

// Applies key/value pairs over the defaults. Unknown keys, malformed numbers,
// and out-of-range values raise ConfigError naming the key.
ExperimentConfig config_from(const KeyValues& kv);

// The full configuration as config-file text, every key present with its
// effective value, in a fixed order. Re-parsing it reproduces the config.
std::string resolved_config(const ExperimentConfig& cfg);

}  // namespace fsm
