#pragma once

// Few-shot evaluation protocol: sampled episodes (a support set of spoken
// word / digit image pairs, an image matching set, held-out queries),
// nearest-neighbour classification within an episode, speech-to-image matching
// as two unimodal comparisons, and multi-seed accuracy aggregation.

#include <cstdint>
#include <string>
#include <vector>

#include "fsm/data.hpp"

namespace fsm {

struct EncoderModel;

// Spoken class label -> written digit label. "zero" and "oh" both name the
// digit 0, "one".."nine" map to "1".."9", and any other word labels its image
// with the same string (synthetic background classes work this way).
std::string image_label_for_word(const std::string& word);

// One support entry: a spoken word, an image of the written form, and the
// spoken class label.
struct SupportPair {
    Utterance speech;
    ImageItem image;
    std::string label;
};

using SupportSet = std::vector<SupportPair>;

// A sampled episode. Queries and matching-set images never reuse a support
// item. The *_idx vectors give each item's position in the source pools so
// audits and disjointness checks don't have to compare item contents.
struct Episode {
    SupportSet support;                   // k pairs per spoken class
    std::vector<ImageItem> matching_set;  // one unused image per digit class
    std::vector<Utterance> queries;       // spoken queries
    std::vector<ImageItem> query_images;  // image queries (vision task only)
    uint64_t seed = 0;
    std::vector<int> support_speech_idx, support_image_idx;
    std::vector<int> matching_idx, query_idx, query_image_idx;
};

// Draw one episode from labelled pools: k_shot support pairs for each spoken
// class, a matching set avoiding every support image, and n_queries spoken and
// image queries avoiding the support (query classes drawn uniformly).
// l_classes pins the number of spoken classes the pool must contain. Items are
// reported missing by class name.
Episode sample_episode(const std::vector<SpeechItem>& speech,
                       const std::vector<ImageItem>& images, int l_classes, int k_shot,
                       uint64_t seed, int n_queries = 10);

// Distance plug for one modality: squared Euclidean over encoder embeddings
// when a model is given, otherwise the raw-feature distance (frame alignment
// cost for speech, cosine over pixels for images). class_mean switches the
// k>1 rule from nearest-single-item to smallest per-class mean distance.
struct ModalityEval {
    const EncoderModel* model = nullptr;  // borrowed, not owned
    bool class_mean = false;
};

// Class label of the support item nearest to the query, ties toward the
// lowest support index.
std::string classify_unimodal(const Utterance& query, const SupportSet& support,
                              const ModalityEval& ev);
std::string classify_unimodal(const ImageItem& query, const SupportSet& support,
                              const ModalityEval& ev);

// Two-step match: nearest support speech to the spoken query, then that
// pair's image against every matching-set image. Returns the matching-set
// index of the winner.
int match_multimodal(const Utterance& query, const Episode& episode,
                     const ModalityEval& speech_ev, const ModalityEval& vision_ev);

enum class EvalTask { unimodal_speech, unimodal_vision, multimodal };

const char* eval_task_name(EvalTask t);
EvalTask eval_task_from_name(const std::string& name);

struct BenchmarkConfig {
    EvalTask task = EvalTask::multimodal;
    int l_classes = 11;
    int k_shot = 1;
    int episodes = 400;
    int queries = 10;  // per episode
    int seeds = 5;     // evaluation runs to aggregate
    uint64_t seed = 0;  // master seed for episode sampling
    bool class_mean = false;
};

struct EpisodeOutcome {
    int seed_index = 0;
    int episode = 0;
    int correct = 0;
    int total = 0;
};

struct EvalReport {
    EvalTask task = EvalTask::multimodal;
    int k_shot = 1;
    int episodes = 0;
    int queries = 0;
    std::vector<double> per_seed;         // accuracy per evaluation seed
    double mean = 0.0;
    double ci95 = 0.0;                    // 1.96 * stddev / sqrt(#seeds)
    std::vector<EpisodeOutcome> outcomes; // every episode, for audit
};

// Evaluation models for one seed; null members fall back to raw features
// (DTW + pixels when both are null).
struct SeedModels {
    const EncoderModel* speech = nullptr;
    const EncoderModel* vision = nullptr;
};

// Runs cfg.episodes episodes for each of cfg.seeds evaluation seeds and
// aggregates accuracies. per_seed supplies each seed's models (at least
// cfg.seeds entries). Scoring: unimodal speech matches the spoken label
// exactly; unimodal vision and multimodal score at the digit level, so "zero"
// and "oh" both count for digit-0 predictions.
EvalReport run_benchmark(const std::vector<SeedModels>& per_seed,
                         const std::vector<SpeechItem>& speech,
                         const std::vector<ImageItem>& images, const BenchmarkConfig& cfg);

// Human-readable block for one report, and header/row helpers for composing
// several reports into one results table.
std::string format_report(const EvalReport& r);
std::string report_header();
std::string report_row(const std::string& label, const EvalReport& r);

// Machine-readable JSON lines: one record per seed plus a summary record.
// audit_records adds one record per episode.
std::string report_records(const EvalReport& r);
std::string audit_records(const EvalReport& r);

}  // namespace fsm
