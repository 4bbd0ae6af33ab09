#pragma once

// Pair discovery for reconstruction-target training: match every item with its
// nearest neighbour(s) so a correspondence autoencoder can use the neighbour as
// its output target. Four regimes: unsupervised distances over raw inputs
// (cosine for images, DTW for speech), distances over encoder embeddings, and
// label-based pairing as a control. Speech pairs never join two utterances of
// the same speaker.

#include <cstdint>
#include <string>
#include <vector>

#include "fsm/data.hpp"

namespace fsm {

struct EncoderModel;

enum class PairSource { cosine_nn, dtw_nn, classifier_nn, ground_truth, oracle };

const char* pair_source_name(PairSource s);
PairSource pair_source_from_name(const std::string& name);

struct ItemPair {
    int a = 0;  // anchor item index
    int b = 0;  // matched item index, used as the anchor's reconstruction target
};

// A list of directed item pairs plus enough bookkeeping to audit where they
// came from. Indices refer to positions in the item vector the miner was given.
struct PairSet {
    std::string dataset_id;
    PairSource source = PairSource::cosine_nn;
    std::vector<ItemPair> pairs;
    int skipped = 0;  // items that had no eligible partner (counted, not fatal)
};

// Nearest neighbours under cosine distance over raw pixels. k partners per
// item, ties broken toward the lowest index.
PairSet mine_unsupervised(const std::vector<ImageItem>& items, const std::string& dataset_id,
                          int k = 1);

// Nearest neighbours under DTW alignment cost over the MFCC frames. Candidates
// from the anchor's own speaker are excluded; items whose candidates are all
// same-speaker are skipped and counted.
PairSet mine_unsupervised(const std::vector<SpeechItem>& items, const std::string& dataset_id,
                          int k = 1);

// Nearest neighbours under cosine distance over encoder embeddings, with the
// same speaker rule for speech. Recorded with source classifier_nn since the
// interesting encoders here are trained classifiers.
PairSet mine_with_encoder(const std::vector<ImageItem>& items, const EncoderModel& model,
                          const std::string& dataset_id, int k = 1);
PairSet mine_with_encoder(const std::vector<SpeechItem>& items, const EncoderModel& model,
                          const std::string& dataset_id, int k = 1);

// Label-based control: each item is paired with k uniform random same-label
// items (different speaker for speech). Singleton classes are skipped.
PairSet make_oracle_pairs(const std::vector<ImageItem>& items, const std::string& dataset_id,
                          uint64_t seed, int k = 1);
PairSet make_oracle_pairs(const std::vector<SpeechItem>& items, const std::string& dataset_id,
                          uint64_t seed, int k = 1);

// Test-time diagnostic: the fraction of pairs whose members share a label.
// Vacuously 1 for an empty pair list.
double pair_precision(const PairSet& set, const std::vector<std::string>& labels);

// Text persistence: a header line "dataset_id<TAB>source", then one
// "index_a<TAB>index_b" line per pair.
void save_pairs(const std::string& path, const PairSet& set);
PairSet load_pairs(const std::string& path);

}  // namespace fsm
