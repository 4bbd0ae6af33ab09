#pragma once

// Encoder models for both modalities and the objectives they train under:
// plain autoencoding, correspondence autoencoding (reconstruct a paired item
// instead of the input), softmax classification, and triplet-based metric
// learning. One parameter layout per (modality, objective) combination; the
// embedding is always the activation that feeds the decoder or output head.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fsm/autodiff.hpp"
#include "fsm/checkpoint.hpp"
#include "fsm/data.hpp"
#include "fsm/pairs.hpp"

namespace fsm {

enum class Modality { vision, speech };
enum class Objective { ae, cae, ae_cae, classifier, siamese };

const char* modality_name(Modality m);
const char* objective_name(Objective o);
Modality modality_from_name(const std::string& name);
Objective objective_from_name(const std::string& name);

struct ModelConfig {
    Modality modality = Modality::vision;
    Objective objective = Objective::ae;
    int embed_dim = 130;

    // Vision tower: three stride-1 conv + 2x2 max-pool stages, then a dense
    // layer down to the embedding. The decoder mirrors it with transposed
    // convolutions back up to 28x28.
    int conv1 = 32, conv2 = 64, conv3 = 128;

    // Speech tower: stacked unidirectional GRU layers; the embedding is a
    // dense map of the final hidden state. The decoder is the same stack run
    // for the input's frame count with the embedding as every step's input.
    int gru_units = 400;
    int gru_layers = 3;
    int feat_dim = 13;

    int n_classes = 0;     // classifier head width; required iff objective == classifier
    float margin = 0.2f;   // triplet hinge margin
};

// Where a set of weights came from: which dataset(s) trained it, under which
// objectives, and with which pair source if any. Phases accumulate across
// pretraining, switching, and fine-tuning.
struct Provenance {
    std::string dataset_id;
    std::string pair_source;            // empty unless pairs fed the objective
    uint64_t seed = 0;
    std::vector<std::string> phases;    // e.g. "ae:bg", "cae:indomain"
};

struct EncoderModel {
    ModelConfig cfg;
    Provenance prov;
    NamedParams params;  // fixed order per (modality, objective); see init_model
};

// Fresh model with Glorot-uniform weights and zero biases, deterministic in
// the seed.
EncoderModel init_model(const ModelConfig& cfg, uint64_t seed);

// --- Losses (graph-building; templated so tests can run them in double) ----

// Sum of squared differences against a fixed target; rank-2 inputs are treated
// as frame sequences and averaged over rows so utterance length does not scale
// the objective.
template <class Real>
ad::Tensor<Real> ae_loss(const ad::Tensor<Real>& recon, const std::vector<Real>& target) {
    ad::Tensor<Real> t = ad::Tensor<Real>::from(recon.shape(), target, false);
    ad::Tensor<Real> sq = ad::squared_error(recon, t);
    if (recon.shape().size() == 2) return ad::scale(sq, Real(1) / Real(recon.shape()[0]));
    return sq;
}

// Correspondence reconstruction: identical form, but the target is the paired
// item rather than the input.
template <class Real>
ad::Tensor<Real> cae_loss(const ad::Tensor<Real>& recon, const std::vector<Real>& pair_target) {
    return ae_loss(recon, pair_target);
}

// Negative log softmax probability of the true class. logits is [1, C] or [C].
template <class Real>
ad::Tensor<Real> classifier_loss(const ad::Tensor<Real>& logits, int label) {
    ad::Tensor<Real> rows = logits;
    if (logits.shape().size() == 1) rows = ad::reshape(logits, {1, logits.shape()[0]});
    return ad::cross_entropy(rows, std::vector<int>{label});
}

// Hinge over squared euclidean distances: max{0, margin + d(a,p) - d(a,n)}.
template <class Real>
ad::Tensor<Real> triplet_loss(const ad::Tensor<Real>& anchor, const ad::Tensor<Real>& positive,
                              const ad::Tensor<Real>& negative, Real margin) {
    auto dp = ad::sum_all(ad::mul(ad::sub(anchor, positive), ad::sub(anchor, positive)));
    auto dn = ad::sum_all(ad::mul(ad::sub(anchor, negative), ad::sub(anchor, negative)));
    auto m = ad::Tensor<Real>::scalar(margin);
    return ad::relu(ad::add(m, ad::sub(dp, dn)));
}

// --- Semi-hard triplet selection ------------------------------------------

struct Triplet {
    int anchor = 0;
    int positive = 0;
    int negative = 0;
};

// For every ordered same-label pair (a, p) in the batch, pick the negative
// with the smallest d(a,n) still greater than d(a,p); if no negative is that
// far, fall back to the farthest one. Distances are squared euclidean; ties go
// to the lowest batch index. Batches without a same-label pair yield nothing.
std::vector<Triplet> mine_semi_hard(const std::vector<std::vector<float>>& embeddings,
                                    const std::vector<int>& labels, float margin);

// --- Forward passes ---------------------------------------------------------

// Embedding of a single item. Always a vector of cfg.embed_dim floats.
std::vector<float> embed(const EncoderModel& model, const ImageItem& item);
std::vector<float> embed(const EncoderModel& model, const Utterance& utt);

// Batch convenience wrappers (parallel across items, same values as the
// single-item calls).
std::vector<std::vector<float>> embed_all(const EncoderModel& model,
                                          const std::vector<ImageItem>& items);
std::vector<std::vector<float>> embed_all(const EncoderModel& model,
                                          const std::vector<SpeechItem>& items);

// Reconstruction of a single item through encoder and decoder (autoencoding
// objectives only). Vision: 784 pixels in [0,1]. Speech: T x feat_dim frames.
std::vector<float> reconstruct(const EncoderModel& model, const ImageItem& item);
std::vector<float> reconstruct(const EncoderModel& model, const Utterance& utt);

// Linear interpolation of an utterance's frames along time to a new frame
// count, used to align a correspondence target with its input's length.
std::vector<float> resample_frames(const Utterance& utt, int new_t);

// --- Training ---------------------------------------------------------------

struct TrainSchedule {
    int epochs = 50;
    int batch_size = 0;  // 0 = modality default: 64 for vision, 32 for speech
    float lr = 1e-3f;
    int patience = 10;   // epochs without validation improvement before stopping
    uint64_t seed = 0;
    bool verbose = false;
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_metric = 0.0;  // loss (lower better) or accuracy (higher better)
    bool improved = false;
};

struct TrainLog {
    std::vector<EpochRecord> epochs;
    int best_epoch = -1;       // -1 when no epoch ran
    double best_metric = 0.0;
};

// Called after each epoch for supervised objectives when provided; returns an
// accuracy-like score (higher is better) that replaces validation loss as the
// early-stopping signal.
using ValScore = std::function<double(const EncoderModel&)>;

// Train in place on the items whose split is "train", early-stopping against
// the "validation" split (falling back to train loss when there is none). The
// best-scoring weights are restored at the end. Pairs are required for the cae
// objective and index into `items`; each pair is used in both directions.
TrainLog train(EncoderModel& model, const std::vector<ImageItem>& items, const PairSet* pairs,
               const TrainSchedule& sched, const ValScore& score = {});
TrainLog train(EncoderModel& model, const std::vector<SpeechItem>& items, const PairSet* pairs,
               const TrainSchedule& sched, const ValScore& score = {});

// Autoencoder pretraining followed by correspondence training from the best
// pretrained weights (the ae_cae objective). Zero phase-2 epochs leaves the
// plain autoencoder solution in place.
TrainLog pretrain_then_switch(EncoderModel& model, const std::vector<ImageItem>& items,
                              const PairSet& pairs, const TrainSchedule& phase1,
                              const TrainSchedule& phase2);
TrainLog pretrain_then_switch(EncoderModel& model, const std::vector<SpeechItem>& items,
                              const PairSet& pairs, const TrainSchedule& phase1,
                              const TrainSchedule& phase2);

// Continue training an already-trained model on a new dataset (same objective,
// new pairs). Zero epochs returns the model unchanged; the provenance chain
// records both datasets either way.
TrainLog fine_tune(EncoderModel& model, const std::vector<ImageItem>& items, const PairSet* pairs,
                   const TrainSchedule& sched, const std::string& dataset_id);
TrainLog fine_tune(EncoderModel& model, const std::vector<SpeechItem>& items, const PairSet* pairs,
                   const TrainSchedule& sched, const std::string& dataset_id);

// --- Persistence -------------------------------------------------------------

// Weights go to `path`, config and provenance to `path + ".meta"`. A loaded
// model embeds bit-identically to the saved one.
void save_model(const std::string& path, const EncoderModel& model);
EncoderModel load_model(const std::string& path);

}  // namespace fsm
