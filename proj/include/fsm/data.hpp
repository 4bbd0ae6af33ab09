#ifndef FSM_DATA_HPP
#define FSM_DATA_HPP

// Dataset ingestion (IDX images, WAV manifests), split handling, and the
// deterministic synthetic paired-digits generator used by tests and the
// desk-scale experiment pipeline.

#include <cstdint>
#include <string>
#include <vector>

#include "fsm/dsp.hpp"
#include "fsm/rng.hpp"

namespace fsm {

struct ImageItem {
    std::vector<float> pixels;  // 28x28 row-major, values in [0,1]
    std::string label;          // digit/class string, may be empty
    std::string split;          // train | validation | test (empty for raw loads)
};

struct SpeechItem {
    Utterance utt;      // carries speaker_id and label
    std::string split;
};

inline constexpr int kImageSide = 28;
inline constexpr int kImagePixels = kImageSide * kImageSide;

// ---------------------------------------------------------------------------
// IDX

// Load big-endian IDX images (magic 0x00000803), optionally paired with an
// IDX label file (magic 0x00000801). invert_downsample resamples non-28x28
// inputs bilinearly to 28x28 and inverts intensities (dark-on-light
// handwriting corpora). Pixels are scaled by 1/255.
std::vector<ImageItem> load_idx(const std::string& images_path,
                                const std::string& labels_path = "",
                                bool invert_downsample = false);

// write 28x28 float images (clamped, x255 rounded) and optional labels
void save_idx(const std::string& images_path, const std::vector<ImageItem>& items);
void save_idx_labels(const std::string& labels_path, const std::vector<uint8_t>& labels);

// ---------------------------------------------------------------------------
// speech manifests

// TSV with header "path<TAB>speaker<TAB>label<TAB>split"; relative paths are
// resolved against the manifest's directory. All row errors are collected and
// reported together with their row numbers.
std::vector<SpeechItem> load_speech_manifest(const std::string& manifest_path,
                                             const MfccConfig& cfg);

void save_speech_manifest(const std::string& manifest_path,
                          const std::vector<std::string>& paths,
                          const std::vector<std::string>& speakers,
                          const std::vector<std::string>& labels,
                          const std::vector<std::string>& splits);

// fatal when a background dataset shares any class label with the in-domain
// evaluation classes
void check_background_disjoint(const std::vector<std::string>& in_domain_labels,
                               const std::vector<std::string>& background_labels);

// ---------------------------------------------------------------------------
// synthetic paired-digits generator

struct SyntheticConfig {
    int n_classes = 10;
    int n_speakers = 4;
    int items_per_class = 40;  // per class, spread round-robin over speakers
    double image_noise = 0.08;
    double speech_noise = 0.012;
    int class_id_offset = 0;   // >= 10 gives background classes (disjoint labels)
    uint64_t seed = 0;
    int sample_rate = 16000;
    double base_word_sec = 0.30;
    MfccConfig mfcc;
};

struct SyntheticDataset {
    std::string id;
    std::vector<ImageItem> images;   // one per item, aligned with speech
    std::vector<SpeechItem> speech;  // MFCC'd
};

// spoken-word label for an absolute class id; id 0 yields "zero" or "oh"
// (alias picked by the generator), ids 1..9 the English digit words, and
// ids >= 10 synthetic background words ("w10", ...)
std::string class_word(int class_id, bool oh_alias);

// image class label for an absolute class id ("0".."9", "w10", ...)
std::string class_image_label(int class_id);

// deterministic prototype glyph for a class (28x28 in [0,1], no noise)
std::vector<float> class_glyph(int class_id);

// deterministic synthetic word waveform; rng drives per-item jitter/noise.
// samples are quantized to the int16 grid, so disk round-trips are exact.
Waveform synthesize_word(int class_id, int speaker, const SyntheticConfig& cfg, Rng& rng);

SyntheticDataset generate_synthetic(const SyntheticConfig& cfg);

// waveform view of the same items, in the same order as the dataset's speech
// vector (for materializing to WAV files)
std::vector<Waveform> synthetic_waveforms(const SyntheticConfig& cfg);

}  // namespace fsm

#endif
