#ifndef FSM_DSP_HPP
#define FSM_DSP_HPP

// Waveform -> MFCC front end, plus 16-bit PCM WAV reading/writing.

#include <cstdint>
#include <string>
#include <vector>

namespace fsm {

struct Waveform {
    std::vector<float> samples;  // PCM in [-1, 1]
    int sample_rate = 16000;
    std::string speaker_id;
    std::string label;
};

// T x D feature matrix, row-major
struct Utterance {
    std::vector<float> frames;
    int t = 0;
    int d = 0;
    std::string speaker_id;
    std::string label;

    float at(int frame, int coef) const { return frames[static_cast<size_t>(frame) * d + coef]; }
    float& at(int frame, int coef) { return frames[static_cast<size_t>(frame) * d + coef]; }
};

struct MfccConfig {
    double frame_ms = 25.0;
    double hop_ms = 10.0;
    int n_filters = 24;
    int n_cepstra = 13;   // includes C0
    double preemphasis = 0.97;
    double log_floor = 1e-10;
    bool cmvn = true;     // per-utterance mean/variance normalization
};

// mel scale helpers (HTK convention)
double hz_to_mel(double hz);
double mel_to_hz(double mel);

// center frequencies (Hz) of the triangular filters for a given bank layout
std::vector<double> mel_filter_centers(int n_filters, int sample_rate);

// frame count for a waveform of n samples: floor((n - frame)/hop) + 1
int frame_count(int64_t n_samples, int frame_len, int hop);

// pre-emphasis -> Hamming -> power FFT -> mel filterbank -> log (floored).
// Returns T x n_filters, the pre-DCT intermediate.
Utterance log_mel_spectrogram(const Waveform& wave, const MfccConfig& cfg);

// full pipeline; output T x n_cepstra, normalized per coefficient when
// cfg.cmvn is set (zero-variance coefficients are centered only)
Utterance mfcc(const Waveform& wave, const MfccConfig& cfg);

// append delta and delta-delta coefficients (regression over +-2 frames,
// boundary frames replicated); 13 -> 39 columns
Utterance add_deltas(const Utterance& utt);

// 16-bit PCM mono RIFF WAV
Waveform read_wav(const std::string& path);
void write_wav(const std::string& path, const Waveform& wave);

}  // namespace fsm

#endif
