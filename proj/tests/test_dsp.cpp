#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <complex>
#include <cstdio>
#include <fstream>
#include <vector>

#include "fsm/dsp.hpp"
#include "fsm/rng.hpp"

using fsm::MfccConfig;
using fsm::Utterance;
using fsm::Waveform;

namespace {

constexpr double kPi = 3.14159265358979323846;

Waveform sine_wave(double freq, double seconds, int rate) {
    Waveform w;
    w.sample_rate = rate;
    int n = static_cast<int>(seconds * rate);
    w.samples.resize(n);
    for (int i = 0; i < n; ++i)
        w.samples[i] = static_cast<float>(0.5 * std::sin(2.0 * kPi * freq * i / rate));
    return w;
}

Waveform noise_wave(double seconds, int rate, uint64_t seed) {
    Waveform w;
    w.sample_rate = rate;
    fsm::Rng rng(seed);
    int n = static_cast<int>(seconds * rate);
    w.samples.resize(n);
    for (int i = 0; i < n; ++i) w.samples[i] = static_cast<float>(rng.uniform(-0.8, 0.8));
    return w;
}

// Independent spectral oracle: plain O(N^2) DFT over the analysis frame plus
// a from-scratch triangular mel bank. Shares no code with the library path.
struct DftOracle {
    int rate, frame_len, n_filters, nfft;
    std::vector<double> centers_hz;

    DftOracle(int rate_, int frame_len_, int n_filters_)
        : rate(rate_), frame_len(frame_len_), n_filters(n_filters_) {
        nfft = 1;
        while (nfft < frame_len) nfft *= 2;
        for (int f = 0; f <= n_filters + 1; ++f) edges_mel.push_back(mel(0.0) + (mel(rate / 2.0) - mel(0.0)) * f / (n_filters + 1));
        for (int f = 1; f <= n_filters; ++f) centers_hz.push_back(unmel(edges_mel[f]));
    }

    static double mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
    static double unmel(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

    int nearest_filter(double hz) const {
        int best = 0;
        for (int f = 1; f < n_filters; ++f)
            if (std::abs(centers_hz[f] - hz) < std::abs(centers_hz[best] - hz)) best = f;
        return best;
    }

    // log-mel energies of one frame starting at sample `start`
    std::vector<double> frame_logmel(const Waveform& w, int start, double preemph) const {
        std::vector<double> x(frame_len);
        for (int i = 0; i < frame_len; ++i) {
            int gi = start + i;
            double cur = w.samples[gi];
            double prev = gi > 0 ? w.samples[gi - 1] : 0.0;
            double e = gi == 0 ? cur : cur - preemph * prev;
            double ham = 0.54 - 0.46 * std::cos(2.0 * kPi * i / (frame_len - 1));
            x[i] = e * ham;
        }
        int bins = nfft / 2 + 1;
        std::vector<double> power(bins, 0.0);
        for (int k = 0; k < bins; ++k) {
            std::complex<double> acc(0.0, 0.0);
            for (int i = 0; i < frame_len; ++i)
                acc += x[i] * std::exp(std::complex<double>(0.0, -2.0 * kPi * k * i / nfft));
            power[k] = std::norm(acc);
        }
        std::vector<double> out(n_filters, 0.0);
        for (int f = 0; f < n_filters; ++f) {
            double lo = unmel(edges_mel[f]), mid = unmel(edges_mel[f + 1]), hi = unmel(edges_mel[f + 2]);
            for (int b = 0; b < bins; ++b) {
                double hz = static_cast<double>(b) * rate / nfft;
                double wgt = 0.0;
                if (hz > lo && hz < mid)
                    wgt = (hz - lo) / (mid - lo);
                else if (hz >= mid && hz < hi)
                    wgt = (hi - hz) / (hi - mid);
                out[f] += wgt * power[b];
            }
            out[f] = std::log(std::max(out[f], 1e-10));
        }
        return out;
    }

private:
    std::vector<double> edges_mel;
};

int argmax(const std::vector<double>& v) {
    int best = 0;
    for (size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = static_cast<int>(i);
    return best;
}

}  // namespace

TEST_CASE("one second at 16 kHz yields 98 frames") {
    Waveform w = noise_wave(1.0, 16000, 1);
    REQUIRE(static_cast<int>(w.samples.size()) == 16000);
    auto utt = fsm::mfcc(w, MfccConfig{});
    CHECK(utt.t == 98);
    CHECK(utt.d == 13);
}

TEST_CASE("waveform shorter than a frame is rejected with the required length") {
    Waveform w;
    w.sample_rate = 16000;
    w.samples.assign(399, 0.1f);
    CHECK_THROWS_WITH_AS(fsm::mfcc(w, MfccConfig{}), doctest::Contains("400"),
                         std::invalid_argument);
}

TEST_CASE("all-zero waveform degenerates gracefully") {
    Waveform w;
    w.sample_rate = 16000;
    w.samples.assign(16000, 0.0f);
    auto mel = fsm::log_mel_spectrogram(w, MfccConfig{});
    // every frame identical, pinned at the log floor
    for (int f = 0; f < mel.t; ++f)
        for (int c = 0; c < mel.d; ++c) CHECK(mel.at(f, c) == mel.at(0, c));
    CHECK(mel.at(0, 0) == doctest::Approx(std::log(1e-10)));
    auto utt = fsm::mfcc(w, MfccConfig{});
    for (float v : utt.frames) {
        CHECK(std::isfinite(v));
        CHECK(v == 0.0f);  // zero variance -> centered only
    }
}

TEST_CASE("1 kHz sine peaks in the filter centered nearest 1 kHz") {
    Waveform w = sine_wave(1000.0, 0.5, 16000);
    MfccConfig cfg;
    auto mel = fsm::log_mel_spectrogram(w, cfg);

    DftOracle oracle(16000, 400, cfg.n_filters);
    int expect = oracle.nearest_filter(1000.0);
    for (int f : {3, mel.t / 2, mel.t - 4}) {
        // library argmax
        int lib_best = 0;
        for (int c = 1; c < mel.d; ++c)
            if (mel.at(f, c) > mel.at(f, lib_best)) lib_best = c;
        CHECK(lib_best == expect);
        // oracle recomputation of the same frame agrees bin by bin
        auto ref = oracle.frame_logmel(w, f * 160, cfg.preemphasis);
        CHECK(argmax(ref) == expect);
        for (int c = 0; c < mel.d; ++c)
            CHECK(mel.at(f, c) == doctest::Approx(ref[c]).epsilon(1e-6));
    }
}

TEST_CASE("normalization leaves each coefficient at zero mean, unit variance") {
    Waveform w = noise_wave(1.2, 16000, 2);
    auto utt = fsm::mfcc(w, MfccConfig{});
    for (int c = 0; c < utt.d; ++c) {
        double mean = 0, var = 0;
        for (int f = 0; f < utt.t; ++f) mean += utt.at(f, c);
        mean /= utt.t;
        for (int f = 0; f < utt.t; ++f) var += (utt.at(f, c) - mean) * (utt.at(f, c) - mean);
        var /= utt.t;
        CHECK(std::abs(mean) < 1e-6);
        CHECK(std::abs(var - 1.0) < 1e-6);
    }
}

TEST_CASE("features ignore speaker and label metadata") {
    Waveform a = noise_wave(0.5, 16000, 3);
    Waveform b = a;
    a.speaker_id = "s1";
    a.label = "one";
    b.speaker_id = "s9";
    b.label = "nine";
    auto ua = fsm::mfcc(a, MfccConfig{});
    auto ub = fsm::mfcc(b, MfccConfig{});
    CHECK(ua.frames == ub.frames);
    CHECK(ua.speaker_id == "s1");
    CHECK(ub.label == "nine");
}

TEST_CASE("shifting by one hop shifts frames by one index") {
    Waveform w = noise_wave(1.0, 16000, 4);
    Waveform shifted;
    shifted.sample_rate = w.sample_rate;
    shifted.samples.assign(w.samples.begin() + 160, w.samples.end());
    MfccConfig cfg;
    cfg.cmvn = false;  // per-utterance stats differ between the two croppings
    auto a = fsm::mfcc(w, cfg);
    auto b = fsm::mfcc(shifted, cfg);
    REQUIRE(b.t == a.t - 1);
    // frame 0 of either signal sees a pre-emphasis boundary; compare interiors
    for (int f = 1; f < b.t; ++f)
        for (int c = 0; c < a.d; ++c)
            CHECK(a.at(f + 1, c) == doctest::Approx(b.at(f, c)).epsilon(1e-5));
}

TEST_CASE("deltas of a constant sequence vanish") {
    Utterance utt;
    utt.t = 6;
    utt.d = 13;
    utt.frames.assign(6 * 13, 0.7f);
    auto out = fsm::add_deltas(utt);
    CHECK(out.d == 39);
    CHECK(out.t == 6);
    for (int f = 0; f < out.t; ++f)
        for (int c = 13; c < 39; ++c) CHECK(out.at(f, c) == 0.0f);
}

TEST_CASE("delta of a linear ramp equals its slope on interior frames") {
    Utterance utt;
    utt.t = 9;
    utt.d = 13;
    utt.frames.assign(9 * 13, 0.0f);
    const float slope = 0.25f;
    for (int f = 0; f < 9; ++f) utt.at(f, 0) = slope * f;
    auto out = fsm::add_deltas(utt);
    // regression window is +-2, so frames 2..T-3 are pure interior
    for (int f = 2; f <= 6; ++f) CHECK(out.at(f, 13) == doctest::Approx(slope).epsilon(1e-6));
    // replicated edge damps the estimate: (1*s + 2*2s)/10 = 0.5s at frame 0
    CHECK(out.at(0, 13) == doctest::Approx(0.5 * slope).epsilon(1e-6));
    // delta-delta of interior frames of the ramp is 0
    CHECK(out.at(4, 26) == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("already-augmented utterances are rejected") {
    Utterance utt;
    utt.t = 3;
    utt.d = 39;
    utt.frames.assign(3 * 39, 0.0f);
    CHECK_THROWS_WITH_AS(fsm::add_deltas(utt), doctest::Contains("already augmented"),
                         std::invalid_argument);
}

TEST_CASE("wav files round-trip within quantization error") {
    Waveform w = noise_wave(0.25, 16000, 5);
    w.samples[0] = 1.0f;  // clamp path
    w.samples[1] = -1.0f;
    const char* path = "test_roundtrip.wav";
    fsm::write_wav(path, w);
    Waveform r = fsm::read_wav(path);
    std::remove(path);
    CHECK(r.sample_rate == 16000);
    REQUIRE(r.samples.size() == w.samples.size());
    for (size_t i = 0; i < w.samples.size(); ++i)
        CHECK(std::abs(r.samples[i] - w.samples[i]) <= 1.0f / 32768.0f + 1e-7f);
}

TEST_CASE("non-wav and malformed files are rejected") {
    const char* path = "test_notwav.bin";
    {
        std::ofstream out(path, std::ios::binary);
        out << "this is not audio";
    }
    CHECK_THROWS_WITH_AS(fsm::read_wav(path), doctest::Contains("RIFF"), std::runtime_error);
    std::remove(path);
    CHECK_THROWS_AS(fsm::read_wav("does_not_exist.wav"), std::runtime_error);
}

TEST_CASE("stereo wav is rejected") {
    const char* path = "test_stereo.wav";
    {
        Waveform w;
        w.sample_rate = 16000;
        w.samples.assign(100, 0.0f);
        fsm::write_wav(path, w);
        // flip the channel count in the header
        std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(22);
        char two[2] = {2, 0};
        f.write(two, 2);
    }
    CHECK_THROWS_WITH_AS(fsm::read_wav(path), doctest::Contains("mono"), std::runtime_error);
    std::remove(path);
}
