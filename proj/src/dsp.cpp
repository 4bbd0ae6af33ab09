#include "fsm/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "fsm/threading.hpp"

namespace fsm {

namespace {

constexpr double kPi = 3.14159265358979323846;

int next_pow2(int n) {
    int p = 1;
    while (p < n) p <<= 1;
    return p;
}

// iterative radix-2 FFT, in place
void fft(std::vector<std::complex<double>>& a) {
    int n = static_cast<int>(a.size());
    for (int i = 1, j = 0; i < n; ++i) {
        int bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (int len = 2; len <= n; len <<= 1) {
        double ang = -2.0 * kPi / len;
        std::complex<double> wl(std::cos(ang), std::sin(ang));
        for (int i = 0; i < n; i += len) {
            std::complex<double> w(1.0);
            for (int j = 0; j < len / 2; ++j) {
                auto u = a[i + j];
                auto v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wl;
            }
        }
    }
}

// triangular filterbank as a dense [n_filters x (nfft/2+1)] weight table
std::vector<double> build_filterbank(int n_filters, int nfft, int sample_rate) {
    int bins = nfft / 2 + 1;
    double nyquist = sample_rate / 2.0;
    double mel_lo = hz_to_mel(0.0), mel_hi = hz_to_mel(nyquist);
    std::vector<double> edges(n_filters + 2);
    for (int i = 0; i < n_filters + 2; ++i)
        edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (n_filters + 1));
    std::vector<double> fb(static_cast<size_t>(n_filters) * bins, 0.0);
    for (int f = 0; f < n_filters; ++f) {
        double lo = edges[f], mid = edges[f + 1], hi = edges[f + 2];
        for (int b = 0; b < bins; ++b) {
            double hz = static_cast<double>(b) * sample_rate / nfft;
            double w = 0.0;
            if (hz > lo && hz < mid)
                w = (hz - lo) / (mid - lo);
            else if (hz >= mid && hz < hi)
                w = (hi - hz) / (hi - mid);
            fb[static_cast<size_t>(f) * bins + b] = w;
        }
    }
    return fb;
}

struct FrameLayout {
    int frame_len, hop, t;
};

FrameLayout layout_frames(const Waveform& wave, const MfccConfig& cfg) {
    FrameLayout l;
    l.frame_len = static_cast<int>(std::lround(cfg.frame_ms * wave.sample_rate / 1000.0));
    l.hop = static_cast<int>(std::lround(cfg.hop_ms * wave.sample_rate / 1000.0));
    if (l.frame_len <= 0 || l.hop <= 0)
        throw std::invalid_argument("mfcc: frame/hop of " + std::to_string(cfg.frame_ms) + "/" +
                                    std::to_string(cfg.hop_ms) + " ms collapse to zero samples at " +
                                    std::to_string(wave.sample_rate) + " Hz");
    if (static_cast<int64_t>(wave.samples.size()) < l.frame_len)
        throw std::invalid_argument("mfcc: waveform of " + std::to_string(wave.samples.size()) +
                                    " samples is shorter than one analysis frame (" +
                                    std::to_string(l.frame_len) + " samples required)");
    l.t = frame_count(static_cast<int64_t>(wave.samples.size()), l.frame_len, l.hop);
    return l;
}

}  // namespace

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<double> mel_filter_centers(int n_filters, int sample_rate) {
    double mel_lo = hz_to_mel(0.0), mel_hi = hz_to_mel(sample_rate / 2.0);
    std::vector<double> centers(n_filters);
    for (int f = 0; f < n_filters; ++f)
        centers[f] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * (f + 1) / (n_filters + 1));
    return centers;
}

int frame_count(int64_t n_samples, int frame_len, int hop) {
    return static_cast<int>((n_samples - frame_len) / hop) + 1;
}

Utterance log_mel_spectrogram(const Waveform& wave, const MfccConfig& cfg) {
    FrameLayout l = layout_frames(wave, cfg);
    int nfft = next_pow2(l.frame_len);
    int bins = nfft / 2 + 1;
    auto fb = build_filterbank(cfg.n_filters, nfft, wave.sample_rate);

    // pre-emphasis over the whole signal, then windowed frames
    std::vector<double> emph(wave.samples.size());
    emph[0] = wave.samples[0];
    for (size_t i = 1; i < emph.size(); ++i)
        emph[i] = wave.samples[i] - cfg.preemphasis * wave.samples[i - 1];

    std::vector<double> window(l.frame_len);
    for (int i = 0; i < l.frame_len; ++i)
        window[i] = 0.54 - 0.46 * std::cos(2.0 * kPi * i / (l.frame_len - 1));

    Utterance out;
    out.t = l.t;
    out.d = cfg.n_filters;
    out.speaker_id = wave.speaker_id;
    out.label = wave.label;
    out.frames.resize(static_cast<size_t>(l.t) * cfg.n_filters);

    parallel_for(0, l.t, 8, [&](int64_t f0, int64_t f1) {
        std::vector<std::complex<double>> buf(nfft);
        std::vector<double> power(bins);
        for (int64_t f = f0; f < f1; ++f) {
            int64_t start = f * l.hop;
            for (int i = 0; i < l.frame_len; ++i)
                buf[i] = emph[start + i] * window[i];
            std::fill(buf.begin() + l.frame_len, buf.end(), std::complex<double>(0.0));
            fft(buf);
            for (int b = 0; b < bins; ++b) power[b] = std::norm(buf[b]);
            for (int m = 0; m < cfg.n_filters; ++m) {
                const double* w = fb.data() + static_cast<size_t>(m) * bins;
                double e = 0.0;
                for (int b = 0; b < bins; ++b) e += w[b] * power[b];
                out.frames[f * cfg.n_filters + m] =
                    static_cast<float>(std::log(std::max(e, cfg.log_floor)));
            }
        }
    });
    return out;
}

Utterance mfcc(const Waveform& wave, const MfccConfig& cfg) {
    Utterance mel = log_mel_spectrogram(wave, cfg);
    int m = cfg.n_filters, k = cfg.n_cepstra;

    // orthonormal DCT-II basis [k x m]
    std::vector<double> basis(static_cast<size_t>(k) * m);
    double s0 = std::sqrt(1.0 / m), s = std::sqrt(2.0 / m);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < m; ++j)
            basis[static_cast<size_t>(i) * m + j] =
                (i == 0 ? s0 : s) * std::cos(kPi * i * (j + 0.5) / m);

    Utterance out;
    out.t = mel.t;
    out.d = k;
    out.speaker_id = wave.speaker_id;
    out.label = wave.label;
    out.frames.resize(static_cast<size_t>(mel.t) * k);
    for (int f = 0; f < mel.t; ++f)
        for (int i = 0; i < k; ++i) {
            double acc = 0.0;
            for (int j = 0; j < m; ++j) acc += basis[static_cast<size_t>(i) * m + j] * mel.at(f, j);
            out.at(f, i) = static_cast<float>(acc);
        }

    if (cfg.cmvn) {
        for (int i = 0; i < k; ++i) {
            double mean = 0.0;
            for (int f = 0; f < out.t; ++f) mean += out.at(f, i);
            mean /= out.t;
            double var = 0.0;
            for (int f = 0; f < out.t; ++f) {
                double dlt = out.at(f, i) - mean;
                var += dlt * dlt;
            }
            var /= out.t;
            double inv = var > 1e-12 ? 1.0 / std::sqrt(var) : 1.0;  // degenerate: center only
            for (int f = 0; f < out.t; ++f)
                out.at(f, i) = static_cast<float>((out.at(f, i) - mean) * inv);
        }
    }
    return out;
}

Utterance add_deltas(const Utterance& utt) {
    if (utt.d != 13)
        throw std::invalid_argument("add_deltas: expected 13 static coefficients, got " +
                                    std::to_string(utt.d) +
                                    (utt.d == 39 ? " (already augmented)" : ""));
    int t = utt.t, d = utt.d;
    auto regress = [t, d](const std::vector<float>& src, int col_off, std::vector<float>& dst,
                          int dst_off, int width) {
        auto get = [&](int f, int c) {
            f = std::clamp(f, 0, t - 1);  // replicate edges
            return src[static_cast<size_t>(f) * width + col_off + c];
        };
        for (int f = 0; f < t; ++f)
            for (int c = 0; c < d; ++c) {
                double num = 0.0;
                for (int n = 1; n <= 2; ++n) num += n * (get(f + n, c) - get(f - n, c));
                dst[static_cast<size_t>(f) * 39 + dst_off + c] = static_cast<float>(num / 10.0);
            }
    };

    Utterance out;
    out.t = t;
    out.d = 39;
    out.speaker_id = utt.speaker_id;
    out.label = utt.label;
    out.frames.resize(static_cast<size_t>(t) * 39);
    for (int f = 0; f < t; ++f)
        for (int c = 0; c < d; ++c) out.at(f, c) = utt.at(f, c);
    regress(utt.frames, 0, out.frames, d, d);        // deltas from statics
    regress(out.frames, d, out.frames, 2 * d, 39);   // delta-deltas from deltas
    return out;
}

// ---------------------------------------------------------------------------
// WAV

namespace {

uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

uint16_t read_u16(std::istream& in) {
    unsigned char b[2];
    in.read(reinterpret_cast<char*>(b), 2);
    return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

void write_u32(std::ostream& out, uint32_t v) {
    char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                 static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    out.write(b, 4);
}

void write_u16(std::ostream& out, uint16_t v) {
    char b[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
    out.write(b, 2);
}

[[noreturn]] void wav_error(const std::string& path, const std::string& what) {
    throw std::runtime_error(path + ": " + what);
}

}  // namespace

Waveform read_wav(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) wav_error(path, "cannot open file");
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "RIFF", 4) != 0) wav_error(path, "not a RIFF file");
    read_u32(in);  // riff size
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "WAVE", 4) != 0) wav_error(path, "not a WAVE file");

    Waveform wave;
    bool got_fmt = false;
    while (in.read(magic, 4)) {
        uint32_t size = read_u32(in);
        if (std::memcmp(magic, "fmt ", 4) == 0) {
            uint16_t format = read_u16(in);
            uint16_t channels = read_u16(in);
            uint32_t rate = read_u32(in);
            read_u32(in);  // byte rate
            read_u16(in);  // block align
            uint16_t bits = read_u16(in);
            if (format != 1) wav_error(path, "unsupported format tag " + std::to_string(format) + " (need PCM)");
            if (channels != 1) wav_error(path, std::to_string(channels) + " channels (need mono)");
            if (bits != 16) wav_error(path, std::to_string(bits) + "-bit samples (need 16)");
            wave.sample_rate = static_cast<int>(rate);
            if (size > 16) in.seekg(size - 16, std::ios::cur);
            got_fmt = true;
        } else if (std::memcmp(magic, "data", 4) == 0) {
            if (!got_fmt) wav_error(path, "data chunk before fmt chunk");
            size_t n = size / 2;
            std::vector<char> raw(size);
            in.read(raw.data(), size);
            if (!in) wav_error(path, "truncated data chunk");
            wave.samples.resize(n);
            for (size_t i = 0; i < n; ++i) {
                int16_t s = static_cast<int16_t>(
                    static_cast<unsigned char>(raw[2 * i]) |
                    (static_cast<unsigned char>(raw[2 * i + 1]) << 8));
                wave.samples[i] = static_cast<float>(s) / 32768.0f;
            }
            return wave;
        } else {
            in.seekg(size + (size & 1), std::ios::cur);  // chunks are word-aligned
        }
    }
    wav_error(path, got_fmt ? "no data chunk" : "no fmt chunk");
}

void write_wav(const std::string& path, const Waveform& wave) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(path + ": cannot open for writing");
    uint32_t data_size = static_cast<uint32_t>(wave.samples.size() * 2);
    out.write("RIFF", 4);
    write_u32(out, 36 + data_size);
    out.write("WAVE", 4);
    out.write("fmt ", 4);
    write_u32(out, 16);
    write_u16(out, 1);  // PCM
    write_u16(out, 1);  // mono
    write_u32(out, static_cast<uint32_t>(wave.sample_rate));
    write_u32(out, static_cast<uint32_t>(wave.sample_rate * 2));
    write_u16(out, 2);
    write_u16(out, 16);
    out.write("data", 4);
    write_u32(out, data_size);
    for (float s : wave.samples) {
        long q = std::lround(std::clamp(static_cast<double>(s), -1.0, 1.0) * 32768.0);
        q = std::clamp(q, -32768l, 32767l);
        write_u16(out, static_cast<uint16_t>(static_cast<int16_t>(q)));
    }
    if (!out) throw std::runtime_error(path + ": write failed");
}

}  // namespace fsm
