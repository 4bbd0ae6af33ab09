#include "fsm/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "fsm/rng.hpp"
#include "fsm/threading.hpp"

namespace fsm {

namespace {

constexpr double kPi = 3.14159265358979323846;

// fixed stream tags for seed derivation (arbitrary odd constants)
constexpr uint64_t kGlyphStream = 0x676c796673ULL;
constexpr uint64_t kContourStream = 0x636f6e74ULL;
constexpr uint64_t kSpeakerStream = 0x73706b72ULL;
constexpr uint64_t kImageStream = 0x696d67ULL;
constexpr uint64_t kSpeechStream = 0x737063ULL;
constexpr uint64_t kAliasStream = 0x6f68ULL;

uint32_t read_be32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    return (static_cast<uint32_t>(b[0]) << 24) | (static_cast<uint32_t>(b[1]) << 16) |
           (static_cast<uint32_t>(b[2]) << 8) | static_cast<uint32_t>(b[3]);
}

void write_be32(std::ostream& out, uint32_t v) {
    char b[4] = {static_cast<char>((v >> 24) & 0xff), static_cast<char>((v >> 16) & 0xff),
                 static_cast<char>((v >> 8) & 0xff), static_cast<char>(v & 0xff)};
    out.write(b, 4);
}

[[noreturn]] void idx_error(const std::string& path, int64_t offset, const std::string& what) {
    throw std::runtime_error(path + ": " + what + " at byte " + std::to_string(offset));
}

std::string hex32(uint32_t v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08x", v);
    return buf;
}

// bilinear resample a square grayscale image to 28x28
std::vector<float> bilinear_to_28(const std::vector<float>& src, int rows, int cols) {
    std::vector<float> dst(kImagePixels);
    double sy = static_cast<double>(rows) / kImageSide;
    double sx = static_cast<double>(cols) / kImageSide;
    for (int y = 0; y < kImageSide; ++y)
        for (int x = 0; x < kImageSide; ++x) {
            double fy = (y + 0.5) * sy - 0.5;
            double fx = (x + 0.5) * sx - 0.5;
            int y0 = std::clamp(static_cast<int>(std::floor(fy)), 0, rows - 1);
            int x0 = std::clamp(static_cast<int>(std::floor(fx)), 0, cols - 1);
            int y1 = std::min(y0 + 1, rows - 1);
            int x1 = std::min(x0 + 1, cols - 1);
            double wy = std::clamp(fy - y0, 0.0, 1.0);
            double wx = std::clamp(fx - x0, 0.0, 1.0);
            double v = (1 - wy) * ((1 - wx) * src[y0 * cols + x0] + wx * src[y0 * cols + x1]) +
                       wy * ((1 - wx) * src[y1 * cols + x0] + wx * src[y1 * cols + x1]);
            dst[y * kImageSide + x] = static_cast<float>(v);
        }
    return dst;
}

}  // namespace

// ---------------------------------------------------------------------------
// IDX

std::vector<ImageItem> load_idx(const std::string& images_path, const std::string& labels_path,
                                bool invert_downsample) {
    std::ifstream in(images_path, std::ios::binary);
    if (!in) throw std::runtime_error(images_path + ": cannot open file");
    uint32_t magic = read_be32(in);
    if (!in) idx_error(images_path, 0, "file shorter than the 4-byte magic");
    if (magic != 0x00000803u)
        idx_error(images_path, 0, "bad magic " + hex32(magic) + " (expected 0x00000803)");
    uint32_t count = read_be32(in);
    uint32_t rows = read_be32(in);
    uint32_t cols = read_be32(in);
    if (!in) idx_error(images_path, 4, "truncated header");
    if (rows == 0 || cols == 0 || rows > 4096 || cols > 4096)
        idx_error(images_path, 8, "implausible image size " + std::to_string(rows) + "x" +
                                      std::to_string(cols));
    if (!invert_downsample && (rows != kImageSide || cols != kImageSide))
        idx_error(images_path, 8,
                  std::to_string(rows) + "x" + std::to_string(cols) +
                      " images need the invert/downsample flag (expected 28x28)");

    int64_t expected = static_cast<int64_t>(count) * rows * cols;
    std::vector<unsigned char> payload(expected);
    in.read(reinterpret_cast<char*>(payload.data()), expected);
    int64_t got = in.gcount();
    if (got != expected)
        idx_error(images_path, 16,
                  "truncated payload: expected " + std::to_string(expected) + " bytes, found " +
                      std::to_string(got));

    std::vector<std::string> labels;
    if (!labels_path.empty()) {
        std::ifstream lin(labels_path, std::ios::binary);
        if (!lin) throw std::runtime_error(labels_path + ": cannot open file");
        uint32_t lmagic = read_be32(lin);
        if (!lin) idx_error(labels_path, 0, "file shorter than the 4-byte magic");
        if (lmagic != 0x00000801u)
            idx_error(labels_path, 0, "bad magic " + hex32(lmagic) + " (expected 0x00000801)");
        uint32_t lcount = read_be32(lin);
        if (lcount != count)
            idx_error(labels_path, 4,
                      "label count " + std::to_string(lcount) + " does not match " +
                          std::to_string(count) + " images");
        std::vector<unsigned char> lbytes(count);
        lin.read(reinterpret_cast<char*>(lbytes.data()), count);
        if (lin.gcount() != static_cast<int64_t>(count))
            idx_error(labels_path, 8,
                      "truncated payload: expected " + std::to_string(count) + " bytes, found " +
                          std::to_string(lin.gcount()));
        labels.reserve(count);
        for (unsigned char b : lbytes) labels.push_back(std::to_string(static_cast<int>(b)));
    }

    std::vector<ImageItem> items(count);
    parallel_for(0, count, 64, [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) {
            std::vector<float> px(static_cast<size_t>(rows) * cols);
            const unsigned char* src = payload.data() + i * rows * cols;
            for (size_t p = 0; p < px.size(); ++p) px[p] = src[p] / 255.0f;
            if (rows != kImageSide || cols != kImageSide)
                px = bilinear_to_28(px, static_cast<int>(rows), static_cast<int>(cols));
            if (invert_downsample)
                for (auto& v : px) v = 1.0f - v;
            items[i].pixels = std::move(px);
            if (!labels.empty()) items[i].label = labels[i];
        }
    });
    return items;
}

void save_idx(const std::string& images_path, const std::vector<ImageItem>& items) {
    std::ofstream out(images_path, std::ios::binary);
    if (!out) throw std::runtime_error(images_path + ": cannot open for writing");
    write_be32(out, 0x00000803u);
    write_be32(out, static_cast<uint32_t>(items.size()));
    write_be32(out, kImageSide);
    write_be32(out, kImageSide);
    for (const auto& item : items) {
        if (static_cast<int>(item.pixels.size()) != kImagePixels)
            throw std::invalid_argument(images_path + ": item has " +
                                        std::to_string(item.pixels.size()) + " pixels, need " +
                                        std::to_string(kImagePixels));
        for (float p : item.pixels) {
            auto b = static_cast<unsigned char>(
                std::lround(std::clamp(p, 0.0f, 1.0f) * 255.0f));
            out.write(reinterpret_cast<const char*>(&b), 1);
        }
    }
    if (!out) throw std::runtime_error(images_path + ": write failed");
}

void save_idx_labels(const std::string& labels_path, const std::vector<uint8_t>& labels) {
    std::ofstream out(labels_path, std::ios::binary);
    if (!out) throw std::runtime_error(labels_path + ": cannot open for writing");
    write_be32(out, 0x00000801u);
    write_be32(out, static_cast<uint32_t>(labels.size()));
    out.write(reinterpret_cast<const char*>(labels.data()),
              static_cast<std::streamsize>(labels.size()));
    if (!out) throw std::runtime_error(labels_path + ": write failed");
}

// ---------------------------------------------------------------------------
// speech manifests

std::vector<SpeechItem> load_speech_manifest(const std::string& manifest_path,
                                             const MfccConfig& cfg) {
    std::ifstream in(manifest_path);
    if (!in) throw std::runtime_error(manifest_path + ": cannot open file");
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error(manifest_path + ": empty file");
    if (line == "path\tspeaker\tlabel\tsplit\r") line.pop_back();
    if (line != "path\tspeaker\tlabel\tsplit")
        throw std::runtime_error(manifest_path +
                                 ": bad header (expected \"path\\tspeaker\\tlabel\\tsplit\")");

    struct Row {
        std::string path, speaker, label, split;
        int number;
    };
    std::vector<Row> rows;
    std::vector<std::string> errors;
    std::map<std::string, std::string> label_of_path;
    auto base = std::filesystem::path(manifest_path).parent_path();
    int number = 1;
    while (std::getline(in, line)) {
        ++number;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, '\t')) fields.push_back(f);
        if (fields.size() != 4) {
            errors.push_back("row " + std::to_string(number) + ": expected 4 tab-separated fields, got " +
                             std::to_string(fields.size()));
            continue;
        }
        Row r{fields[0], fields[1], fields[2], fields[3], number};
        if (r.split != "train" && r.split != "validation" && r.split != "test") {
            errors.push_back("row " + std::to_string(number) + ": unknown split \"" + r.split + "\"");
            continue;
        }
        auto [it, inserted] = label_of_path.try_emplace(r.path, r.label);
        if (!inserted && it->second != r.label) {
            errors.push_back("row " + std::to_string(number) + ": path \"" + r.path +
                             "\" already listed with label \"" + it->second + "\"");
            continue;
        }
        r.path = (base / r.path).string();
        rows.push_back(std::move(r));
    }

    std::vector<SpeechItem> items(rows.size());
    std::vector<std::string> row_errors(rows.size());
    parallel_for(0, static_cast<int64_t>(rows.size()), 1, [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) {
            try {
                Waveform w = read_wav(rows[i].path);
                w.speaker_id = rows[i].speaker;
                w.label = rows[i].label;
                items[i].utt = mfcc(w, cfg);
                items[i].split = rows[i].split;
            } catch (const std::exception& e) {
                row_errors[i] = "row " + std::to_string(rows[i].number) + ": " + e.what();
            }
        }
    });
    for (auto& e : row_errors)
        if (!e.empty()) errors.push_back(std::move(e));
    if (!errors.empty()) {
        std::string msg = manifest_path + ": " + std::to_string(errors.size()) + " bad row(s)";
        for (const auto& e : errors) msg += "\n  " + e;
        throw std::runtime_error(msg);
    }
    return items;
}

void save_speech_manifest(const std::string& manifest_path,
                          const std::vector<std::string>& paths,
                          const std::vector<std::string>& speakers,
                          const std::vector<std::string>& labels,
                          const std::vector<std::string>& splits) {
    if (paths.size() != speakers.size() || paths.size() != labels.size() ||
        paths.size() != splits.size())
        throw std::invalid_argument(manifest_path + ": column lengths differ");
    std::ofstream out(manifest_path);
    if (!out) throw std::runtime_error(manifest_path + ": cannot open for writing");
    out << "path\tspeaker\tlabel\tsplit\n";
    for (size_t i = 0; i < paths.size(); ++i)
        out << paths[i] << '\t' << speakers[i] << '\t' << labels[i] << '\t' << splits[i] << '\n';
    if (!out) throw std::runtime_error(manifest_path + ": write failed");
}

void check_background_disjoint(const std::vector<std::string>& in_domain_labels,
                               const std::vector<std::string>& background_labels) {
    std::set<std::string> in_domain(in_domain_labels.begin(), in_domain_labels.end());
    std::set<std::string> shared;
    for (const auto& l : background_labels)
        if (in_domain.count(l)) shared.insert(l);
    if (!shared.empty()) {
        std::string msg = "background dataset shares class labels with the evaluation classes:";
        for (const auto& l : shared) msg += " \"" + l + "\"";
        throw std::runtime_error(msg);
    }
}

// ---------------------------------------------------------------------------
// synthetic generator

std::string class_word(int class_id, bool oh_alias) {
    static const char* kWords[10] = {"zero", "one", "two",   "three", "four",
                                     "five", "six", "seven", "eight", "nine"};
    if (class_id == 0) return oh_alias ? "oh" : "zero";
    if (class_id < 10) return kWords[class_id];
    return "w" + std::to_string(class_id);
}

std::string class_image_label(int class_id) {
    if (class_id < 10) return std::to_string(class_id);
    return "w" + std::to_string(class_id);
}

std::vector<float> class_glyph(int class_id) {
    // bump placement depends on the class id alone, so a class keeps its
    // glyph across datasets and seeds
    Rng rng(derive_seed(kGlyphStream, static_cast<uint64_t>(class_id)));
    int n_bumps = rng.uniform_int(2, 4);
    struct Bump {
        double cx, cy, sigma, amp;
    };
    std::vector<Bump> bumps(n_bumps);
    for (auto& b : bumps) {
        b.cx = rng.uniform(7.0, 21.0);
        b.cy = rng.uniform(7.0, 21.0);
        b.sigma = rng.uniform(2.0, 4.0);
        b.amp = rng.uniform(0.6, 1.0);
    }
    std::vector<float> glyph(kImagePixels, 0.0f);
    for (int y = 0; y < kImageSide; ++y)
        for (int x = 0; x < kImageSide; ++x) {
            double v = 0;
            for (const auto& b : bumps) {
                double dx = x - b.cx, dy = y - b.cy;
                v += b.amp * std::exp(-(dx * dx + dy * dy) / (2 * b.sigma * b.sigma));
            }
            glyph[y * kImageSide + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    return glyph;
}

namespace {

struct Contour {
    std::vector<double> freq_mult;  // per segment, relative to speaker pitch
    std::vector<double> rel_dur;    // per segment, sums to 1
};

Contour class_contour(int class_id) {
    static const double kPool[8] = {1.0, 1.22, 1.5, 1.83, 2.24, 2.74, 3.35, 4.1};
    Rng rng(derive_seed(kContourStream, static_cast<uint64_t>(class_id)));
    int n_seg = rng.uniform_int(2, 4);
    Contour c;
    double total = 0;
    for (int s = 0; s < n_seg; ++s) {
        c.freq_mult.push_back(kPool[rng.uniform_int(0, 7)]);
        double d = rng.uniform(0.7, 1.3);
        c.rel_dur.push_back(d);
        total += d;
    }
    for (auto& d : c.rel_dur) d /= total;
    return c;
}

struct Voice {
    double pitch, rate;
};

Voice speaker_voice(int speaker) {
    Rng rng(derive_seed(kSpeakerStream, static_cast<uint64_t>(speaker)));
    return {rng.uniform(90.0, 220.0), rng.uniform(0.85, 1.2)};
}

float quantize_i16(double x) {
    long q = std::lround(std::clamp(x, -1.0, 1.0) * 32768.0);
    q = std::clamp(q, -32768l, 32767l);
    return static_cast<float>(q) / 32768.0f;
}

}  // namespace

Waveform synthesize_word(int class_id, int speaker, const SyntheticConfig& cfg, Rng& rng) {
    Contour contour = class_contour(class_id);
    Voice voice = speaker_voice(speaker);
    double pitch = voice.pitch * rng.uniform(0.94, 1.06);
    double seconds = cfg.base_word_sec * voice.rate * rng.uniform(0.92, 1.08);

    Waveform w;
    w.sample_rate = cfg.sample_rate;
    int total = static_cast<int>(seconds * cfg.sample_rate);
    w.samples.resize(total);

    double phase = 0;
    int pos = 0;
    for (size_t seg = 0; seg < contour.freq_mult.size(); ++seg) {
        int len = seg + 1 == contour.freq_mult.size()
                      ? total - pos
                      : static_cast<int>(contour.rel_dur[seg] * total);
        double freq = pitch * contour.freq_mult[seg];
        double step = 2.0 * kPi * freq / cfg.sample_rate;
        for (int i = 0; i < len; ++i) {
            double env = std::sin(kPi * (i + 0.5) / len);  // smooth onset/offset
            double tone = 0.6 * std::sin(phase) + 0.3 * std::sin(2 * phase) +
                          0.1 * std::sin(3 * phase);
            double v = 0.45 * env * tone + cfg.speech_noise * rng.normal();
            w.samples[pos + i] = quantize_i16(v);
            phase += step;
        }
        pos += len;
    }
    return w;
}

namespace {

template <class PerItem>
void for_each_synthetic_item(const SyntheticConfig& cfg, const PerItem& fn) {
    if (cfg.n_speakers < 2)
        throw std::invalid_argument("generate_synthetic: need at least 2 speakers, got " +
                                    std::to_string(cfg.n_speakers));
    if (cfg.n_classes < 2)
        throw std::invalid_argument("generate_synthetic: need at least 2 classes, got " +
                                    std::to_string(cfg.n_classes));
    if (cfg.items_per_class < 1)
        throw std::invalid_argument("generate_synthetic: items_per_class must be positive");
    if (cfg.image_noise < 0 || cfg.speech_noise < 0)
        throw std::invalid_argument("generate_synthetic: noise levels must be non-negative");

    int64_t n = static_cast<int64_t>(cfg.n_classes) * cfg.items_per_class;
    parallel_for(0, n, 4, [&](int64_t i0, int64_t i1) {
        for (int64_t idx = i0; idx < i1; ++idx) {
            int c = static_cast<int>(idx / cfg.items_per_class);
            int i = static_cast<int>(idx % cfg.items_per_class);
            int class_id = cfg.class_id_offset + c;
            int speaker = i % cfg.n_speakers;
            const char* split = i % 10 == 8 ? "validation" : i % 10 == 9 ? "test" : "train";
            bool alias =
                (derive_seed(cfg.seed, kAliasStream, static_cast<uint64_t>(i)) & 1) != 0;
            fn(idx, class_id, speaker, i, split, alias);
        }
    });
}

}  // namespace

SyntheticDataset generate_synthetic(const SyntheticConfig& cfg) {
    SyntheticDataset out;
    out.id = "synthetic:c" + std::to_string(cfg.n_classes) + ":s" + std::to_string(cfg.n_speakers) +
             ":o" + std::to_string(cfg.class_id_offset) + ":seed" + std::to_string(cfg.seed);
    int64_t n = static_cast<int64_t>(cfg.n_classes) * cfg.items_per_class;
    out.images.resize(n);
    out.speech.resize(n);

    for_each_synthetic_item(cfg, [&](int64_t idx, int class_id, int speaker, int item,
                                     const char* split, bool alias) {
        uint64_t key = static_cast<uint64_t>(class_id) * 1000003ull + static_cast<uint64_t>(item);
        Rng img_rng(derive_seed(cfg.seed, kImageStream, key));
        ImageItem& img = out.images[idx];
        img.pixels = class_glyph(class_id);
        for (auto& p : img.pixels)
            p = static_cast<float>(
                std::clamp(p + cfg.image_noise * img_rng.normal(), 0.0, 1.0));
        img.label = class_image_label(class_id);
        img.split = split;

        Rng sp_rng(derive_seed(cfg.seed, kSpeechStream, key));
        Waveform w = synthesize_word(class_id, speaker, cfg, sp_rng);
        w.speaker_id = "spk" + std::to_string(speaker);
        w.label = class_word(class_id, alias);
        out.speech[idx].utt = mfcc(w, cfg.mfcc);
        out.speech[idx].split = split;
    });
    return out;
}

std::vector<Waveform> synthetic_waveforms(const SyntheticConfig& cfg) {
    int64_t n = static_cast<int64_t>(cfg.n_classes) * cfg.items_per_class;
    std::vector<Waveform> waves(n);
    for_each_synthetic_item(cfg, [&](int64_t idx, int class_id, int speaker, int item,
                                     const char* /*split*/, bool alias) {
        uint64_t key = static_cast<uint64_t>(class_id) * 1000003ull + static_cast<uint64_t>(item);
        Rng sp_rng(derive_seed(cfg.seed, kSpeechStream, key));
        waves[idx] = synthesize_word(class_id, speaker, cfg, sp_rng);
        waves[idx].speaker_id = "spk" + std::to_string(speaker);
        waves[idx].label = class_word(class_id, alias);
    });
    return waves;
}

}  // namespace fsm
