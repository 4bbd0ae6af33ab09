#include "fsm/pairs.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fsm/metrics.hpp"
#include "fsm/models.hpp"
#include "fsm/rng.hpp"
#include "fsm/threading.hpp"

namespace fsm {

namespace {

[[noreturn]] void pair_error(const std::string& what) {
    throw std::runtime_error("pairs: " + what);
}

constexpr uint64_t kOracleStream = 0x706f7263;  // oracle partner draws

// Nearest-neighbour selection over a dense distance matrix. Speaker ids, when
// given, make same-speaker candidates ineligible. Items with no eligible
// candidate are counted and warned about, not fatal.
PairSet assemble_nn(int n, const std::vector<double>& dist,
                    const std::vector<const std::string*>& speakers,
                    const std::string& dataset_id, PairSource source, int k) {
    PairSet set;
    set.dataset_id = dataset_id;
    set.source = source;
    std::vector<std::pair<double, int>> cand;
    for (int a = 0; a < n; ++a) {
        cand.clear();
        for (int c = 0; c < n; ++c) {
            if (c == a) continue;
            if (!speakers.empty() && *speakers[a] == *speakers[c]) continue;
            cand.emplace_back(dist[static_cast<size_t>(a) * n + c], c);
        }
        if (cand.empty()) {
            ++set.skipped;
            continue;
        }
        int take = std::min<int>(k, static_cast<int>(cand.size()));
        // pair ordering breaks distance ties toward the lowest index
        std::partial_sort(cand.begin(), cand.begin() + take, cand.end());
        for (int i = 0; i < take; ++i) set.pairs.push_back({a, cand[i].second});
    }
    if (set.skipped > 0)
        std::fprintf(stderr, "pairs: %d item(s) in %s had no eligible partner and were skipped\n",
                     set.skipped, dataset_id.c_str());
    return set;
}

void check_mining_args(size_t n, int k) {
    if (k < 1) pair_error("k must be at least 1, got " + std::to_string(k));
    if (n < 2) pair_error("need at least 2 items to mine pairs, got " + std::to_string(n));
}

std::vector<const std::string*> speaker_refs(const std::vector<SpeechItem>& items) {
    std::set<std::string> distinct;
    std::vector<const std::string*> refs;
    refs.reserve(items.size());
    for (const auto& it : items) {
        distinct.insert(it.utt.speaker_id);
        refs.push_back(&it.utt.speaker_id);
    }
    if (distinct.size() < 2)
        pair_error("speech mining needs at least 2 speakers, dataset has " +
                   std::to_string(distinct.size()));
    return refs;
}

// symmetric pairwise cosine distances over equal-length feature rows
std::vector<double> cosine_matrix(const std::vector<const float*>& rows, int dim) {
    int n = static_cast<int>(rows.size());
    std::vector<double> d(static_cast<size_t>(n) * n, 0.0);
    parallel_for(0, n, 1, [&](int64_t b, int64_t e) {
        for (int64_t a = b; a < e; ++a)
            for (int c = static_cast<int>(a) + 1; c < n; ++c) {
                double v = cosine_distance(rows[a], rows[c], dim);
                d[static_cast<size_t>(a) * n + c] = v;
                d[static_cast<size_t>(c) * n + a] = v;
            }
    });
    return d;
}

PairSet mine_cosine(const std::vector<const float*>& rows, int dim,
                    const std::vector<const std::string*>& speakers,
                    const std::string& dataset_id, PairSource source, int k) {
    std::vector<double> d = cosine_matrix(rows, dim);
    return assemble_nn(static_cast<int>(rows.size()), d, speakers, dataset_id, source, k);
}

template <class Item>
PairSet oracle_pairs(const std::vector<Item>& items, const std::string& dataset_id, uint64_t seed,
                     int k, const std::function<const std::string&(const Item&)>& label_of,
                     const std::vector<const std::string*>& speakers) {
    check_mining_args(items.size(), k);
    int n = static_cast<int>(items.size());
    PairSet set;
    set.dataset_id = dataset_id;
    set.source = PairSource::oracle;
    Rng rng(derive_seed(seed, kOracleStream));
    std::vector<int> cand;
    for (int a = 0; a < n; ++a) {
        if (label_of(items[a]).empty())
            pair_error("item " + std::to_string(a) + " has no label");
        cand.clear();
        for (int c = 0; c < n; ++c) {
            if (c == a || label_of(items[c]) != label_of(items[a])) continue;
            if (!speakers.empty() && *speakers[a] == *speakers[c]) continue;
            cand.push_back(c);
        }
        if (cand.empty()) {
            ++set.skipped;
            continue;
        }
        // uniform k-subset via partial shuffle
        int take = std::min<int>(k, static_cast<int>(cand.size()));
        for (int i = 0; i < take; ++i) {
            int j = static_cast<int>(rng.uniform_int(i, static_cast<int>(cand.size()) - 1));
            std::swap(cand[i], cand[j]);
            set.pairs.push_back({a, cand[i]});
        }
    }
    if (set.skipped > 0)
        std::fprintf(stderr,
                     "pairs: %d item(s) in %s had no eligible same-label partner and were "
                     "skipped\n",
                     set.skipped, dataset_id.c_str());
    return set;
}

}  // namespace

const char* pair_source_name(PairSource s) {
    switch (s) {
        case PairSource::cosine_nn: return "cosine_nn";
        case PairSource::dtw_nn: return "dtw_nn";
        case PairSource::classifier_nn: return "classifier_nn";
        case PairSource::ground_truth: return "ground_truth";
        case PairSource::oracle: return "oracle";
    }
    return "?";
}

PairSource pair_source_from_name(const std::string& name) {
    for (PairSource s : {PairSource::cosine_nn, PairSource::dtw_nn, PairSource::classifier_nn,
                         PairSource::ground_truth, PairSource::oracle})
        if (name == pair_source_name(s)) return s;
    pair_error("unknown pair source '" + name +
               "' (expected cosine_nn, dtw_nn, classifier_nn, ground_truth, or oracle)");
}

PairSet mine_unsupervised(const std::vector<ImageItem>& items, const std::string& dataset_id,
                          int k) {
    check_mining_args(items.size(), k);
    std::vector<const float*> rows;
    rows.reserve(items.size());
    for (const auto& it : items) {
        if (it.pixels.size() != kImagePixels)
            pair_error("image " + std::to_string(rows.size()) + " has " +
                       std::to_string(it.pixels.size()) + " pixels, expected " +
                       std::to_string(kImagePixels));
        rows.push_back(it.pixels.data());
    }
    return mine_cosine(rows, kImagePixels, {}, dataset_id, PairSource::cosine_nn, k);
}

PairSet mine_unsupervised(const std::vector<SpeechItem>& items, const std::string& dataset_id,
                          int k) {
    check_mining_args(items.size(), k);
    std::vector<const std::string*> speakers = speaker_refs(items);
    int n = static_cast<int>(items.size());
    std::vector<double> d(static_cast<size_t>(n) * n, 0.0);
    parallel_for(0, n, 1, [&](int64_t b, int64_t e) {
        for (int64_t a = b; a < e; ++a)
            for (int c = static_cast<int>(a) + 1; c < n; ++c) {
                double v = dtw_distance(items[a].utt, items[c].utt);
                d[static_cast<size_t>(a) * n + c] = v;
                d[static_cast<size_t>(c) * n + a] = v;
            }
    });
    return assemble_nn(n, d, speakers, dataset_id, PairSource::dtw_nn, k);
}

PairSet mine_with_encoder(const std::vector<ImageItem>& items, const EncoderModel& model,
                          const std::string& dataset_id, int k) {
    check_mining_args(items.size(), k);
    std::vector<std::vector<float>> emb = embed_all(model, items);
    std::vector<const float*> rows;
    for (const auto& e : emb) rows.push_back(e.data());
    return mine_cosine(rows, model.cfg.embed_dim, {}, dataset_id, PairSource::classifier_nn, k);
}

PairSet mine_with_encoder(const std::vector<SpeechItem>& items, const EncoderModel& model,
                          const std::string& dataset_id, int k) {
    check_mining_args(items.size(), k);
    std::vector<const std::string*> speakers = speaker_refs(items);
    std::vector<std::vector<float>> emb = embed_all(model, items);
    std::vector<const float*> rows;
    for (const auto& e : emb) rows.push_back(e.data());
    return mine_cosine(rows, model.cfg.embed_dim, speakers, dataset_id,
                       PairSource::classifier_nn, k);
}

PairSet make_oracle_pairs(const std::vector<ImageItem>& items, const std::string& dataset_id,
                          uint64_t seed, int k) {
    return oracle_pairs<ImageItem>(
        items, dataset_id, seed, k,
        [](const ImageItem& it) -> const std::string& { return it.label; }, {});
}

PairSet make_oracle_pairs(const std::vector<SpeechItem>& items, const std::string& dataset_id,
                          uint64_t seed, int k) {
    return oracle_pairs<SpeechItem>(
        items, dataset_id, seed, k,
        [](const SpeechItem& it) -> const std::string& { return it.utt.label; },
        speaker_refs(items));
}

double pair_precision(const PairSet& set, const std::vector<std::string>& labels) {
    if (set.pairs.empty()) return 1.0;
    int n = static_cast<int>(labels.size());
    int64_t hits = 0;
    for (const ItemPair& p : set.pairs) {
        if (p.a < 0 || p.a >= n || p.b < 0 || p.b >= n)
            pair_error("pair (" + std::to_string(p.a) + ", " + std::to_string(p.b) +
                       ") out of range for " + std::to_string(n) + " labels");
        if (labels[p.a] == labels[p.b]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(set.pairs.size());
}

void save_pairs(const std::string& path, const PairSet& set) {
    if (set.dataset_id.find_first_of("\t\n\r") != std::string::npos)
        pair_error("dataset id contains tab or newline characters");
    std::ofstream out(path, std::ios::binary);
    if (!out) pair_error("cannot write " + path);
    out << set.dataset_id << '\t' << pair_source_name(set.source) << '\n';
    for (const ItemPair& p : set.pairs) out << p.a << '\t' << p.b << '\n';
    out.flush();
    if (!out) pair_error("write failed for " + path);
}

namespace {

int parse_index(const std::string& field, const std::string& path, int lineno) {
    size_t used = 0;
    int v = 0;
    try {
        v = std::stoi(field, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != field.size() || field.empty())
        pair_error(path + " line " + std::to_string(lineno) + ": '" + field +
                   "' is not an index");
    if (v < 0)
        pair_error(path + " line " + std::to_string(lineno) + ": negative index " + field);
    return v;
}

}  // namespace

PairSet load_pairs(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) pair_error("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) pair_error(path + " is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    size_t tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos)
        pair_error(path + " line 1: expected \"dataset_id<TAB>source\"");
    PairSet set;
    set.dataset_id = line.substr(0, tab);
    set.source = pair_source_from_name(line.substr(tab + 1));
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) pair_error(path + " line " + std::to_string(lineno) + ": empty line");
        tab = line.find('\t');
        if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos)
            pair_error(path + " line " + std::to_string(lineno) +
                       ": expected \"index_a<TAB>index_b\"");
        ItemPair p;
        p.a = parse_index(line.substr(0, tab), path, lineno);
        p.b = parse_index(line.substr(tab + 1), path, lineno);
        if (p.a == p.b)
            pair_error(path + " line " + std::to_string(lineno) + ": self-pair " +
                       std::to_string(p.a));
        set.pairs.push_back(p);
    }
    return set;
}

}  // namespace fsm
