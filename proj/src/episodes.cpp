#include "fsm/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "fsm/metrics.hpp"
#include "fsm/models.hpp"
#include "fsm/rng.hpp"
#include "fsm/threading.hpp"

namespace fsm {

namespace {

[[noreturn]] void episode_error(const std::string& what) {
    throw std::runtime_error("episodes: " + what);
}

constexpr uint64_t kDrawStream = 0x65706473;     // episode item draws
constexpr uint64_t kEpisodeStream = 0x65706973;  // per-episode seeds inside a benchmark

// index of the smallest value; strict < keeps the lowest index on ties
int argmin_strict(const std::vector<double>& d) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(d.size()); ++i)
        if (d[i] < d[best]) best = i;
    return best;
}

// The support item a query resolves to: nearest item outright, or under the
// class-mean rule the nearest item inside the class with the smallest mean
// distance. Class ties keep the first class in support order.
int select_support(const std::vector<double>& d, const std::vector<const std::string*>& labels,
                   bool class_mean) {
    if (d.empty()) episode_error("support set is empty");
    if (!class_mean) return argmin_strict(d);
    std::vector<const std::string*> order;
    std::vector<double> sum;
    std::vector<int> count;
    for (size_t i = 0; i < d.size(); ++i) {
        int c = -1;
        for (size_t j = 0; j < order.size(); ++j)
            if (*order[j] == *labels[i]) {
                c = static_cast<int>(j);
                break;
            }
        if (c < 0) {
            order.push_back(labels[i]);
            sum.push_back(0.0);
            count.push_back(0);
            c = static_cast<int>(order.size()) - 1;
        }
        sum[c] += d[i];
        ++count[c];
    }
    int best_class = 0;
    for (int c = 1; c < static_cast<int>(order.size()); ++c)
        if (sum[c] / count[c] < sum[best_class] / count[best_class]) best_class = c;
    int best = -1;
    for (size_t i = 0; i < d.size(); ++i)
        if (*labels[i] == *order[best_class] && (best < 0 || d[i] < d[best]))
            best = static_cast<int>(i);
    return best;
}

std::vector<const std::string*> support_labels(const SupportSet& support) {
    std::vector<const std::string*> out;
    out.reserve(support.size());
    for (const SupportPair& p : support) out.push_back(&p.label);
    return out;
}

// query-to-support distances for one modality, embedding on demand
std::vector<double> speech_distances(const Utterance& query, const SupportSet& support,
                                     const ModalityEval& ev) {
    std::vector<double> d(support.size());
    if (ev.model) {
        std::vector<float> q = embed(*ev.model, query);
        for (size_t i = 0; i < support.size(); ++i)
            d[i] = squared_euclidean(q, embed(*ev.model, support[i].speech));
    } else {
        for (size_t i = 0; i < support.size(); ++i)
            d[i] = dtw_distance(query, support[i].speech);
    }
    return d;
}

std::vector<double> image_distances(const ImageItem& query, const SupportSet& support,
                                    const ModalityEval& ev) {
    std::vector<double> d(support.size());
    if (ev.model) {
        std::vector<float> q = embed(*ev.model, query);
        for (size_t i = 0; i < support.size(); ++i)
            d[i] = squared_euclidean(q, embed(*ev.model, support[i].image));
    } else {
        for (size_t i = 0; i < support.size(); ++i)
            d[i] = cosine_distance(query.pixels, support[i].image.pixels);
    }
    return d;
}

int draw(std::vector<int>& pool, Rng& rng) {
    int j = static_cast<int>(rng.uniform_int(0, static_cast<int64_t>(pool.size()) - 1));
    int v = pool[j];
    pool[j] = pool.back();
    pool.pop_back();
    return v;
}

int pick(const std::vector<int>& pool, Rng& rng) {
    return pool[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(pool.size()) - 1))];
}

}  // namespace

std::string image_label_for_word(const std::string& word) {
    static const std::pair<const char*, const char*> kDigitWords[] = {
        {"zero", "0"}, {"oh", "0"},    {"one", "1"},  {"two", "2"},   {"three", "3"},
        {"four", "4"}, {"five", "5"},  {"six", "6"},  {"seven", "7"}, {"eight", "8"},
        {"nine", "9"}};
    for (const auto& [w, digit] : kDigitWords)
        if (word == w) return digit;
    return word;
}

Episode sample_episode(const std::vector<SpeechItem>& speech,
                       const std::vector<ImageItem>& images, int l_classes, int k_shot,
                       uint64_t seed, int n_queries) {
    if (l_classes < 1)
        episode_error("l_classes must be positive, got " + std::to_string(l_classes));
    if (k_shot < 1) episode_error("k_shot must be positive, got " + std::to_string(k_shot));
    if (n_queries < 1)
        episode_error("n_queries must be positive, got " + std::to_string(n_queries));

    std::map<std::string, std::vector<int>> words;   // spoken label -> speech pool
    std::map<std::string, std::vector<int>> digits;  // image label -> image pool
    for (int i = 0; i < static_cast<int>(speech.size()); ++i) {
        if (speech[i].utt.label.empty())
            episode_error("speech item " + std::to_string(i) + " has no label");
        words[speech[i].utt.label].push_back(i);
    }
    for (int i = 0; i < static_cast<int>(images.size()); ++i) {
        if (images[i].label.empty())
            episode_error("image " + std::to_string(i) + " has no label");
        digits[images[i].label].push_back(i);
    }
    if (static_cast<int>(words.size()) != l_classes)
        episode_error("expected " + std::to_string(l_classes) + " spoken classes, pool has " +
                      std::to_string(words.size()));
    for (const auto& [w, pool] : words)
        if (static_cast<int>(pool.size()) < k_shot + 1)
            episode_error("class '" + w + "' has " + std::to_string(pool.size()) +
                          " speech items, need at least " + std::to_string(k_shot + 1));
    for (const auto& [w, pool] : words) {
        std::string digit = image_label_for_word(w);
        auto it = digits.find(digit);
        if (it == digits.end())
            episode_error("no images labelled '" + digit + "' for spoken class '" + w + "'");
        if (static_cast<int>(it->second.size()) < k_shot + 1)
            episode_error("digit '" + digit + "' has " + std::to_string(it->second.size()) +
                          " images, need at least " + std::to_string(k_shot + 1));
    }

    Rng rng(derive_seed(seed, kDrawStream));
    Episode ep;
    ep.seed = seed;

    // support: k pairs per spoken class, classes in sorted order; image draws
    // share per-digit pools so aliases ("zero"/"oh") never reuse an image
    std::map<std::string, std::vector<int>> word_left = words;
    std::map<std::string, std::vector<int>> digit_left = digits;
    for (const auto& [w, pool] : words) {
        std::vector<int>& spool = word_left[w];
        std::vector<int>& ipool = digit_left[image_label_for_word(w)];
        for (int i = 0; i < k_shot; ++i) {
            if (ipool.empty())
                episode_error("digit '" + image_label_for_word(w) +
                              "' ran out of images while drawing support for class '" + w + "'");
            int si = draw(spool, rng);
            int ii = draw(ipool, rng);
            SupportPair p;
            p.speech = speech[si].utt;
            p.image = images[ii];
            p.label = w;
            ep.support.push_back(std::move(p));
            ep.support_speech_idx.push_back(si);
            ep.support_image_idx.push_back(ii);
        }
    }

    // matching set: one unused image per digit class, digits in sorted order
    for (const auto& [d, pool] : digit_left) {
        if (pool.empty())
            episode_error("no unused image of digit '" + d + "' left for the matching set");
        int ii = pick(pool, rng);
        ep.matching_set.push_back(images[ii]);
        ep.matching_idx.push_back(ii);
    }

    // queries: class uniform over the spoken classes, item uniform over what
    // the support left behind (never empty: k+1 items minus k support draws)
    std::vector<const std::string*> word_names;
    for (const auto& [w, pool] : words) word_names.push_back(&w);
    for (int q = 0; q < n_queries; ++q) {
        const std::string& w = *word_names[rng.uniform_int(0, l_classes - 1)];
        int si = pick(word_left[w], rng);
        ep.queries.push_back(speech[si].utt);
        ep.query_idx.push_back(si);
    }

    // image queries for the vision task: digit uniform over digit classes
    std::vector<const std::string*> digit_names;
    for (const auto& [d, pool] : digits) digit_names.push_back(&d);
    for (int q = 0; q < n_queries; ++q) {
        const std::string& d =
            *digit_names[rng.uniform_int(0, static_cast<int64_t>(digit_names.size()) - 1)];
        const std::vector<int>& pool = digit_left[d];
        if (pool.empty())
            episode_error("no unused image of digit '" + d + "' left for queries");
        int ii = pick(pool, rng);
        ep.query_images.push_back(images[ii]);
        ep.query_image_idx.push_back(ii);
    }
    return ep;
}

std::string classify_unimodal(const Utterance& query, const SupportSet& support,
                              const ModalityEval& ev) {
    if (support.empty()) episode_error("support set is empty");
    std::vector<double> d = speech_distances(query, support, ev);
    return support[select_support(d, support_labels(support), ev.class_mean)].label;
}

std::string classify_unimodal(const ImageItem& query, const SupportSet& support,
                              const ModalityEval& ev) {
    if (support.empty()) episode_error("support set is empty");
    std::vector<double> d = image_distances(query, support, ev);
    return support[select_support(d, support_labels(support), ev.class_mean)].label;
}

int match_multimodal(const Utterance& query, const Episode& episode,
                     const ModalityEval& speech_ev, const ModalityEval& vision_ev) {
    if (episode.support.empty()) episode_error("support set is empty");
    if (episode.matching_set.empty()) episode_error("matching set is empty");
    std::vector<double> ds = speech_distances(query, episode.support, speech_ev);
    int a = select_support(ds, support_labels(episode.support), speech_ev.class_mean);

    const ImageItem& probe = episode.support[a].image;
    std::vector<double> dm(episode.matching_set.size());
    if (vision_ev.model) {
        std::vector<float> q = embed(*vision_ev.model, probe);
        for (size_t i = 0; i < episode.matching_set.size(); ++i)
            dm[i] = squared_euclidean(q, embed(*vision_ev.model, episode.matching_set[i]));
    } else {
        for (size_t i = 0; i < episode.matching_set.size(); ++i)
            dm[i] = cosine_distance(probe.pixels, episode.matching_set[i].pixels);
    }
    return argmin_strict(dm);
}

const char* eval_task_name(EvalTask t) {
    switch (t) {
        case EvalTask::unimodal_speech: return "unimodal_speech";
        case EvalTask::unimodal_vision: return "unimodal_vision";
        case EvalTask::multimodal: return "multimodal";
    }
    return "?";
}

EvalTask eval_task_from_name(const std::string& name) {
    for (EvalTask t :
         {EvalTask::unimodal_speech, EvalTask::unimodal_vision, EvalTask::multimodal})
        if (name == eval_task_name(t)) return t;
    episode_error("unknown task '" + name +
                  "' (expected unimodal_speech, unimodal_vision, or multimodal)");
}

EvalReport run_benchmark(const std::vector<SeedModels>& per_seed,
                         const std::vector<SpeechItem>& speech,
                         const std::vector<ImageItem>& images, const BenchmarkConfig& cfg) {
    if (cfg.seeds < 1) episode_error("seeds must be positive, got " + std::to_string(cfg.seeds));
    if (static_cast<int>(per_seed.size()) < cfg.seeds)
        episode_error("need models for " + std::to_string(cfg.seeds) + " seeds, got " +
                      std::to_string(per_seed.size()));
    if (cfg.episodes < 1)
        episode_error("episodes must be positive, got " + std::to_string(cfg.episodes));
    if (cfg.queries < 1)
        episode_error("queries must be positive, got " + std::to_string(cfg.queries));

    EvalReport r;
    r.task = cfg.task;
    r.k_shot = cfg.k_shot;
    r.episodes = cfg.episodes;
    r.queries = cfg.queries;
    r.outcomes.resize(static_cast<size_t>(cfg.seeds) * cfg.episodes);

    const bool need_speech = cfg.task != EvalTask::unimodal_vision;
    const bool need_vision = cfg.task != EvalTask::unimodal_speech;

    for (int s = 0; s < cfg.seeds; ++s) {
        // embed both pools once per seed; episodes then only index into them
        std::vector<std::vector<float>> semb, iemb;
        if (need_speech && per_seed[s].speech) semb = embed_all(*per_seed[s].speech, speech);
        if (need_vision && per_seed[s].vision) iemb = embed_all(*per_seed[s].vision, images);
        auto sdist = [&](int a, int b) {
            if (!semb.empty()) return squared_euclidean(semb[a], semb[b]);
            return dtw_distance(speech[a].utt, speech[b].utt);
        };
        auto idist = [&](int a, int b) {
            if (!iemb.empty()) return squared_euclidean(iemb[a], iemb[b]);
            return cosine_distance(images[a].pixels.data(), images[b].pixels.data(),
                                   kImagePixels);
        };

        parallel_for(0, cfg.episodes, 1, [&](int64_t lo, int64_t hi) {
            for (int64_t e = lo; e < hi; ++e) {
                uint64_t eseed = derive_seed(
                    cfg.seed, kEpisodeStream,
                    (static_cast<uint64_t>(s) << 32) | static_cast<uint64_t>(e));
                Episode ep =
                    sample_episode(speech, images, cfg.l_classes, cfg.k_shot, eseed, cfg.queries);
                std::vector<const std::string*> labels = support_labels(ep.support);
                int n_support = static_cast<int>(ep.support.size());
                int correct = 0;
                std::vector<double> d(n_support);
                for (int q = 0; q < cfg.queries; ++q) {
                    switch (cfg.task) {
                        case EvalTask::unimodal_speech: {
                            for (int i = 0; i < n_support; ++i)
                                d[i] = sdist(ep.query_idx[q], ep.support_speech_idx[i]);
                            int pickd = select_support(d, labels, cfg.class_mean);
                            if (ep.support[pickd].label == ep.queries[q].label) ++correct;
                            break;
                        }
                        case EvalTask::unimodal_vision: {
                            for (int i = 0; i < n_support; ++i)
                                d[i] = idist(ep.query_image_idx[q], ep.support_image_idx[i]);
                            int pickd = select_support(d, labels, cfg.class_mean);
                            if (image_label_for_word(ep.support[pickd].label) ==
                                ep.query_images[q].label)
                                ++correct;
                            break;
                        }
                        case EvalTask::multimodal: {
                            for (int i = 0; i < n_support; ++i)
                                d[i] = sdist(ep.query_idx[q], ep.support_speech_idx[i]);
                            int a = select_support(d, labels, cfg.class_mean);
                            std::vector<double> dm(ep.matching_set.size());
                            for (size_t j = 0; j < ep.matching_set.size(); ++j)
                                dm[j] = idist(ep.support_image_idx[a], ep.matching_idx[j]);
                            int pred = argmin_strict(dm);
                            if (ep.matching_set[pred].label ==
                                image_label_for_word(ep.queries[q].label))
                                ++correct;
                            break;
                        }
                    }
                }
                r.outcomes[static_cast<size_t>(s) * cfg.episodes + e] = {s, static_cast<int>(e),
                                                                         correct, cfg.queries};
            }
        });
    }

    r.per_seed.resize(cfg.seeds);
    for (int s = 0; s < cfg.seeds; ++s) {
        int64_t correct = 0;
        for (int e = 0; e < cfg.episodes; ++e)
            correct += r.outcomes[static_cast<size_t>(s) * cfg.episodes + e].correct;
        r.per_seed[s] = static_cast<double>(correct) /
                        (static_cast<double>(cfg.episodes) * cfg.queries);
    }
    double sum = 0;
    for (double a : r.per_seed) sum += a;
    r.mean = sum / cfg.seeds;
    if (cfg.seeds >= 2) {
        double var = 0;
        for (double a : r.per_seed) var += (a - r.mean) * (a - r.mean);
        var /= cfg.seeds - 1;
        r.ci95 = 1.96 * std::sqrt(var) / std::sqrt(static_cast<double>(cfg.seeds));
    }
    return r;
}

std::string format_report(const EvalReport& r) {
    char line[128];
    std::snprintf(line, sizeof line, "task=%s k=%d episodes=%d queries=%d seeds=%d\n",
                  eval_task_name(r.task), r.k_shot, r.episodes, r.queries,
                  static_cast<int>(r.per_seed.size()));
    std::string out = line;
    for (size_t s = 0; s < r.per_seed.size(); ++s) {
        std::snprintf(line, sizeof line, "  seed %zu: %.2f%%\n", s, 100.0 * r.per_seed[s]);
        out += line;
    }
    std::snprintf(line, sizeof line, "  mean %.2f%% ± %.2f (95%% CI)\n", 100.0 * r.mean,
                  100.0 * r.ci95);
    out += line;
    return out;
}

std::string report_header() {
    char line[96];
    std::snprintf(line, sizeof line, "%-36s %s\n", "model", "accuracy (%)");
    return line;
}

std::string report_row(const std::string& label, const EvalReport& r) {
    char line[160];
    std::snprintf(line, sizeof line, "%-36s %5.1f ± %.1f\n", label.c_str(), 100.0 * r.mean,
                  100.0 * r.ci95);
    return line;
}

std::string report_records(const EvalReport& r) {
    std::string out;
    for (size_t s = 0; s < r.per_seed.size(); ++s) {
        nlohmann::json j{{"type", "seed"},
                         {"task", eval_task_name(r.task)},
                         {"k", r.k_shot},
                         {"seed_index", static_cast<int>(s)},
                         {"accuracy", r.per_seed[s]}};
        out += j.dump();
        out += '\n';
    }
    nlohmann::json j{{"type", "summary"},
                     {"task", eval_task_name(r.task)},
                     {"k", r.k_shot},
                     {"episodes", r.episodes},
                     {"queries", r.queries},
                     {"seeds", static_cast<int>(r.per_seed.size())},
                     {"mean", r.mean},
                     {"ci95", r.ci95}};
    out += j.dump();
    out += '\n';
    return out;
}

std::string audit_records(const EvalReport& r) {
    std::string out;
    for (const EpisodeOutcome& o : r.outcomes) {
        nlohmann::json j{{"type", "episode"},
                         {"seed_index", o.seed_index},
                         {"episode", o.episode},
                         {"correct", o.correct},
                         {"total", o.total}};
        out += j.dump();
        out += '\n';
    }
    return out;
}

}  // namespace fsm
