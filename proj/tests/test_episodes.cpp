#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "fsm/data.hpp"
#include "fsm/episodes.hpp"
#include "fsm/metrics.hpp"
#include "fsm/models.hpp"
#include "fsm/rng.hpp"

namespace {

fsm::SyntheticDataset synth(int n_classes, int items_per_class, int n_speakers, uint64_t seed,
                            double image_noise = 0.08, double base_word_sec = 0.15) {
    fsm::SyntheticConfig cfg;
    cfg.n_classes = n_classes;
    cfg.n_speakers = n_speakers;
    cfg.items_per_class = items_per_class;
    cfg.image_noise = image_noise;
    cfg.base_word_sec = base_word_sec;
    cfg.seed = seed;
    return fsm::generate_synthetic(cfg);
}

fsm::Utterance rand_utt(fsm::Rng& rng, int t, int d, const char* label) {
    fsm::Utterance u;
    u.t = t;
    u.d = d;
    u.frames.resize(static_cast<size_t>(t) * d);
    for (float& v : u.frames) v = static_cast<float>(rng.normal());
    u.speaker_id = "s";
    u.label = label;
    return u;
}

fsm::ImageItem rand_img(fsm::Rng& rng, const char* label, int pixels = 784) {
    fsm::ImageItem it;
    it.pixels.resize(pixels);
    for (float& v : it.pixels) v = static_cast<float>(rng.uniform());
    it.label = label;
    return it;
}

// image whose pixel vector points at angle theta from the first axis, giving
// an exact cosine distance of 1 - cos(theta) to the axis image
fsm::ImageItem angle_img(double theta, const char* label) {
    fsm::ImageItem it;
    it.pixels.assign(784, 0.0f);
    it.pixels[0] = static_cast<float>(std::cos(theta));
    it.pixels[1] = static_cast<float>(std::sin(theta));
    it.label = label;
    return it;
}

// utterance with every frame on one coordinate axis; distinct axes are at
// frame cosine distance 1 from each other, the same axis at distance 0
fsm::Utterance axis_utt(int axis, const char* label) {
    fsm::Utterance u;
    u.t = 6;
    u.d = 4;
    u.frames.assign(6 * 4, 0.0f);
    for (int t = 0; t < 6; ++t) u.frames[static_cast<size_t>(t) * 4 + axis] = 1.0f;
    u.speaker_id = "s";
    u.label = label;
    return u;
}

fsm::ImageItem axis_img(int axis, const char* label) {
    fsm::ImageItem it;
    it.pixels.assign(784, 0.0f);
    it.pixels[static_cast<size_t>(axis)] = 1.0f;
    it.label = label;
    return it;
}

fsm::SupportPair pair_of(fsm::Utterance u, fsm::ImageItem img, std::string label) {
    fsm::SupportPair p;
    p.speech = std::move(u);
    p.image = std::move(img);
    p.label = std::move(label);
    return p;
}

fsm::ModelConfig tiny_vision_cfg() {
    fsm::ModelConfig cfg;
    cfg.modality = fsm::Modality::vision;
    cfg.objective = fsm::Objective::ae;
    cfg.embed_dim = 12;
    cfg.conv1 = 3;
    cfg.conv2 = 4;
    cfg.conv3 = 6;
    return cfg;
}

fsm::ModelConfig tiny_speech_cfg() {
    fsm::ModelConfig cfg;
    cfg.modality = fsm::Modality::speech;
    cfg.objective = fsm::Objective::ae;
    cfg.embed_dim = 8;
    cfg.gru_units = 10;
    cfg.gru_layers = 2;
    return cfg;
}

template <class T>
bool disjoint(const std::vector<T>& a, const std::vector<T>& b) {
    std::set<T> sa(a.begin(), a.end());
    for (const T& v : b)
        if (sa.count(v)) return false;
    return true;
}

}  // namespace

// --- label mapping ---------------------------------------------------------------

TEST_CASE("spoken words map to digit labels") {
    CHECK(fsm::image_label_for_word("zero") == "0");
    CHECK(fsm::image_label_for_word("oh") == "0");
    CHECK(fsm::image_label_for_word("one") == "1");
    CHECK(fsm::image_label_for_word("five") == "5");
    CHECK(fsm::image_label_for_word("nine") == "9");
    CHECK(fsm::image_label_for_word("w10") == "w10");  // background words name themselves
}

// --- episode sampling --------------------------------------------------------------

TEST_CASE("sampled episodes have the contracted shape") {
    fsm::SyntheticDataset data = synth(10, 30, 2, 1);

    fsm::Episode ep = fsm::sample_episode(data.speech, data.images, 11, 1, 7);
    CHECK(ep.support.size() == 11);
    CHECK(ep.matching_set.size() == 10);
    CHECK(ep.queries.size() == 10);
    CHECK(ep.query_images.size() == 10);
    CHECK(ep.seed == 7);

    fsm::Episode five = fsm::sample_episode(data.speech, data.images, 11, 5, 7);
    CHECK(five.support.size() == 55);

    // exactly k entries per spoken class
    std::map<std::string, int> per_class;
    for (const auto& p : five.support) ++per_class[p.label];
    CHECK(per_class.size() == 11);
    for (const auto& [w, n] : per_class) CHECK(n == 5);
}

TEST_CASE("episode invariants hold across many samples") {
    fsm::SyntheticDataset data = synth(10, 20, 3, 2);
    for (uint64_t seed = 0; seed < 200; ++seed) {
        fsm::Episode ep = fsm::sample_episode(data.speech, data.images, 11, 1, seed);

        // support images never repeat, and every pair's image shows its word
        std::set<int> sup_img(ep.support_image_idx.begin(), ep.support_image_idx.end());
        CHECK(sup_img.size() == ep.support.size());
        for (const auto& p : ep.support)
            CHECK(p.image.label == fsm::image_label_for_word(p.label));

        // matching set: one unused image per digit, in sorted digit order
        REQUIRE(ep.matching_set.size() == 10);
        for (int d = 0; d < 10; ++d) CHECK(ep.matching_set[d].label == std::to_string(d));
        CHECK(disjoint(ep.matching_idx, ep.support_image_idx));

        // queries never reuse a support item
        CHECK(disjoint(ep.query_idx, ep.support_speech_idx));
        CHECK(disjoint(ep.query_image_idx, ep.support_image_idx));
    }
}

TEST_CASE("episode sampling is deterministic in the seed") {
    fsm::SyntheticDataset data = synth(10, 20, 2, 3);
    fsm::Episode a = fsm::sample_episode(data.speech, data.images, 11, 1, 99);
    fsm::Episode b = fsm::sample_episode(data.speech, data.images, 11, 1, 99);
    CHECK(a.support_speech_idx == b.support_speech_idx);
    CHECK(a.support_image_idx == b.support_image_idx);
    CHECK(a.matching_idx == b.matching_idx);
    CHECK(a.query_idx == b.query_idx);
    CHECK(a.query_image_idx == b.query_image_idx);

    fsm::Episode c = fsm::sample_episode(data.speech, data.images, 11, 1, 100);
    CHECK((a.support_speech_idx != c.support_speech_idx || a.query_idx != c.query_idx ||
           a.support_image_idx != c.support_image_idx));
}

TEST_CASE("episode sampling reports missing items by class") {
    fsm::SyntheticDataset data = synth(3, 6, 2, 4);  // words zero/oh/one/two, digits 0-2

    // strip the speech pool of all but one "two"
    std::vector<fsm::SpeechItem> thin_speech;
    int kept = 0;
    for (const auto& it : data.speech)
        if (it.utt.label != "two" || ++kept <= 1) thin_speech.push_back(it);
    CHECK_THROWS_WITH(fsm::sample_episode(thin_speech, data.images, 4, 1, 0),
                      doctest::Contains("'two'"));

    // strip the image pool of all but one digit-2 image
    std::vector<fsm::ImageItem> thin_images;
    kept = 0;
    for (const auto& it : data.images)
        if (it.label != "2" || ++kept <= 1) thin_images.push_back(it);
    CHECK_THROWS_WITH(fsm::sample_episode(data.speech, thin_images, 4, 1, 0),
                      doctest::Contains("'2'"));

    // no images of a digit at all
    std::vector<fsm::ImageItem> no_twos;
    for (const auto& it : data.images)
        if (it.label != "2") no_twos.push_back(it);
    CHECK_THROWS_WITH(fsm::sample_episode(data.speech, no_twos, 4, 1, 0),
                      doctest::Contains("no images labelled '2'"));

    // wrong class count
    CHECK_THROWS_WITH(fsm::sample_episode(data.speech, data.images, 5, 1, 0),
                      doctest::Contains("expected 5 spoken classes"));

    // digit 0 passes the per-class precheck but is exhausted by the
    // zero/oh aliases before the matching set can be drawn
    std::vector<fsm::ImageItem> two_zeros;
    kept = 0;
    for (const auto& it : data.images)
        if (it.label != "0" || ++kept <= 2) two_zeros.push_back(it);
    CHECK_THROWS_WITH(fsm::sample_episode(data.speech, two_zeros, 4, 1, 0),
                      doctest::Contains("matching set"));
}

// --- unimodal classification ---------------------------------------------------------

TEST_CASE("an exact support copy wins classification") {
    fsm::Rng rng(10);
    fsm::SupportSet sup;
    for (int i = 0; i < 8; ++i)
        sup.push_back(pair_of(rand_utt(rng, 7, 5, "w"), rand_img(rng, "d"),
                              "c" + std::to_string(i)));

    CHECK(fsm::classify_unimodal(sup[3].speech, sup, {}) == "c3");
    CHECK(fsm::classify_unimodal(sup[5].image, sup, {}) == "c5");
}

TEST_CASE("raw speech classification matches an argmin scan") {
    fsm::Rng rng(20);
    for (int trial = 0; trial < 40; ++trial) {
        fsm::SupportSet sup;
        for (int i = 0; i < 8; ++i)
            sup.push_back(pair_of(rand_utt(rng, 6, 4, "w"), rand_img(rng, "d", 16),
                                  "c" + std::to_string(i)));
        fsm::Utterance q = rand_utt(rng, 6, 4, "q");

        int best = 0;
        for (int i = 1; i < 8; ++i)
            if (fsm::dtw_distance(q, sup[i].speech) < fsm::dtw_distance(q, sup[best].speech))
                best = i;
        CHECK(fsm::classify_unimodal(q, sup, {}) == sup[best].label);
    }
}

TEST_CASE("raw image classification matches an argmin scan") {
    fsm::Rng rng(21);
    for (int trial = 0; trial < 40; ++trial) {
        fsm::SupportSet sup;
        for (int i = 0; i < 9; ++i)
            sup.push_back(pair_of(rand_utt(rng, 3, 4, "w"), rand_img(rng, "d", 64),
                                  "c" + std::to_string(i)));
        fsm::ImageItem q = rand_img(rng, "q", 64);

        int best = 0;
        for (int i = 1; i < 9; ++i)
            if (fsm::cosine_distance(q.pixels, sup[i].image.pixels) <
                fsm::cosine_distance(q.pixels, sup[best].image.pixels))
                best = i;
        CHECK(fsm::classify_unimodal(q, sup, {}) == sup[best].label);
    }
}

TEST_CASE("encoder classification matches an argmin scan over embeddings") {
    fsm::EncoderModel vis = fsm::init_model(tiny_vision_cfg(), 30);
    fsm::EncoderModel sp = fsm::init_model(tiny_speech_cfg(), 31);
    fsm::Rng rng(32);

    for (int trial = 0; trial < 8; ++trial) {
        fsm::SupportSet sup;
        for (int i = 0; i < 6; ++i)
            sup.push_back(pair_of(rand_utt(rng, 9, 13, "w"), rand_img(rng, "d"),
                                  "c" + std::to_string(i)));

        fsm::ImageItem qi = rand_img(rng, "q");
        std::vector<float> qe = fsm::embed(vis, qi);
        int best = 0;
        double bd = 0;
        for (int i = 0; i < 6; ++i) {
            double d = fsm::squared_euclidean(qe, fsm::embed(vis, sup[i].image));
            if (i == 0 || d < bd) {
                best = i;
                bd = d;
            }
        }
        fsm::ModalityEval ev;
        ev.model = &vis;
        CHECK(fsm::classify_unimodal(qi, sup, ev) == sup[best].label);

        fsm::Utterance qu = rand_utt(rng, 9, 13, "q");
        qe = fsm::embed(sp, qu);
        for (int i = 0; i < 6; ++i) {
            double d = fsm::squared_euclidean(qe, fsm::embed(sp, sup[i].speech));
            if (i == 0 || d < bd) {
                best = i;
                bd = d;
            }
        }
        ev.model = &sp;
        CHECK(fsm::classify_unimodal(qu, sup, ev) == sup[best].label);
    }
}

TEST_CASE("nearest item and class mean disagree when forced") {
    // class a holds the single nearest item but a terrible mean; class b is
    // uniformly close. distances are exact: 1 - cos(theta) to the axis query.
    fsm::Rng rng(40);
    fsm::SupportSet sup;
    sup.push_back(pair_of(rand_utt(rng, 3, 4, "w"), angle_img(0.05, "d"), "a"));
    sup.push_back(pair_of(rand_utt(rng, 3, 4, "w"), angle_img(1.40, "d"), "a"));
    sup.push_back(pair_of(rand_utt(rng, 3, 4, "w"), angle_img(1.45, "d"), "a"));
    sup.push_back(pair_of(rand_utt(rng, 3, 4, "w"), angle_img(0.30, "d"), "b"));
    sup.push_back(pair_of(rand_utt(rng, 3, 4, "w"), angle_img(0.35, "d"), "b"));
    sup.push_back(pair_of(rand_utt(rng, 3, 4, "w"), angle_img(0.40, "d"), "b"));
    fsm::ImageItem query = angle_img(0.0, "q");

    fsm::ModalityEval nearest;
    CHECK(fsm::classify_unimodal(query, sup, nearest) == "a");

    fsm::ModalityEval mean;
    mean.class_mean = true;
    CHECK(fsm::classify_unimodal(query, sup, mean) == "b");
}

TEST_CASE("classification rejects an empty support set") {
    fsm::SupportSet empty;
    fsm::Rng rng(41);
    CHECK_THROWS_WITH(fsm::classify_unimodal(rand_utt(rng, 3, 4, "q"), empty, {}),
                      doctest::Contains("empty"));
    CHECK_THROWS_WITH(fsm::classify_unimodal(rand_img(rng, "q"), empty, {}),
                      doctest::Contains("empty"));
}

// --- multimodal matching ---------------------------------------------------------------

TEST_CASE("perfect features force the matching chain") {
    // class axes make both comparisons exact: the query's class wins step one,
    // its image pattern wins step two
    fsm::Episode ep;
    ep.support.push_back(pair_of(axis_utt(0, "zero"), axis_img(0, "0"), "zero"));
    ep.support.push_back(pair_of(axis_utt(1, "oh"), axis_img(0, "0"), "oh"));
    ep.support.push_back(pair_of(axis_utt(2, "one"), axis_img(1, "1"), "one"));
    ep.matching_set.push_back(axis_img(0, "0"));
    ep.matching_set.push_back(axis_img(1, "1"));

    for (const char* word : {"zero", "oh", "one"}) {
        int axis = word == std::string("zero") ? 0 : word == std::string("oh") ? 1 : 2;
        int pred = fsm::match_multimodal(axis_utt(axis, word), ep, {}, {});
        // both digit-0 words must land on the digit-0 matching image
        CHECK(ep.matching_set[pred].label == fsm::image_label_for_word(word));
    }
}

TEST_CASE("multimodal matching equals the two-argmin composition") {
    fsm::Rng rng(50);
    for (int trial = 0; trial < 25; ++trial) {
        fsm::Episode ep;
        for (int i = 0; i < 6; ++i)
            ep.support.push_back(pair_of(rand_utt(rng, 6, 4, "w"), rand_img(rng, "d", 32),
                                         "c" + std::to_string(i)));
        for (int j = 0; j < 5; ++j)
            ep.matching_set.push_back(rand_img(rng, std::to_string(j).c_str(), 32));
        fsm::Utterance q = rand_utt(rng, 6, 4, "q");

        int a = 0;
        for (int i = 1; i < 6; ++i)
            if (fsm::dtw_distance(q, ep.support[i].speech) <
                fsm::dtw_distance(q, ep.support[a].speech))
                a = i;
        int m = 0;
        for (int j = 1; j < 5; ++j)
            if (fsm::cosine_distance(ep.support[a].image.pixels, ep.matching_set[j].pixels) <
                fsm::cosine_distance(ep.support[a].image.pixels, ep.matching_set[m].pixels))
                m = j;

        CHECK(fsm::match_multimodal(q, ep, {}, {}) == m);
    }
}

TEST_CASE("multimodal matching with encoders equals the embedded composition") {
    fsm::EncoderModel vis = fsm::init_model(tiny_vision_cfg(), 60);
    fsm::EncoderModel sp = fsm::init_model(tiny_speech_cfg(), 61);
    fsm::Rng rng(62);

    for (int trial = 0; trial < 6; ++trial) {
        fsm::Episode ep;
        for (int i = 0; i < 5; ++i)
            ep.support.push_back(pair_of(rand_utt(rng, 8, 13, "w"), rand_img(rng, "d"),
                                         "c" + std::to_string(i)));
        for (int j = 0; j < 4; ++j)
            ep.matching_set.push_back(rand_img(rng, std::to_string(j).c_str()));
        fsm::Utterance q = rand_utt(rng, 8, 13, "q");

        std::vector<float> qe = fsm::embed(sp, q);
        int a = 0;
        double bd = 0;
        for (int i = 0; i < 5; ++i) {
            double d = fsm::squared_euclidean(qe, fsm::embed(sp, ep.support[i].speech));
            if (i == 0 || d < bd) {
                a = i;
                bd = d;
            }
        }
        std::vector<float> pe = fsm::embed(vis, ep.support[a].image);
        int m = 0;
        for (int j = 0; j < 4; ++j) {
            double d = fsm::squared_euclidean(pe, fsm::embed(vis, ep.matching_set[j]));
            if (j == 0 || d < bd) {
                m = j;
                bd = d;
            }
        }

        fsm::ModalityEval sev, vev;
        sev.model = &sp;
        vev.model = &vis;
        CHECK(fsm::match_multimodal(q, ep, sev, vev) == m);
    }
}

TEST_CASE("matching rejects empty episodes") {
    fsm::Rng rng(70);
    fsm::Episode ep;
    CHECK_THROWS_WITH(fsm::match_multimodal(rand_utt(rng, 3, 4, "q"), ep, {}, {}),
                      doctest::Contains("support"));
    ep.support.push_back(pair_of(rand_utt(rng, 3, 4, "w"), rand_img(rng, "d"), "c"));
    CHECK_THROWS_WITH(fsm::match_multimodal(rand_utt(rng, 3, 4, "q"), ep, {}, {}),
                      doctest::Contains("matching"));
}

// --- chance levels -----------------------------------------------------------------------

TEST_CASE("random features sit at the multimodal chance level") {
    // fresh random support, matching set, and query per trial: the winning
    // matching image is uniform over the ten by exchangeability, so hits are
    // binomial(4000, 1/10). bounds are +/- 3.3 sigma around the mean of 400.
    fsm::Rng rng(80);
    int hits = 0;
    for (int trial = 0; trial < 4000; ++trial) {
        fsm::Episode ep;
        for (int i = 0; i < 11; ++i)
            ep.support.push_back(pair_of(rand_utt(rng, 5, 4, "w"), rand_img(rng, "d", 32),
                                         "c" + std::to_string(i)));
        for (int j = 0; j < 10; ++j)
            ep.matching_set.push_back(rand_img(rng, std::to_string(j).c_str(), 32));
        fsm::Utterance q = rand_utt(rng, 5, 4, "q");
        if (ep.matching_set[fsm::match_multimodal(q, ep, {}, {})].label == "0") ++hits;
    }
    CHECK(hits > 337);
    CHECK(hits < 463);
}

TEST_CASE("random features sit at the unimodal chance level") {
    // 11 random support items, query of class "five" with random frames: the
    // nearest item is uniform over 11, so hits are binomial(4000, 1/11) with
    // mean 363.6 and sigma 18.2; bounds are +/- 3.3 sigma.
    fsm::Rng rng(81);
    const char* names[11] = {"zero", "oh",  "one", "two",   "three", "four",
                             "five", "six", "seven", "eight", "nine"};
    int hits = 0;
    for (int trial = 0; trial < 4000; ++trial) {
        fsm::SupportSet sup;
        for (int i = 0; i < 11; ++i)
            sup.push_back(pair_of(rand_utt(rng, 5, 4, "w"), rand_img(rng, "d", 16), names[i]));
        fsm::Utterance q = rand_utt(rng, 5, 4, "five");
        if (fsm::classify_unimodal(q, sup, {}) == "five") ++hits;
    }
    CHECK(hits > 303);
    CHECK(hits < 424);
}

// --- benchmark ---------------------------------------------------------------------------

TEST_CASE("noise-free images make the vision benchmark exact") {
    // with zero image noise every within-class image is the class glyph, so
    // every query matches its support image exactly: accuracy 1, interval 0
    fsm::SyntheticDataset data = synth(10, 12, 2, 5, 0.0);
    fsm::BenchmarkConfig cfg;
    cfg.task = fsm::EvalTask::unimodal_vision;
    cfg.episodes = 20;
    cfg.queries = 5;
    cfg.seeds = 2;
    std::vector<fsm::SeedModels> raw(2);

    fsm::EvalReport r = fsm::run_benchmark(raw, data.speech, data.images, cfg);
    REQUIRE(r.per_seed.size() == 2);
    CHECK(r.per_seed[0] == 1.0);
    CHECK(r.per_seed[1] == 1.0);
    CHECK(r.mean == 1.0);
    CHECK(r.ci95 == 0.0);
}

TEST_CASE("benchmark bookkeeping is consistent and repeatable") {
    fsm::SyntheticDataset data = synth(10, 8, 2, 6);
    fsm::BenchmarkConfig cfg;
    cfg.task = fsm::EvalTask::multimodal;
    cfg.episodes = 6;
    cfg.queries = 4;
    cfg.seeds = 3;
    std::vector<fsm::SeedModels> raw(3);

    fsm::EvalReport r = fsm::run_benchmark(raw, data.speech, data.images, cfg);
    REQUIRE(r.outcomes.size() == 18);
    for (const auto& o : r.outcomes) {
        CHECK(o.total == 4);
        CHECK(o.correct >= 0);
        CHECK(o.correct <= 4);
    }
    // per-seed accuracies recompute from the episode outcomes
    for (int s = 0; s < 3; ++s) {
        int c = 0;
        for (int e = 0; e < 6; ++e) c += r.outcomes[s * 6 + e].correct;
        CHECK(r.per_seed[s] == doctest::Approx(c / 24.0).epsilon(1e-12));
    }
    // the interval recomputes from the per-seed accuracies
    double mean = (r.per_seed[0] + r.per_seed[1] + r.per_seed[2]) / 3;
    double var = 0;
    for (double a : r.per_seed) var += (a - mean) * (a - mean);
    var /= 2;
    CHECK(r.mean == doctest::Approx(mean).epsilon(1e-12));
    CHECK(r.ci95 == doctest::Approx(1.96 * std::sqrt(var / 3)).epsilon(1e-9));

    // bit-for-bit repeatable, episode order notwithstanding
    fsm::EvalReport again = fsm::run_benchmark(raw, data.speech, data.images, cfg);
    CHECK(again.per_seed == r.per_seed);
    for (size_t i = 0; i < r.outcomes.size(); ++i) {
        CHECK(again.outcomes[i].correct == r.outcomes[i].correct);
        CHECK(again.outcomes[i].episode == r.outcomes[i].episode);
    }
}

TEST_CASE("raw-feature baselines clear chance comfortably") {
    fsm::SyntheticDataset data = synth(10, 15, 3, 7);

    fsm::BenchmarkConfig cfg;
    cfg.task = fsm::EvalTask::unimodal_speech;
    cfg.episodes = 25;
    cfg.queries = 10;
    cfg.seeds = 2;
    std::vector<fsm::SeedModels> raw(2);
    fsm::EvalReport sp = fsm::run_benchmark(raw, data.speech, data.images, cfg);
    CHECK(sp.mean > 3.0 / 11.0);  // three times the 11-way chance level

    cfg.task = fsm::EvalTask::multimodal;
    fsm::EvalReport mm = fsm::run_benchmark(raw, data.speech, data.images, cfg);
    CHECK(mm.mean > 0.30);  // three times the 10-image chance level
}

TEST_CASE("benchmark rejects bad configurations") {
    fsm::SyntheticDataset data = synth(10, 8, 2, 8);
    fsm::BenchmarkConfig cfg;
    cfg.seeds = 5;
    std::vector<fsm::SeedModels> three(3);
    CHECK_THROWS_WITH(fsm::run_benchmark(three, data.speech, data.images, cfg),
                      doctest::Contains("5 seeds"));

    std::vector<fsm::SeedModels> five(5);
    cfg.episodes = 0;
    CHECK_THROWS_WITH(fsm::run_benchmark(five, data.speech, data.images, cfg),
                      doctest::Contains("episodes"));
}

TEST_CASE("task names round-trip") {
    for (fsm::EvalTask t : {fsm::EvalTask::unimodal_speech, fsm::EvalTask::unimodal_vision,
                            fsm::EvalTask::multimodal})
        CHECK(fsm::eval_task_from_name(fsm::eval_task_name(t)) == t);
    CHECK_THROWS_WITH(fsm::eval_task_from_name("bimodal"), doctest::Contains("unknown task"));
}

TEST_CASE("reports render rows, blocks, and records") {
    fsm::EvalReport r;
    r.task = fsm::EvalTask::multimodal;
    r.k_shot = 1;
    r.episodes = 400;
    r.queries = 10;
    r.per_seed = {0.7, 0.8};
    r.mean = 0.75;
    r.ci95 = 0.049;
    r.outcomes = {{0, 0, 7, 10}, {1, 0, 8, 10}};

    std::string block = fsm::format_report(r);
    CHECK(block.find("task=multimodal") != std::string::npos);
    CHECK(block.find("75.00%") != std::string::npos);

    std::string row = fsm::report_row("DTW + Pixels", r);
    CHECK(row.find("DTW + Pixels") != std::string::npos);
    CHECK(row.find("75.0") != std::string::npos);

    std::string records = fsm::report_records(r);
    CHECK(std::count(records.begin(), records.end(), '\n') == 3);  // 2 seeds + summary
    CHECK(records.find("\"type\":\"summary\"") != std::string::npos);
    CHECK(records.find("\"mean\":0.75") != std::string::npos);

    std::string audit = fsm::audit_records(r);
    CHECK(std::count(audit.begin(), audit.end(), '\n') == 2);
    CHECK(audit.find("\"correct\":7") != std::string::npos);
}
