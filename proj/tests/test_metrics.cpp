#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "fsm/metrics.hpp"
#include "fsm/rng.hpp"

using fsm::Utterance;

namespace {

// Exhaustive alignment oracle: walks every monotonic path from (0,0) to
// (Ta-1,Tb-1), accumulating its own frame costs, and keeps the best
// (total cost, path length) pair. Shares no code with the library DTW.
struct PathOracle {
    const Utterance& a;
    const Utterance& b;
    double best_cost = 0;
    int best_len = 0;
    bool found = false;

    PathOracle(const Utterance& a_, const Utterance& b_) : a(a_), b(b_) {}

    double frame_cost(int i, int j) const {
        double dot = 0, na = 0, nb = 0;
        for (int c = 0; c < a.d; ++c) {
            double x = a.at(i, c), y = b.at(j, c);
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        if (na == 0.0 || nb == 0.0) return 1.0;
        return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
    }

    void walk(int i, int j, double cost, int len) {
        cost = cost + frame_cost(i, j);
        len += 1;
        if (i == a.t - 1 && j == b.t - 1) {
            if (!found || cost < best_cost || (cost == best_cost && len < best_len)) {
                best_cost = cost;
                best_len = len;
                found = true;
            }
            return;
        }
        if (i + 1 < a.t && j + 1 < b.t) walk(i + 1, j + 1, cost, len);
        if (i + 1 < a.t) walk(i + 1, j, cost, len);
        if (j + 1 < b.t) walk(i, j + 1, cost, len);
    }

    double run() {
        walk(0, 0, 0.0, 0);
        return best_cost / best_len;
    }
};

Utterance random_utt(int t, int d, fsm::Rng& rng) {
    Utterance u;
    u.t = t;
    u.d = d;
    u.frames.resize(static_cast<size_t>(t) * d);
    for (auto& v : u.frames) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    return u;
}

}  // namespace

TEST_CASE("cosine distance basics") {
    std::vector<float> a = {1.0f, 2.0f, 3.0f};
    CHECK(fsm::cosine_distance(a, a) == doctest::Approx(0.0).epsilon(1e-12));
    std::vector<float> x = {1.0f, 0.0f}, y = {0.0f, 5.0f};
    CHECK(fsm::cosine_distance(x, y) == doctest::Approx(1.0));
    std::vector<float> neg = {-1.0f, -2.0f, -3.0f};
    CHECK(fsm::cosine_distance(a, neg) == doctest::Approx(2.0));
}

TEST_CASE("cosine distance is scale invariant and handles zero vectors") {
    fsm::Rng rng(31);
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<float> a(8), b(8);
        for (auto& v : a) v = static_cast<float>(rng.uniform(-1.0, 1.0));
        for (auto& v : b) v = static_cast<float>(rng.uniform(-1.0, 1.0));
        // powers of two scale exactly in binary floating point, so the
        // scaled vector has precisely the same direction
        std::vector<float> a4 = a;
        for (auto& v : a4) v *= 4.0f;
        CHECK(std::abs(fsm::cosine_distance(a, b) - fsm::cosine_distance(a4, b)) < 1e-9);
    }
    std::vector<float> z = {0.0f, 0.0f}, w = {1.0f, 1.0f};
    CHECK(fsm::cosine_distance(z, w) == 1.0);
    CHECK(fsm::cosine_distance(z, z) == 1.0);
    std::vector<float> short_v = {1.0f};
    CHECK_THROWS_AS(fsm::cosine_distance(short_v, w), std::invalid_argument);
}

TEST_CASE("squared euclidean basics") {
    std::vector<float> o = {0.0f, 0.0f}, p = {3.0f, 4.0f};
    CHECK(fsm::squared_euclidean(o, p) == doctest::Approx(25.0));
    CHECK(fsm::squared_euclidean(p, p) == 0.0);
    fsm::Rng rng(32);
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<float> a(16), b(16);
        for (auto& v : a) v = static_cast<float>(rng.uniform(-2.0, 2.0));
        for (auto& v : b) v = static_cast<float>(rng.uniform(-2.0, 2.0));
        CHECK(fsm::squared_euclidean(a, b) == fsm::squared_euclidean(b, a));
        CHECK(fsm::squared_euclidean(a, b) >= 0.0);
    }
    std::vector<float> shorter = {1.0f};
    CHECK_THROWS_AS(fsm::squared_euclidean(shorter, o), std::invalid_argument);
}

TEST_CASE("identical sequences align at zero cost") {
    fsm::Rng rng(33);
    auto u = random_utt(7, 5, rng);
    CHECK(fsm::dtw_distance(u, u) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("single-frame alignment is the frame cosine") {
    fsm::Rng rng(34);
    auto a = random_utt(1, 6, rng);
    auto b = random_utt(1, 6, rng);
    double expect = fsm::cosine_distance(a.frames, b.frames);
    CHECK(fsm::dtw_distance(a, b) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("alignment matches the exhaustive path oracle exactly") {
    fsm::Rng rng(35);
    for (int rep = 0; rep < 200; ++rep) {
        int ta = rng.uniform_int(1, 6);
        int tb = rng.uniform_int(1, 6);
        int d = rng.uniform_int(2, 5);
        auto a = random_utt(ta, d, rng);
        auto b = random_utt(tb, d, rng);
        PathOracle oracle(a, b);
        double expect = oracle.run();
        double got = fsm::dtw_distance(a, b);
        INFO("ta=", ta, " tb=", tb, " d=", d, " rep=", rep);
        CHECK(got == expect);  // identical accumulation order -> exact
    }
}

TEST_CASE("alignment distance is symmetric") {
    fsm::Rng rng(36);
    for (int rep = 0; rep < 20; ++rep) {
        auto a = random_utt(rng.uniform_int(5, 25), 13, rng);
        auto b = random_utt(rng.uniform_int(5, 25), 13, rng);
        double ab = fsm::dtw_distance(a, b);
        double ba = fsm::dtw_distance(b, a);
        CHECK(std::abs(ab - ba) < 1e-9);
        CHECK(ab >= 0.0);
    }
}

TEST_CASE("alignment rejects mismatched dimensions") {
    fsm::Rng rng(37);
    auto a = random_utt(4, 13, rng);
    auto b = random_utt(4, 39, rng);
    CHECK_THROWS_AS(fsm::dtw_distance(a, b), std::invalid_argument);
}
