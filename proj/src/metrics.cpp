#include "fsm/metrics.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace fsm {

double cosine_distance(const float* a, const float* b, int n) {
    double dot = 0, na = 0, nb = 0;
    for (int i = 0; i < n; ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 1.0;  // silence/blank never poisons an alignment
    return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
}

double cosine_distance(const std::vector<float>& a, const std::vector<float>& b) {
    if (a.size() != b.size())
        throw std::invalid_argument("cosine_distance: length mismatch " +
                                    std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    return cosine_distance(a.data(), b.data(), static_cast<int>(a.size()));
}

double squared_euclidean(const std::vector<float>& a, const std::vector<float>& b) {
    if (a.size() != b.size())
        throw std::invalid_argument("squared_euclidean: length mismatch " +
                                    std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    double acc = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = static_cast<double>(a[i]) - b[i];
        acc += d * d;
    }
    return acc;
}

double dtw_distance(const Utterance& a, const Utterance& b) {
    if (a.d != b.d)
        throw std::invalid_argument("dtw_distance: frame dimension mismatch " +
                                    std::to_string(a.d) + " vs " + std::to_string(b.d));
    if (a.t < 1 || b.t < 1)
        throw std::invalid_argument("dtw_distance: empty sequence");

    const int ta = a.t, tb = b.t;
    struct Cell {
        double cost;
        int len;
    };
    std::vector<Cell> dp(static_cast<size_t>(ta) * tb);
    auto cell_cost = [&](int i, int j) {
        return cosine_distance(a.frames.data() + static_cast<size_t>(i) * a.d,
                               b.frames.data() + static_cast<size_t>(j) * b.d, a.d);
    };
    // among equal-cost prefixes the shorter path wins, so the reported
    // normalized value is well defined
    auto better = [](const Cell& x, const Cell& y) {
        return x.cost < y.cost || (x.cost == y.cost && x.len < y.len);
    };

    for (int i = 0; i < ta; ++i) {
        for (int j = 0; j < tb; ++j) {
            double c = cell_cost(i, j);
            Cell best;
            if (i == 0 && j == 0) {
                best = {c, 1};
            } else {
                bool seeded = false;
                // candidate order: diagonal, vertical, horizontal
                const int di[3] = {-1, -1, 0};
                const int dj[3] = {-1, 0, -1};
                for (int s = 0; s < 3; ++s) {
                    int pi = i + di[s], pj = j + dj[s];
                    if (pi < 0 || pj < 0) continue;
                    const Cell& p = dp[static_cast<size_t>(pi) * tb + pj];
                    Cell cand{p.cost + c, p.len + 1};
                    if (!seeded || better(cand, best)) {
                        best = cand;
                        seeded = true;
                    }
                }
            }
            dp[static_cast<size_t>(i) * tb + j] = best;
        }
    }
    const Cell& end = dp[static_cast<size_t>(ta) * tb - 1];
    return end.cost / end.len;
}

}  // namespace fsm
