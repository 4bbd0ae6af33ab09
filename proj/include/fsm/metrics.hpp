#ifndef FSM_METRICS_HPP
#define FSM_METRICS_HPP

// Distance functions used for raw-feature matching and embedding comparison:
// cosine over fixed-length vectors, squared Euclidean over embeddings, DTW
// over frame sequences.

#include <vector>

#include "fsm/dsp.hpp"

namespace fsm {

// 1 - a.b / (|a||b|); returns 1 if either vector has zero norm
double cosine_distance(const float* a, const float* b, int n);
double cosine_distance(const std::vector<float>& a, const std::vector<float>& b);

double squared_euclidean(const std::vector<float>& a, const std::vector<float>& b);

// Minimum-cost monotonic alignment of the two frame sequences with steps
// {(1,0),(0,1),(1,1)}, anchored at both endpoint pairs; per-cell cost is the
// cosine distance of the aligned frames. Among minimum-cost alignments the
// shortest path is chosen, and the total cost is divided by that path length.
double dtw_distance(const Utterance& a, const Utterance& b);

}  // namespace fsm

#endif
