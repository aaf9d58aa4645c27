#pragma once

#include <vector>

#include "pandagpt/binder.hpp"

namespace pgpt {

// Weighted sum of joint embeddings, renormalized to unit length so the result
// stays in the distribution the projection was trained on. Empty weights mean
// all ones. Summation runs in input-index order with 64-bit accumulators.
// Rejects an empty input list, all-zero weights, and cancellation that leaves
// the sum below 1e-6. `renormalize=false` exposes the raw-sum alternative.
JointEmbedding compose(const std::vector<JointEmbedding>& inputs, const std::vector<double>& weights,
                       bool renormalize = true);

}  // namespace pgpt
