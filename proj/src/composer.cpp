#include "pandagpt/composer.hpp"

#include <cmath>

namespace pgpt {

JointEmbedding compose(const std::vector<JointEmbedding>& inputs, const std::vector<double>& weights,
                       bool renormalize) {
    if (inputs.empty()) throw UsageError("compose: empty embedding list");
    std::vector<double> w = weights;
    if (w.empty()) w.assign(inputs.size(), 1.0);
    if (w.size() != inputs.size()) {
        throw UsageError("compose: " + std::to_string(inputs.size()) + " embeddings but " +
                         std::to_string(w.size()) + " weights");
    }
    bool any_weight = false;
    for (double wi : w) {
        if (wi < 0.0) throw UsageError("compose: weights must be nonnegative");
        any_weight = any_weight || wi != 0.0;
    }
    if (!any_weight) throw UsageError("compose: all-zero weights");

    std::vector<double> sum(static_cast<size_t>(kEmbedDim), 0.0);
    for (size_t i = 0; i < inputs.size(); ++i) {
        const Tensor& v = inputs[i].vec;
        if (v.numel() != kEmbedDim) {
            throw ShapeError("compose: embedding " + std::to_string(i) + " has shape " + v.shape_str());
        }
        for (int j = 0; j < kEmbedDim; ++j) sum[static_cast<size_t>(j)] += w[i] * static_cast<double>(v.at(j));
    }

    double norm_sq = 0.0;
    for (double s : sum) norm_sq += s * s;
    const double norm = std::sqrt(norm_sq);

    JointEmbedding out;
    out.vec = Tensor({kEmbedDim});
    out.source = "composed";
    if (renormalize) {
        if (norm < 1e-6) throw NumericError("compose: weighted sum cancels below 1e-6 norm");
        for (int j = 0; j < kEmbedDim; ++j)
            out.vec.at(j) = static_cast<float>(sum[static_cast<size_t>(j)] / norm);
    } else {
        for (int j = 0; j < kEmbedDim; ++j) out.vec.at(j) = static_cast<float>(sum[static_cast<size_t>(j)]);
    }
    ensure_finite(out.vec, "compose");
    return out;
}

}  // namespace pgpt
