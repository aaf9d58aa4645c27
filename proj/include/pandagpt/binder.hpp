#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "pandagpt/adam.hpp"
#include "pandagpt/graph.hpp"
#include "pandagpt/rng.hpp"
#include "pandagpt/synthworld.hpp"

namespace pgpt {

constexpr int kEmbedDim = 32;     // d_e, the joint space
constexpr int kBinderHidden = 64;
constexpr int kTextEmbedDim = 32;

// Unit-norm vector in the joint space.
struct JointEmbedding {
    Tensor vec;          // [d_e]
    std::string source;  // modality name, "text", or "composed"
};

// Per-modality 2-layer perceptrons bound to the anchor, plus a token
// embedding + mean-pool + perceptron text encoder. Tensor names:
// binder/<modality>/{w1,b1,w2,b2} and binder/text/{emb,w1,b1,w2,b2}.
ParamMap binder_init(Rng& rng);

JointEmbedding binder_encode(const ParamMap& binder, const ModalitySample& sample);
JointEmbedding binder_encode_text(const ParamMap& binder, const std::vector<int>& tokens);

// Symmetric InfoNCE over a B x B similarity matrix with matched pairs on the
// diagonal. Rows of both inputs must be unit-norm.
NodeId info_nce_graph(Graph& g, NodeId anchors, NodeId others, double tau);

// Fraction of queries whose highest-dot-product gallery row (ties toward the
// lowest index) is the true match.
double retrieval_at_1(const std::vector<JointEmbedding>& queries,
                      const std::vector<JointEmbedding>& gallery, const std::vector<int>& truth);

// Co-scene samples across all six modalities plus captions. The first 72
// entries cover every (object, attribute) concept exactly once.
struct BinderPool {
    std::vector<ConceptScene> scenes;
    std::vector<std::array<Tensor, kNumModalities>> observations;
    std::vector<std::vector<int>> captions;
    std::array<bool, kNumModalities> present{};  // per-modality availability
};

BinderPool make_binder_pool(const World& world, int n_scenes, Rng rng);

struct BinderTrainConfig {
    int steps = 300;
    double lr = 1e-3;
    int batch = 32;
    double tau = 0.07;
    double beta2 = 0.99;  // short-window second moment; only ~50 updates reach each encoder
    uint64_t seed = 42;
};

// Pair formation audit. Indices 0..5 are modalities, 6 is text; the premise
// of the emergence claim is that only row/column `img` is ever touched.
struct PairAudit {
    std::array<std::array<int64_t, 7>, 7> counts{};
    int64_t non_anchor_pairs() const;
};

struct BinderTrainReport {
    std::vector<double> losses;
    PairAudit audit;
    uint32_t frozen_checksum = 0;
};

// Contrastive training over anchor-paired data only: (img, X) for X in
// {text, vid, aud, dep, thm, imu}, round-robin over the six pair types.
ParamMap train_binder(const BinderPool& pool, const BinderTrainConfig& cfg,
                      BinderTrainReport* report = nullptr);

}  // namespace pgpt
