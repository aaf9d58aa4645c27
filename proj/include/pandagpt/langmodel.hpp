#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "pandagpt/adam.hpp"
#include "pandagpt/graph.hpp"
#include "pandagpt/rng.hpp"
#include "pandagpt/tensor.hpp"
#include "pandagpt/vocab.hpp"

namespace pgpt {

// Decoder-only transformer: learned absolute positions, 4 pre-norm blocks of
// 4-head causal attention plus a gelu feed-forward, output head tied to the
// token embedding.
constexpr int kDModel = 64;
constexpr int kMaxSeq = 64;
constexpr int kNumBlocks = 4;
constexpr int kNumHeads = 4;
constexpr int kHeadDim = kDModel / kNumHeads;
constexpr int kFfnHidden = 256;

// View of low-rank adapters on one attention projection (owned by the
// bridge). Effective map is W + scale * B * A.
struct AttnLora {
    const Tensor* A = nullptr;  // [r x d]
    const Tensor* B = nullptr;  // [d x r]
    double scale = 0.0;         // alpha / r
};

struct LmLoraView {
    std::array<AttnLora, kNumBlocks> q{};
    std::array<AttnLora, kNumBlocks> v{};
    bool any() const {
        for (const auto& l : q)
            if (l.A) return true;
        return false;
    }
};

// Tensor names: lm/wte, lm/wpe, lm/final_norm_g, lm/block<i>/{attn_q, attn_k,
// attn_v, attn_o, norm1_g, norm2_g, ffn_w1, ffn_w2}. The output head shares
// lm/wte (weight tying).
ParamMap lm_init(Rng& rng);

// Node handles for one graph build. LoRA leaf ids are -1 when absent.
struct LmLeaves {
    NodeId wte = -1;
    NodeId wpe = -1;
    NodeId final_g = -1;
    struct Block {
        NodeId wq = -1, wk = -1, wv = -1, wo = -1;
        NodeId n1g = -1, n2g = -1, w1 = -1, w2 = -1;
        NodeId q_a = -1, q_b = -1, v_a = -1, v_b = -1;
        double lora_scale = 0.0;
    };
    std::array<Block, kNumBlocks> blocks{};
};

LmLeaves lm_insert_leaves(Graph& g, const ParamMap& lm, bool trainable,
                          const LmLoraView* lora = nullptr, bool lora_trainable = false);

// Causal forward over embedding-layer rows (position embeddings are added
// inside). Rejects T > max_seq. Logits at position t depend only on rows <= t.
NodeId lm_forward_graph(Graph& g, const LmLeaves& leaves, NodeId emb_rows);

// Convenience single-shot forward: [T x d_model] -> [T x vocab].
Tensor lm_forward(const ParamMap& lm, const Tensor& emb, const LmLoraView* lora = nullptr);

// Greedy decoding. `prefix_rows` are embedding-layer rows occupying the first
// positions (empty tensor for none); they receive position indices like
// ordinary tokens. Stops at EOS or after max_new tokens; ties break toward
// the lowest id. `logit_bias` (length vocab) is a test seam added to logits
// before the argmax.
std::vector<int> lm_generate(const ParamMap& lm, const Tensor& prefix_rows,
                             const std::vector<int>& prompt, int max_new,
                             const LmLoraView* lora = nullptr, const float* logit_bias = nullptr);

struct LmPretrainConfig {
    int steps = 2000;
    double lr = 3e-4;
    int batch = 32;
    uint64_t seed = 42;
    double val_fraction = 0.05;
};

struct LmPretrainReport {
    std::vector<double> losses;
    double val_perplexity = 0.0;
    double untrained_val_perplexity = 0.0;
    int64_t param_total = 0;
};

// Synthetic pre-training corpus: caption sentences and template conversations
// rendered as plain token streams with HUMAN/ASSISTANT markers.
std::vector<std::vector<int>> make_text_corpus(int n, Rng rng);

// Next-token training over the corpus minus a validation tail. Returns the
// trained parameters; the caller freezes them.
ParamMap pretrain_lm(const std::vector<std::vector<int>>& corpus, const LmPretrainConfig& cfg,
                     LmPretrainReport* report = nullptr);

// exp(mean NLL per predicted token) over the given documents.
double lm_perplexity(const ParamMap& lm, const std::vector<std::vector<int>>& docs);

}  // namespace pgpt
