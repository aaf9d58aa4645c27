#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "pandagpt/adam.hpp"
#include "pandagpt/binder.hpp"
#include "pandagpt/graph.hpp"
#include "pandagpt/langmodel.hpp"
#include "pandagpt/synthworld.hpp"

namespace pgpt {

constexpr int kLoraRank = 4;
constexpr double kLoraAlpha = 8.0;

// Trainable graft over the frozen stack: an affine projection from the joint
// space into the decoder's embedding space (exactly one soft vector per
// grounding embedding) plus rank-4 LoRA on the q and v projections of every
// attention block. Tensor names: bridge/proj/{w,b} and
// bridge/lora/block<i>/<q|v>/{A,B}. B starts at zero so the adapted model is
// bit-identical to the frozen one before the first step.
struct BridgeState {
    ParamMap t;
    AdamState opt;
    int64_t step = 0;
};

BridgeState bridge_init(Rng& rng);

// Adapter view consumed by the language-model forward.
LmLoraView bridge_lora_view(const BridgeState& bridge);

// f(h): [d_e] -> [1 x d_model] soft prefix row.
Tensor project(const BridgeState& bridge, const Tensor& h);

// Token layout and loss mask for one conversation:
//   [EMB_BEGIN][soft][EMB_END] then per turn [HUMAN] x_i [ASSISTANT] y_i [EOS]
// tokens[soft_pos] is a PAD placeholder; the embedding row there comes from
// the projection. targets are inputs shifted by one; the mask is 1 exactly on
// response tokens and their closing EOS.
struct SequencePlan {
    std::vector<int> tokens;     // length T
    std::vector<int> targets;    // length T-1
    std::vector<uint8_t> mask;   // length T-1
    int soft_pos = 1;
    int mask_count = 0;
};

SequencePlan build_sequence(const Conversation& conv);

// Response-masked NLL of Eq-style conditioning: the sum over turns of
// -log p(y_i | all previous turns, f(h)). 64-bit value; track_f64 runs the
// forward on the full 64-bit pipeline (finite-difference oracles use this).
double eq1_loss_value(const Conversation& conv, const JointEmbedding& h, const BridgeState& bridge,
                      const ParamMap& lm, bool track_f64 = false);

// Loss plus reverse-mode gradients for every tensor in the trainable set.
ParamMap eq1_loss_grads(const Conversation& conv, const JointEmbedding& h, const BridgeState& bridge,
                        const ParamMap& lm, double* loss_out = nullptr);

// Greedy answer to one instruction, conditioned on an optional embedding.
std::vector<int> bridge_answer(const ParamMap& lm, const BridgeState& bridge, const JointEmbedding* h,
                               const std::vector<int>& instruction, int max_new = 12);

struct BridgeTrainConfig {
    int epochs = 2;
    double lr = 5e-4;  // decays linearly to 0 across all steps
    int batch = 8;
    Modality anchor = Modality::img;
    uint64_t seed = 42;
};

struct BridgeTrainReport {
    // One row per step: {step index, learning rate, batch mean NLL}.
    std::vector<std::array<double, 3>> log;
    double first_epoch_mean_nll = 0.0;
    double last_epoch_mean_nll = 0.0;
    int64_t trainable_params = 0;
    int64_t total_params = 0;  // frozen binder + frozen lm + trainable set
    double trainable_fraction = 0.0;
    uint32_t binder_checksum = 0;
    uint32_t lm_checksum = 0;
    std::map<std::string, bool> tensor_updated;  // per trainable tensor
    std::set<std::string> trained_modalities;
    std::vector<uint64_t> train_scene_seeds;
};

std::string render_train_log(const std::vector<std::array<double, 3>>& log);  // step\tlr\tloss

// Adam over the trainable set only. Rejects conversations grounded in any
// modality other than the anchor; verifies the frozen parameters are
// bit-identical afterwards.
BridgeState train_bridge(const std::vector<Conversation>& data, const ParamMap& binder,
                         const ParamMap& lm, const BridgeTrainConfig& cfg,
                         BridgeTrainReport* report = nullptr);

}  // namespace pgpt
