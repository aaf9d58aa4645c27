#include "pandagpt/bridge.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>

#include "pandagpt/checkpoint.hpp"
#include "pandagpt/composer.hpp"

namespace pgpt {

namespace {

std::string lora_name(int block, const char* proj, const char* mat) {
    return "bridge/lora/block" + std::to_string(block) + "/" + proj + "/" + mat;
}

// Leaves for the trainable set within one graph build.
struct BridgeLeaves {
    NodeId proj_w = -1;
    NodeId proj_b = -1;
    std::array<std::array<NodeId, 4>, kNumBlocks> lora{};  // qA, qB, vA, vB per block
};

BridgeLeaves insert_bridge_leaves(Graph& g, const BridgeState& bridge, LmLeaves* lm_leaves) {
    BridgeLeaves out;
    out.proj_w = g.param(bridge.t.at("bridge/proj/w"));
    out.proj_b = g.param(bridge.t.at("bridge/proj/b"));
    for (int i = 0; i < kNumBlocks; ++i) {
        auto& slot = out.lora[static_cast<size_t>(i)];
        slot[0] = g.param(bridge.t.at(lora_name(i, "q", "A")));
        slot[1] = g.param(bridge.t.at(lora_name(i, "q", "B")));
        slot[2] = g.param(bridge.t.at(lora_name(i, "v", "A")));
        slot[3] = g.param(bridge.t.at(lora_name(i, "v", "B")));
        auto& blk = lm_leaves->blocks[static_cast<size_t>(i)];
        blk.q_a = slot[0];
        blk.q_b = slot[1];
        blk.v_a = slot[2];
        blk.v_b = slot[3];
        blk.lora_scale = kLoraAlpha / kLoraRank;
    }
    return out;
}

// Embedding rows for a planned sequence: token rows from the tied table with
// the soft row spliced in at soft_pos.
NodeId assemble_sequence(Graph& g, const LmLeaves& lm_leaves, const SequencePlan& plan, NodeId soft_row) {
    std::vector<int> head(plan.tokens.begin(), plan.tokens.begin() + plan.soft_pos);
    std::vector<int> tail(plan.tokens.begin() + plan.soft_pos + 1, plan.tokens.end());
    return g.concat_rows({g.gather_rows(lm_leaves.wte, head), soft_row,
                          g.gather_rows(lm_leaves.wte, tail)});
}

NodeId project_graph(Graph& g, NodeId w, NodeId b, NodeId h_row) {
    return g.add_bias(g.matmul(h_row, w), b);
}

NodeId eq1_graph(Graph& g, const LmLeaves& lm_leaves, const BridgeLeaves& bl, const SequencePlan& plan,
                 const Tensor& h) {
    Tensor h_row({1, kEmbedDim});
    h_row.data = h.data;
    NodeId soft = project_graph(g, bl.proj_w, bl.proj_b, g.constant(std::move(h_row)));
    NodeId emb = assemble_sequence(g, lm_leaves, plan, soft);
    NodeId logits = lm_forward_graph(g, lm_leaves, emb);
    const int t = static_cast<int>(plan.tokens.size());
    NodeId ce = g.masked_cross_entropy(g.slice_rows(logits, 0, t - 1), plan.targets, plan.mask);
    // Eq-form NLL is the sum over response tokens, not the mean.
    return g.scale(ce, static_cast<double>(plan.mask_count));
}

}  // namespace

BridgeState bridge_init(Rng& rng) {
    BridgeState s;
    Rng r = rng.child("bridge-init", 0);
    Tensor w({kEmbedDim, kDModel});
    for (float& v : w.data) v = static_cast<float>(0.05 * r.next_gaussian());
    s.t["bridge/proj/w"] = std::move(w);
    s.t["bridge/proj/b"] = Tensor::zeros({kDModel});
    for (int i = 0; i < kNumBlocks; ++i) {
        for (const char* proj : {"q", "v"}) {
            Tensor a({kLoraRank, kDModel});
            for (float& v : a.data) v = static_cast<float>(0.02 * r.next_gaussian());
            s.t[lora_name(i, proj, "A")] = std::move(a);
            s.t[lora_name(i, proj, "B")] = Tensor::zeros({kDModel, kLoraRank});
        }
    }
    s.opt.lr = 5e-4;
    return s;
}

LmLoraView bridge_lora_view(const BridgeState& bridge) {
    LmLoraView view;
    for (int i = 0; i < kNumBlocks; ++i) {
        view.q[static_cast<size_t>(i)] = {&bridge.t.at(lora_name(i, "q", "A")),
                                          &bridge.t.at(lora_name(i, "q", "B")), kLoraAlpha / kLoraRank};
        view.v[static_cast<size_t>(i)] = {&bridge.t.at(lora_name(i, "v", "A")),
                                          &bridge.t.at(lora_name(i, "v", "B")), kLoraAlpha / kLoraRank};
    }
    return view;
}

Tensor project(const BridgeState& bridge, const Tensor& h) {
    if (h.numel() != kEmbedDim) {
        throw ShapeError("project: expected [" + std::to_string(kEmbedDim) + "], got " + h.shape_str());
    }
    Graph g;
    Tensor row({1, kEmbedDim});
    row.data = h.data;
    NodeId soft = project_graph(g, g.constant(bridge.t.at("bridge/proj/w")),
                                g.constant(bridge.t.at("bridge/proj/b")), g.constant(std::move(row)));
    return g.value(soft);
}

SequencePlan build_sequence(const Conversation& conv) {
    if (conv.turns.empty()) throw ShapeError("build_sequence: conversation has no turns");
    SequencePlan plan;
    plan.tokens = {EMB_BEGIN, PAD, EMB_END};  // PAD marks the soft slot
    plan.soft_pos = 1;
    std::vector<uint8_t> is_response(3, 0);
    for (const Turn& turn : conv.turns) {
        plan.tokens.push_back(HUMAN);
        is_response.push_back(0);
        for (int id : turn.instruction) {
            plan.tokens.push_back(id);
            is_response.push_back(0);
        }
        plan.tokens.push_back(ASSISTANT);
        is_response.push_back(0);
        for (int id : turn.response) {
            plan.tokens.push_back(id);
            is_response.push_back(1);
        }
        plan.tokens.push_back(EOS);  // closing EOS carries loss too
        is_response.push_back(1);
    }
    const int t = static_cast<int>(plan.tokens.size());
    if (t > kMaxSeq) {
        throw ShapeError("build_sequence: sequence length " + std::to_string(t) + " exceeds max_seq " +
                         std::to_string(kMaxSeq));
    }
    plan.targets.assign(plan.tokens.begin() + 1, plan.tokens.end());
    plan.mask.resize(static_cast<size_t>(t - 1));
    for (int i = 0; i + 1 < t; ++i) {
        plan.mask[static_cast<size_t>(i)] = is_response[static_cast<size_t>(i + 1)];
        plan.mask_count += plan.mask[static_cast<size_t>(i)];
    }
    return plan;
}

double eq1_loss_value(const Conversation& conv, const JointEmbedding& h, const BridgeState& bridge,
                      const ParamMap& lm, bool track_f64) {
    const SequencePlan plan = build_sequence(conv);
    Graph g(track_f64);
    LmLeaves lm_leaves = lm_insert_leaves(g, lm, false);
    BridgeLeaves bl = insert_bridge_leaves(g, bridge, &lm_leaves);
    return g.value_f64(eq1_graph(g, lm_leaves, bl, plan, h.vec));
}

ParamMap eq1_loss_grads(const Conversation& conv, const JointEmbedding& h, const BridgeState& bridge,
                        const ParamMap& lm, double* loss_out) {
    const SequencePlan plan = build_sequence(conv);
    Graph g;
    LmLeaves lm_leaves = lm_insert_leaves(g, lm, false);
    BridgeLeaves bl = insert_bridge_leaves(g, bridge, &lm_leaves);
    NodeId loss = eq1_graph(g, lm_leaves, bl, plan, h.vec);
    g.backward(loss);
    if (loss_out) *loss_out = g.value_f64(loss);
    ParamMap grads;
    grads["bridge/proj/w"] = g.grad(bl.proj_w);
    grads["bridge/proj/b"] = g.grad(bl.proj_b);
    for (int i = 0; i < kNumBlocks; ++i) {
        const auto& slot = bl.lora[static_cast<size_t>(i)];
        grads[lora_name(i, "q", "A")] = g.grad(slot[0]);
        grads[lora_name(i, "q", "B")] = g.grad(slot[1]);
        grads[lora_name(i, "v", "A")] = g.grad(slot[2]);
        grads[lora_name(i, "v", "B")] = g.grad(slot[3]);
    }
    return grads;
}

std::vector<int> bridge_answer(const ParamMap& lm, const BridgeState& bridge, const JointEmbedding* h,
                               const std::vector<int>& instruction, int max_new) {
    const LmLoraView lora = bridge_lora_view(bridge);
    Tensor prefix;
    if (h) {
        const Tensor& wte = lm.at("lm/wte");
        Tensor soft = project(bridge, h->vec);
        prefix = Tensor({3, kDModel});
        std::memcpy(&prefix.at(0, 0), &wte.at(EMB_BEGIN, 0), sizeof(float) * kDModel);
        std::memcpy(&prefix.at(1, 0), &soft.at(0, 0), sizeof(float) * kDModel);
        std::memcpy(&prefix.at(2, 0), &wte.at(EMB_END, 0), sizeof(float) * kDModel);
    }
    std::vector<int> prompt;
    prompt.push_back(HUMAN);
    prompt.insert(prompt.end(), instruction.begin(), instruction.end());
    prompt.push_back(ASSISTANT);
    return lm_generate(lm, prefix, prompt, max_new, &lora);
}

std::string render_train_log(const std::vector<std::array<double, 3>>& log) {
    std::string out;
    char buf[96];
    for (const auto& row : log) {
        std::snprintf(buf, sizeof(buf), "%d\t%.9g\t%.9g\n", static_cast<int>(row[0]), row[1], row[2]);
        out += buf;
    }
    return out;
}

BridgeState train_bridge(const std::vector<Conversation>& data, const ParamMap& binder,
                         const ParamMap& lm, const BridgeTrainConfig& cfg, BridgeTrainReport* report) {
    if (data.empty()) throw UsageError("train_bridge: empty dataset");
    for (const Conversation& conv : data) {
        if (conv.grounding.empty()) throw UsageError("train_bridge: record without grounding");
        for (const ModalitySample& s : conv.grounding) {
            if (s.modality != cfg.anchor) {
                throw InvariantError(std::string("train_bridge: dataset grounded in ") +
                                     modality_name(s.modality) + " but only the anchor modality " +
                                     modality_name(cfg.anchor) +
                                     " is allowed (protects the zero-shot claim)");
            }
        }
    }

    const uint32_t binder_crc_before = params_checksum(binder);
    const uint32_t lm_crc_before = params_checksum(lm);

    Rng rng(cfg.seed);
    BridgeState bridge = bridge_init(rng);
    bridge.opt.lr = cfg.lr;

    // Grounding embeddings are frozen functions of the binder; compute once.
    std::vector<JointEmbedding> embeddings(data.size());
    std::vector<SequencePlan> plans(data.size());
#pragma omp parallel for schedule(static)
    for (int i = 0; i < static_cast<int>(data.size()); ++i) {
        const Conversation& conv = data[static_cast<size_t>(i)];
        if (conv.grounding.size() == 1) {
            embeddings[static_cast<size_t>(i)] = binder_encode(binder, conv.grounding[0]);
        } else {
            std::vector<JointEmbedding> parts;
            for (const ModalitySample& s : conv.grounding) parts.push_back(binder_encode(binder, s));
            embeddings[static_cast<size_t>(i)] = compose(parts, {});
        }
        plans[static_cast<size_t>(i)] = build_sequence(conv);
    }

    const int n = static_cast<int>(data.size());
    const int steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
    const int64_t total_steps = static_cast<int64_t>(steps_per_epoch) * cfg.epochs;

    if (report) {
        report->trainable_params = param_count(bridge.t);
        report->total_params = param_count(binder) + param_count(lm) + report->trainable_params;
        report->trainable_fraction = static_cast<double>(report->trainable_params) /
                                     static_cast<double>(report->total_params);
        for (const auto& [name, t] : bridge.t) report->tensor_updated[name] = false;
        report->trained_modalities.insert(modality_name(cfg.anchor));
        for (const Conversation& conv : data)
            for (const ModalitySample& s : conv.grounding)
                report->train_scene_seeds.push_back(s.scene.scene_seed);
    }

    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    Rng shuffle_rng = rng.child("bridge-shuffle", 0);

    int64_t step = 0;
    double epoch_nll_first = 0.0, epoch_nll_last = 0.0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (int i = n - 1; i > 0; --i) {
            const int j = shuffle_rng.next_int(i + 1);
            std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
        }
        double epoch_nll = 0.0;
        for (int b0 = 0; b0 < n; b0 += cfg.batch) {
            const int bsz = std::min(cfg.batch, n - b0);
            const double lr_t =
                cfg.lr * (1.0 - static_cast<double>(step) / static_cast<double>(total_steps));
            ParamMap grads;
            for (const auto& [name, t] : bridge.t) grads.emplace(name, Tensor::zeros(t.shape));
            double batch_nll = 0.0;
            for (int b = 0; b < bsz; ++b) {
                const int idx = order[static_cast<size_t>(b0 + b)];
                Graph g;
                LmLeaves lm_leaves = lm_insert_leaves(g, lm, false);
                BridgeLeaves bl = insert_bridge_leaves(g, bridge, &lm_leaves);
                NodeId loss = eq1_graph(g, lm_leaves, bl, plans[static_cast<size_t>(idx)],
                                        embeddings[static_cast<size_t>(idx)].vec);
                g.backward(loss);
                batch_nll += g.value_f64(loss);
                auto accum = [&](const std::string& name, NodeId leaf) {
                    const Tensor& grad = g.grad(leaf);
                    Tensor& acc = grads.at(name);
                    for (size_t k = 0; k < acc.data.size(); ++k) acc.data[k] += grad.data[k];
                };
                accum("bridge/proj/w", bl.proj_w);
                accum("bridge/proj/b", bl.proj_b);
                for (int blk = 0; blk < kNumBlocks; ++blk) {
                    const auto& slot = bl.lora[static_cast<size_t>(blk)];
                    accum(lora_name(blk, "q", "A"), slot[0]);
                    accum(lora_name(blk, "q", "B"), slot[1]);
                    accum(lora_name(blk, "v", "A"), slot[2]);
                    accum(lora_name(blk, "v", "B"), slot[3]);
                }
            }
            const double inv = 1.0 / static_cast<double>(bsz);
            for (auto& [name, g2] : grads)
                for (float& v : g2.data) v = static_cast<float>(static_cast<double>(v) * inv);

            ParamMap before;
            if (report) {
                for (const auto& [name, flag] : report->tensor_updated)
                    if (!flag) before.emplace(name, bridge.t.at(name));
            }
            adam_step(bridge.t, grads, bridge.opt, lr_t);
            if (report) {
                for (auto& [name, flag] : report->tensor_updated) {
                    if (flag) continue;
                    const Tensor& now = bridge.t.at(name);
                    const Tensor& was = before.at(name);
                    if (std::memcmp(now.data.data(), was.data.data(),
                                    now.data.size() * sizeof(float)) != 0) {
                        flag = true;
                    }
                }
                report->log.push_back({static_cast<double>(step), lr_t, batch_nll * inv});
            }
            epoch_nll += batch_nll;
            step += 1;
            bridge.step = step;
        }
        epoch_nll /= static_cast<double>(n);
        if (epoch == 0) epoch_nll_first = epoch_nll;
        if (epoch == cfg.epochs - 1) epoch_nll_last = epoch_nll;
    }

    if (params_checksum(binder) != binder_crc_before || params_checksum(lm) != lm_crc_before) {
        throw InvariantError("train_bridge: frozen parameters drifted during training");
    }
    if (report) {
        report->first_epoch_mean_nll = epoch_nll_first;
        report->last_epoch_mean_nll = epoch_nll_last;
        report->binder_checksum = binder_crc_before;
        report->lm_checksum = lm_crc_before;
    }
    return bridge;
}

}  // namespace pgpt
