#include "pandagpt/langmodel.hpp"

#include <algorithm>
#include <cmath>

#include "pandagpt/synthworld.hpp"

namespace pgpt {

namespace {

std::string block_prefix(int i) { return "lm/block" + std::to_string(i) + "/"; }

Tensor gaussian_tensor(std::vector<int> shape, double sigma, Rng& rng) {
    Tensor t(std::move(shape));
    for (float& v : t.data) v = static_cast<float>(sigma * rng.next_gaussian());
    return t;
}

// Square causal mask: 0 on j <= i, -1e9 above the diagonal. exp underflows to
// exactly 0 there, so future positions cannot perturb past logits even at the
// bit level.
Tensor causal_mask(int t) {
    Tensor m({t, t});
    for (int i = 0; i < t; ++i)
        for (int j = i + 1; j < t; ++j) m.at(i, j) = -1e9f;
    return m;
}

NodeId attn_projection(Graph& g, NodeId x, NodeId w, NodeId lora_a, NodeId lora_b, double scale) {
    NodeId out = g.matmul_nt(x, w);
    if (lora_a >= 0) {
        NodeId low = g.matmul_nt(x, lora_a);          // [T x r]
        NodeId up = g.matmul_nt(low, lora_b);         // [T x d]
        out = g.add(out, g.scale(up, scale));
    }
    return out;
}

}  // namespace

ParamMap lm_init(Rng& rng) {
    ParamMap p;
    Rng r = rng.child("lm-init", 0);
    p["lm/wte"] = gaussian_tensor({kVocabSize, kDModel}, 0.05, r);
    p["lm/wpe"] = gaussian_tensor({kMaxSeq, kDModel}, 0.05, r);
    for (int i = 0; i < kNumBlocks; ++i) {
        const std::string b = block_prefix(i);
        p[b + "attn_q"] = gaussian_tensor({kDModel, kDModel}, 0.125, r);
        p[b + "attn_k"] = gaussian_tensor({kDModel, kDModel}, 0.125, r);
        p[b + "attn_v"] = gaussian_tensor({kDModel, kDModel}, 0.125, r);
        p[b + "attn_o"] = gaussian_tensor({kDModel, kDModel}, 0.125, r);
        p[b + "norm1_g"] = Tensor::full({kDModel}, 1.0f);
        p[b + "norm2_g"] = Tensor::full({kDModel}, 1.0f);
        p[b + "ffn_w1"] = gaussian_tensor({kFfnHidden, kDModel}, 0.125, r);
        p[b + "ffn_w2"] = gaussian_tensor({kDModel, kFfnHidden}, 0.0625, r);
    }
    p["lm/final_norm_g"] = Tensor::full({kDModel}, 1.0f);
    return p;
}

LmLeaves lm_insert_leaves(Graph& g, const ParamMap& lm, bool trainable, const LmLoraView* lora,
                          bool lora_trainable) {
    auto leaf = [&](const std::string& name) {
        auto it = lm.find(name);
        if (it == lm.end()) throw InvariantError("language model parameter missing: " + name);
        return g.input(it->second, trainable);
    };
    LmLeaves out;
    out.wte = leaf("lm/wte");
    out.wpe = leaf("lm/wpe");
    out.final_g = leaf("lm/final_norm_g");
    for (int i = 0; i < kNumBlocks; ++i) {
        const std::string b = block_prefix(i);
        auto& blk = out.blocks[static_cast<size_t>(i)];
        blk.wq = leaf(b + "attn_q");
        blk.wk = leaf(b + "attn_k");
        blk.wv = leaf(b + "attn_v");
        blk.wo = leaf(b + "attn_o");
        blk.n1g = leaf(b + "norm1_g");
        blk.n2g = leaf(b + "norm2_g");
        blk.w1 = leaf(b + "ffn_w1");
        blk.w2 = leaf(b + "ffn_w2");
        if (lora) {
            const AttnLora& lq = lora->q[static_cast<size_t>(i)];
            const AttnLora& lv = lora->v[static_cast<size_t>(i)];
            if (lq.A) {
                blk.q_a = g.input(*lq.A, lora_trainable);
                blk.q_b = g.input(*lq.B, lora_trainable);
                blk.v_a = g.input(*lv.A, lora_trainable);
                blk.v_b = g.input(*lv.B, lora_trainable);
                blk.lora_scale = lq.scale;
            }
        }
    }
    return out;
}

NodeId lm_forward_graph(Graph& g, const LmLeaves& leaves, NodeId emb_rows) {
    const Tensor& emb = g.value(emb_rows);
    if (emb.ndim() != 2 || emb.cols() != kDModel) {
        throw ShapeError("lm_forward: expected [T x " + std::to_string(kDModel) + "], got " + emb.shape_str());
    }
    const int t = emb.rows();
    if (t > kMaxSeq) {
        throw ShapeError("lm_forward: sequence length " + std::to_string(t) + " exceeds max_seq " +
                         std::to_string(kMaxSeq));
    }

    NodeId x = g.add(emb_rows, g.slice_rows(leaves.wpe, 0, t));
    NodeId mask = g.constant(causal_mask(t));
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(kHeadDim));

    for (const auto& blk : leaves.blocks) {
        NodeId h = g.rmsnorm_rows(x, blk.n1g);
        NodeId q = attn_projection(g, h, blk.wq, blk.q_a, blk.q_b, blk.lora_scale);
        NodeId k = g.matmul_nt(h, blk.wk);
        NodeId v = attn_projection(g, h, blk.wv, blk.v_a, blk.v_b, blk.lora_scale);

        std::vector<NodeId> head_ctx;
        head_ctx.reserve(kNumHeads);
        for (int hh = 0; hh < kNumHeads; ++hh) {
            const int c0 = hh * kHeadDim;
            NodeId qh = g.slice_cols(q, c0, kHeadDim);
            NodeId kh = g.slice_cols(k, c0, kHeadDim);
            NodeId vh = g.slice_cols(v, c0, kHeadDim);
            NodeId scores = g.add(g.scale(g.matmul_nt(qh, kh), inv_sqrt_hd), mask);
            NodeId probs = g.softmax_rows(scores);
            head_ctx.push_back(g.matmul(probs, vh));
        }
        NodeId ctx = g.concat_cols(head_ctx);
        x = g.add(x, g.matmul_nt(ctx, blk.wo));

        NodeId h2 = g.rmsnorm_rows(x, blk.n2g);
        NodeId ff = g.matmul_nt(g.gelu(g.matmul_nt(h2, blk.w1)), blk.w2);
        x = g.add(x, ff);
    }

    NodeId final_h = g.rmsnorm_rows(x, leaves.final_g);
    return g.matmul_nt(final_h, leaves.wte);  // tied head
}

Tensor lm_forward(const ParamMap& lm, const Tensor& emb, const LmLoraView* lora) {
    Graph g;
    LmLeaves leaves = lm_insert_leaves(g, lm, false, lora, false);
    NodeId logits = lm_forward_graph(g, leaves, g.constant(emb));
    return g.value(logits);
}

std::vector<int> lm_generate(const ParamMap& lm, const Tensor& prefix_rows,
                             const std::vector<int>& prompt, int max_new, const LmLoraView* lora,
                             const float* logit_bias) {
    const int p_rows = prefix_rows.data.empty() ? 0 : prefix_rows.rows();
    if (p_rows > 0 && (prefix_rows.ndim() != 2 || prefix_rows.cols() != kDModel)) {
        throw ShapeError("lm_generate: prefix rows must be [P x " + std::to_string(kDModel) + "], got " +
                         prefix_rows.shape_str());
    }
    if (p_rows + static_cast<int>(prompt.size()) + max_new > kMaxSeq) {
        throw ShapeError("lm_generate: prefix " + std::to_string(p_rows) + " + prompt " +
                         std::to_string(prompt.size()) + " + max_new " + std::to_string(max_new) +
                         " exceeds max_seq " + std::to_string(kMaxSeq));
    }
    if (p_rows + prompt.size() == 0) throw ShapeError("lm_generate: empty input");

    std::vector<int> tokens = prompt;
    std::vector<int> out;
    for (int step = 0; step < max_new; ++step) {
        Graph g;
        LmLeaves leaves = lm_insert_leaves(g, lm, false, lora, false);
        std::vector<NodeId> parts;
        if (p_rows > 0) parts.push_back(g.constant(prefix_rows));
        if (!tokens.empty()) parts.push_back(g.gather_rows(leaves.wte, tokens));
        NodeId emb = parts.size() == 1 ? parts[0] : g.concat_rows(parts);
        NodeId logits = lm_forward_graph(g, leaves, emb);
        const Tensor& lg = g.value(logits);
        const int last = lg.rows() - 1;
        int best = 0;
        float best_v = lg.at(last, 0) + (logit_bias ? logit_bias[0] : 0.0f);
        for (int j = 1; j < kVocabSize; ++j) {
            const float v = lg.at(last, j) + (logit_bias ? logit_bias[j] : 0.0f);
            if (v > best_v) {
                best_v = v;
                best = j;
            }
        }
        if (best == EOS) break;
        out.push_back(best);
        tokens.push_back(best);
    }
    return out;
}

namespace {

void append_turns(std::vector<int>& doc, const Conversation& conv) {
    for (const Turn& turn : conv.turns) {
        doc.push_back(HUMAN);
        doc.insert(doc.end(), turn.instruction.begin(), turn.instruction.end());
        doc.push_back(ASSISTANT);
        doc.insert(doc.end(), turn.response.begin(), turn.response.end());
        doc.push_back(EOS);
    }
}

}  // namespace

std::vector<std::vector<int>> make_text_corpus(int n, Rng rng) {
    if (n <= 0) throw UsageError("make_text_corpus: size must be positive");
    std::vector<std::vector<int>> docs(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        Rng r = rng.child("corpus", static_cast<uint64_t>(i));
        const ConceptScene scene = sample_scene(r);
        std::vector<int> doc;
        const double kind = r.next_double();
        if (kind < 0.15) {
            // Plain caption sentence.
            doc.push_back(BOS);
            const std::vector<int> cap = render_caption(scene);
            doc.insert(doc.end(), cap.begin(), cap.end());
            doc.push_back(EOS);
        } else if (kind < 0.3) {
            // Ungrounded conversation.
            doc.push_back(BOS);
            append_turns(doc, make_conversation(scene, r.next_int(kNumTemplates), r));
        } else if (kind < 0.8) {
            // Grounded conversation: the scene's words sit between the
            // embedding markers and the answers restate them. This teaches the
            // decoder an in-context reading circuit for the span the soft
            // prefix later occupies, so the docs use the same front layout as
            // the grafted sequences (marker first, no BOS). Span word order is
            // shuffled so the circuit keys on content, not slot positions —
            // one soft vector will stand in for the whole span.
            doc.push_back(EMB_BEGIN);
            const int attr_tok = Vocab::attribute_token(scene.attribute_id);
            const int obj_tok = Vocab::object_token(scene.object_id);
            if (r.next_double() < 0.5) {
                doc.push_back(attr_tok);
                doc.push_back(obj_tok);
            } else {
                doc.push_back(obj_tok);
                doc.push_back(attr_tok);
            }
            doc.push_back(EMB_END);
            append_turns(doc, make_conversation(scene, r.next_int(kNumTemplates), r));
        } else {
            // Grounded two-scene span teaching the "X and Y" answer form.
            ConceptScene other = sample_scene(r);
            while (other.object_id == scene.object_id) other = sample_scene(r);
            doc.push_back(EMB_BEGIN);
            doc.push_back(Vocab::attribute_token(scene.attribute_id));
            doc.push_back(Vocab::object_token(scene.object_id));
            doc.push_back(Vocab::attribute_token(other.attribute_id));
            doc.push_back(Vocab::object_token(other.object_id));
            doc.push_back(EMB_END);
            append_turns(doc, make_composed_conversation(scene, other));
        }
        docs[static_cast<size_t>(i)] = std::move(doc);
    }
    return docs;
}

namespace {

// Sum of next-token NLL and predicted-token count for one document.
std::pair<double, int64_t> doc_nll(const ParamMap& lm, const std::vector<int>& doc) {
    const int t = static_cast<int>(doc.size());
    if (t < 2) return {0.0, 0};
    Graph g;
    LmLeaves leaves = lm_insert_leaves(g, lm, false);
    std::vector<int> inputs(doc.begin(), doc.end() - 1);
    std::vector<int> targets(doc.begin() + 1, doc.end());
    NodeId emb = g.gather_rows(leaves.wte, inputs);
    NodeId logits = lm_forward_graph(g, leaves, emb);
    NodeId loss = g.masked_cross_entropy(logits, targets, std::vector<uint8_t>(targets.size(), 1));
    return {g.value_f64(loss) * static_cast<double>(targets.size()),
            static_cast<int64_t>(targets.size())};
}

}  // namespace

double lm_perplexity(const ParamMap& lm, const std::vector<std::vector<int>>& docs) {
    double total = 0.0;
    int64_t count = 0;
    for (const auto& doc : docs) {
        auto [nll, n] = doc_nll(lm, doc);
        total += nll;
        count += n;
    }
    if (count == 0) throw UsageError("lm_perplexity: no predicted tokens");
    return std::exp(total / static_cast<double>(count));
}

ParamMap pretrain_lm(const std::vector<std::vector<int>>& corpus, const LmPretrainConfig& cfg,
                     LmPretrainReport* report) {
    if (corpus.empty()) throw UsageError("pretrain_lm: empty corpus");
    Rng rng(cfg.seed);
    ParamMap params = lm_init(rng);

    const int n_val = std::max(1, static_cast<int>(static_cast<double>(corpus.size()) * cfg.val_fraction));
    const int n_train = static_cast<int>(corpus.size()) - n_val;
    if (n_train <= 0) throw UsageError("pretrain_lm: corpus too small for a validation split");
    std::vector<std::vector<int>> val_docs(corpus.end() - n_val, corpus.end());

    if (report) {
        report->param_total = param_count(params);
        report->untrained_val_perplexity = lm_perplexity(params, val_docs);
        report->losses.clear();
    }

    // Fixed visitation order over the training slice, reshuffled per pass.
    std::vector<int> order(static_cast<size_t>(n_train));
    for (int i = 0; i < n_train; ++i) order[static_cast<size_t>(i)] = i;
    Rng shuffle_rng = rng.child("epoch-shuffle", 0);
    auto reshuffle = [&]() {
        for (int i = n_train - 1; i > 0; --i) {
            const int j = shuffle_rng.next_int(i + 1);
            std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
        }
    };
    reshuffle();

    AdamState opt;
    opt.lr = cfg.lr;
    int cursor = 0;
    for (int step = 0; step < cfg.steps; ++step) {
        ParamMap grads;
        double batch_loss = 0.0;
        for (int b = 0; b < cfg.batch; ++b) {
            if (cursor == n_train) {
                cursor = 0;
                reshuffle();
            }
            const std::vector<int>& doc = corpus[static_cast<size_t>(order[static_cast<size_t>(cursor++)])];
            if (doc.size() < 2) continue;
            Graph g;
            LmLeaves leaves = lm_insert_leaves(g, params, true);
            std::vector<int> inputs(doc.begin(), doc.end() - 1);
            std::vector<int> targets(doc.begin() + 1, doc.end());
            NodeId emb = g.gather_rows(leaves.wte, inputs);
            NodeId logits = lm_forward_graph(g, leaves, emb);
            NodeId loss = g.masked_cross_entropy(logits, targets, std::vector<uint8_t>(targets.size(), 1));
            g.backward(loss);
            batch_loss += g.value_f64(loss);

            auto accum = [&](const std::string& name, NodeId leaf) {
                const Tensor& grad = g.grad(leaf);
                Tensor& acc = grads.try_emplace(name, Tensor::zeros(grad.shape)).first->second;
                for (size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += grad.data[i];
            };
            accum("lm/wte", leaves.wte);
            accum("lm/wpe", leaves.wpe);
            accum("lm/final_norm_g", leaves.final_g);
            for (int i = 0; i < kNumBlocks; ++i) {
                const std::string bp = block_prefix(i);
                const auto& blk = leaves.blocks[static_cast<size_t>(i)];
                accum(bp + "attn_q", blk.wq);
                accum(bp + "attn_k", blk.wk);
                accum(bp + "attn_v", blk.wv);
                accum(bp + "attn_o", blk.wo);
                accum(bp + "norm1_g", blk.n1g);
                accum(bp + "norm2_g", blk.n2g);
                accum(bp + "ffn_w1", blk.w1);
                accum(bp + "ffn_w2", blk.w2);
            }
        }
        const double inv_batch = 1.0 / static_cast<double>(cfg.batch);
        for (auto& [name, g2] : grads)
            for (float& v : g2.data) v = static_cast<float>(static_cast<double>(v) * inv_batch);
        adam_step(params, grads, opt, cfg.lr);
        if (report) report->losses.push_back(batch_loss * inv_batch);
    }

    if (report) report->val_perplexity = lm_perplexity(params, val_docs);
    return params;
}

}  // namespace pgpt
