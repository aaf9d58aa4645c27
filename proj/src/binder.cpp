#include "pandagpt/binder.hpp"

#include <cmath>

#include "pandagpt/vocab.hpp"

namespace pgpt {

namespace {

std::string mod_prefix(Modality m) { return std::string("binder/") + modality_name(m) + "/"; }

Tensor xavier(std::vector<int> shape, Rng& rng) {
    const double sigma = 1.0 / std::sqrt(static_cast<double>(shape.at(1)));
    Tensor t(std::move(shape));
    for (float& v : t.data) v = static_cast<float>(sigma * rng.next_gaussian());
    return t;
}

struct EncoderLeaves {
    NodeId w1, b1, w2, b2;
};

EncoderLeaves insert_mlp(Graph& g, const ParamMap& p, const std::string& prefix, bool trainable) {
    auto leaf = [&](const char* name) {
        auto it = p.find(prefix + name);
        if (it == p.end()) throw InvariantError("binder parameter missing: " + prefix + name);
        return g.input(it->second, trainable);
    };
    return {leaf("w1"), leaf("b1"), leaf("w2"), leaf("b2")};
}

// rows [B x d_in] -> unit-norm [B x d_e]
NodeId mlp_encode(Graph& g, const EncoderLeaves& e, NodeId rows) {
    NodeId h = g.tanh_act(g.add_bias(g.matmul_nt(rows, e.w1), e.b1));
    NodeId z = g.add_bias(g.matmul_nt(h, e.w2), e.b2);
    return g.l2normalize_rows(z);
}

NodeId text_pool(Graph& g, NodeId emb_table, const std::vector<std::vector<int>>& token_rows) {
    std::vector<NodeId> pooled;
    pooled.reserve(token_rows.size());
    for (const auto& ids : token_rows) {
        if (ids.empty()) throw ShapeError("binder text encoder: empty token sequence");
        pooled.push_back(g.mean_rows(g.gather_rows(emb_table, ids)));
    }
    return pooled.size() == 1 ? pooled[0] : g.concat_rows(pooled);
}

}  // namespace

namespace {
// The output layer sits behind an L2 normalization, so a small init both
// shortens the distance to any aligned solution and amplifies early
// gradients. The 300-step budget is tight for the round-robin sides; this is
// what lets them converge inside it.
constexpr double kOutputInitSigma = 0.02;

Tensor small_init(std::vector<int> shape, Rng& rng) {
    Tensor t(std::move(shape));
    for (float& v : t.data) v = static_cast<float>(kOutputInitSigma * rng.next_gaussian());
    return t;
}
}  // namespace

ParamMap binder_init(Rng& rng) {
    ParamMap p;
    Rng r = rng.child("binder-init", 0);
    for (int mi = 0; mi < kNumModalities; ++mi) {
        const Modality m = static_cast<Modality>(mi);
        const std::string prefix = mod_prefix(m);
        p[prefix + "w1"] = xavier({kBinderHidden, modality_dim(m)}, r);
        p[prefix + "b1"] = Tensor::zeros({kBinderHidden});
        p[prefix + "w2"] = small_init({kEmbedDim, kBinderHidden}, r);
        p[prefix + "b2"] = Tensor::zeros({kEmbedDim});
    }
    p["binder/text/emb"] = xavier({kVocabSize, kTextEmbedDim}, r);
    p["binder/text/w1"] = xavier({kBinderHidden, kTextEmbedDim}, r);
    p["binder/text/b1"] = Tensor::zeros({kBinderHidden});
    p["binder/text/w2"] = small_init({kEmbedDim, kBinderHidden}, r);
    p["binder/text/b2"] = Tensor::zeros({kEmbedDim});
    return p;
}

JointEmbedding binder_encode(const ParamMap& binder, const ModalitySample& sample) {
    const int d = modality_dim(sample.modality);
    if (sample.observation.ndim() != 1 || sample.observation.shape[0] != d) {
        throw ShapeError(std::string("binder_encode: ") + modality_name(sample.modality) +
                         " expects [" + std::to_string(d) + "], got " + sample.observation.shape_str());
    }
    Graph g;
    EncoderLeaves e = insert_mlp(g, binder, mod_prefix(sample.modality), false);
    Tensor row({1, d});
    row.data = sample.observation.data;
    NodeId z = mlp_encode(g, e, g.constant(std::move(row)));
    JointEmbedding out;
    out.vec = Tensor({kEmbedDim});
    out.vec.data = g.value(z).data;
    out.source = modality_name(sample.modality);
    return out;
}

JointEmbedding binder_encode_text(const ParamMap& binder, const std::vector<int>& tokens) {
    Graph g;
    auto it = binder.find("binder/text/emb");
    if (it == binder.end()) throw InvariantError("binder parameter missing: binder/text/emb");
    NodeId table = g.constant(it->second);
    EncoderLeaves e = insert_mlp(g, binder, "binder/text/", false);
    NodeId z = mlp_encode(g, e, text_pool(g, table, {tokens}));
    JointEmbedding out;
    out.vec = Tensor({kEmbedDim});
    out.vec.data = g.value(z).data;
    out.source = "text";
    return out;
}

NodeId info_nce_graph(Graph& g, NodeId anchors, NodeId others, double tau) {
    const Tensor& a = g.value(anchors);
    const Tensor& b = g.value(others);
    if (a.ndim() != 2 || b.ndim() != 2 || !a.same_shape(b)) {
        throw ShapeError("info_nce: expected matching [B x d] inputs, got " + a.shape_str() + " vs " +
                         b.shape_str());
    }
    if (a.rows() < 1) throw ShapeError("info_nce: batch must be non-empty");
    if (!(tau > 0.0)) throw ShapeError("info_nce: temperature must be positive");
    for (const Tensor* t : {&a, &b}) {
        for (int i = 0; i < t->rows(); ++i) {
            double ss = 0.0;
            for (int j = 0; j < t->cols(); ++j) ss += static_cast<double>(t->at(i, j)) * t->at(i, j);
            if (std::abs(std::sqrt(ss) - 1.0) > 1e-3) {
                throw InvariantError("info_nce: row " + std::to_string(i) + " is not unit-norm");
            }
        }
    }
    const int batch = a.rows();
    NodeId sim = g.scale(g.matmul_nt(anchors, others), 1.0 / tau);
    std::vector<int> iota(static_cast<size_t>(batch));
    for (int i = 0; i < batch; ++i) iota[static_cast<size_t>(i)] = i;
    std::vector<uint8_t> ones(static_cast<size_t>(batch), 1);
    NodeId row_ce = g.masked_cross_entropy(sim, iota, ones);
    NodeId col_ce = g.masked_cross_entropy(g.transpose(sim), iota, ones);
    return g.scale(g.add(row_ce, col_ce), 0.5);
}

double retrieval_at_1(const std::vector<JointEmbedding>& queries,
                      const std::vector<JointEmbedding>& gallery, const std::vector<int>& truth) {
    if (queries.empty() || queries.size() != gallery.size() || queries.size() != truth.size()) {
        throw ShapeError("retrieval_at_1: queries/gallery/truth lengths differ");
    }
    int hits = 0;
    for (size_t i = 0; i < queries.size(); ++i) {
        int best = 0;
        double best_v = -2.0;
        for (size_t j = 0; j < gallery.size(); ++j) {
            double dot = 0.0;
            for (int k = 0; k < kEmbedDim; ++k)
                dot += static_cast<double>(queries[i].vec.at(k)) * static_cast<double>(gallery[j].vec.at(k));
            if (dot > best_v) {
                best_v = dot;
                best = static_cast<int>(j);
            }
        }
        if (best == truth[i]) hits += 1;
    }
    return static_cast<double>(hits) / static_cast<double>(queries.size());
}

BinderPool make_binder_pool(const World& world, int n_scenes, Rng rng) {
    if (n_scenes < kNumObjects * kNumAttributes) {
        throw UsageError("binder pool must cover all " + std::to_string(kNumObjects * kNumAttributes) +
                         " concepts; got size " + std::to_string(n_scenes));
    }
    BinderPool pool;
    pool.present.fill(true);
    Rng r = rng.child("binder-pool", 0);
    for (int i = 0; i < n_scenes; ++i) {
        ConceptScene s;
        if (i < kNumObjects * kNumAttributes) {
            s.object_id = i % kNumObjects;       // full concept coverage first
            s.attribute_id = i / kNumObjects;
            s.scene_seed = r.next_u64();
        } else {
            s = sample_scene(r);
        }
        std::array<Tensor, kNumModalities> obs;
        for (int mi = 0; mi < kNumModalities; ++mi) {
            obs[static_cast<size_t>(mi)] =
                render_modality(world, s, static_cast<Modality>(mi), r).observation;
        }
        pool.scenes.push_back(s);
        pool.observations.push_back(std::move(obs));
        pool.captions.push_back(render_caption(s));
    }
    return pool;
}

int64_t PairAudit::non_anchor_pairs() const {
    int64_t total = 0;
    const int anchor = static_cast<int>(Modality::img);
    for (int i = 0; i < 7; ++i) {
        for (int j = 0; j < 7; ++j) {
            if (i == anchor || j == anchor) continue;
            total += counts[static_cast<size_t>(i)][static_cast<size_t>(j)];
        }
    }
    return total;
}

ParamMap train_binder(const BinderPool& pool, const BinderTrainConfig& cfg, BinderTrainReport* report) {
    for (int mi = 0; mi < kNumModalities; ++mi) {
        if (!pool.present[static_cast<size_t>(mi)]) {
            throw UsageError(std::string("train_binder: dataset lacks modality ") +
                             modality_name(static_cast<Modality>(mi)));
        }
    }
    if (pool.scenes.empty()) throw UsageError("train_binder: empty scene pool");

    Rng rng(cfg.seed);
    ParamMap params = binder_init(rng);
    AdamState opt;
    opt.lr = cfg.lr;
    opt.beta2 = cfg.beta2;
    Rng batch_rng = rng.child("binder-batches", 0);

    // Pair type per step, round-robin: text, vid, aud, dep, thm, imu.
    const std::array<int, 6> other_side = {6, 1, 2, 3, 4, 5};

    for (int step = 0; step < cfg.steps; ++step) {
        const int other = other_side[static_cast<size_t>(step % 6)];

        // Distinct concepts within a batch keep in-batch negatives honest.
        std::vector<int> indices;
        std::vector<int> seen_concepts;
        const int want = std::min<int>(cfg.batch, kNumObjects * kNumAttributes);
        while (static_cast<int>(indices.size()) < want) {
            const int cand = batch_rng.next_int(static_cast<int>(pool.scenes.size()));
            const int concept_id = pool.scenes[static_cast<size_t>(cand)].object_id * kNumAttributes +
                                   pool.scenes[static_cast<size_t>(cand)].attribute_id;
            bool dup = false;
            for (int c : seen_concepts) dup = dup || (c == concept_id);
            if (dup) continue;
            seen_concepts.push_back(concept_id);
            indices.push_back(cand);
        }
        const int batch = static_cast<int>(indices.size());

        Graph g;
        EncoderLeaves img_leaves = insert_mlp(g, params, mod_prefix(Modality::img), true);

        Tensor img_rows({batch, modality_dim(Modality::img)});
        for (int i = 0; i < batch; ++i) {
            const Tensor& o =
                pool.observations[static_cast<size_t>(indices[static_cast<size_t>(i)])][0];
            for (int j = 0; j < img_rows.cols(); ++j) img_rows.at(i, j) = o.at(j);
        }
        NodeId za = mlp_encode(g, img_leaves, g.constant(std::move(img_rows)));

        NodeId zb;
        EncoderLeaves other_leaves{};
        NodeId text_table = -1;
        if (other == 6) {
            auto it = params.find("binder/text/emb");
            text_table = g.input(it->second, true);
            other_leaves = insert_mlp(g, params, "binder/text/", true);
            std::vector<std::vector<int>> caps;
            caps.reserve(static_cast<size_t>(batch));
            for (int i = 0; i < batch; ++i)
                caps.push_back(pool.captions[static_cast<size_t>(indices[static_cast<size_t>(i)])]);
            zb = mlp_encode(g, other_leaves, text_pool(g, text_table, caps));
        } else {
            const Modality m = static_cast<Modality>(other);
            other_leaves = insert_mlp(g, params, mod_prefix(m), true);
            Tensor rows({batch, modality_dim(m)});
            for (int i = 0; i < batch; ++i) {
                const Tensor& o = pool.observations[static_cast<size_t>(
                    indices[static_cast<size_t>(i)])][static_cast<size_t>(other)];
                for (int j = 0; j < rows.cols(); ++j) rows.at(i, j) = o.at(j);
            }
            zb = mlp_encode(g, other_leaves, g.constant(std::move(rows)));
        }

        NodeId loss = info_nce_graph(g, za, zb, cfg.tau);
        g.backward(loss);
        if (report) {
            report->losses.push_back(g.value_f64(loss));
            report->audit.counts[static_cast<size_t>(Modality::img)][static_cast<size_t>(other)] += batch;
        }

        ParamMap grads;
        auto take = [&](const std::string& name, NodeId leaf) { grads[name] = g.grad(leaf); };
        take(mod_prefix(Modality::img) + "w1", img_leaves.w1);
        take(mod_prefix(Modality::img) + "b1", img_leaves.b1);
        take(mod_prefix(Modality::img) + "w2", img_leaves.w2);
        take(mod_prefix(Modality::img) + "b2", img_leaves.b2);
        const std::string other_prefix = (other == 6) ? "binder/text/" : mod_prefix(static_cast<Modality>(other));
        take(other_prefix + "w1", other_leaves.w1);
        take(other_prefix + "b1", other_leaves.b1);
        take(other_prefix + "w2", other_leaves.w2);
        take(other_prefix + "b2", other_leaves.b2);
        if (text_table >= 0) take("binder/text/emb", text_table);

        adam_step(params, grads, opt, cfg.lr);
    }

    return params;
}

}  // namespace pgpt
