#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <mutex>
#include <sstream>

#include "pandagpt/composer.hpp"
#include "pandagpt/evalkit.hpp"
#include "pandagpt/vocab.hpp"
#include "test_util.hpp"

using namespace pgpt;

namespace {

// Word-scan oracle for concept_accuracy: detokenize, split on spaces, count
// the scene's words and any rival words of the same kind.
ConceptHit word_scan_oracle(const std::vector<int>& response, const ConceptScene& scene) {
    const Vocab& v = Vocab::instance();
    std::stringstream ss(v.detokenize(response));
    std::string word;
    int obj_mine = 0, obj_other = 0, attr_mine = 0, attr_other = 0;
    const std::string my_obj = v.word(Vocab::object_token(scene.object_id));
    const std::string my_attr = v.word(Vocab::attribute_token(scene.attribute_id));
    while (ss >> word) {
        const int id = v.id(word);
        if (Vocab::is_object_token(id)) (word == my_obj ? obj_mine : obj_other) += 1;
        if (Vocab::is_attribute_token(id)) (word == my_attr ? attr_mine : attr_other) += 1;
    }
    return {obj_mine >= 1 && obj_other == 0, attr_mine >= 1 && attr_other == 0};
}

// Small trained stack shared by the evaluation tests.
struct MicroPipeline {
    World world{4242};
    ParamMap binder;
    ParamMap lm;
    BridgeState bridge{};
    std::vector<Conversation> data;
    TrainManifest manifest;
};

const MicroPipeline& micro() {
    static MicroPipeline p = [] {
        MicroPipeline m;
        BinderTrainConfig bcfg;
        bcfg.steps = 90;
        bcfg.seed = 4242;
        m.binder = train_binder(make_binder_pool(m.world, 80, Rng(4242)), bcfg, nullptr);

        LmPretrainConfig lcfg;
        lcfg.steps = 150;
        lcfg.batch = 8;
        lcfg.seed = 4242;
        m.lm = pretrain_lm(make_text_corpus(600, Rng(4242)), lcfg, nullptr);

        GenDataConfig gcfg;
        gcfg.seed = 4242;
        gcfg.count = 64;
        for (int k = 0; k < gcfg.count; ++k) m.data.push_back(gen_record(m.world, gcfg, k));
        m.manifest = manifest_from_records(m.data);

        BridgeTrainConfig tcfg;
        tcfg.epochs = 1;
        tcfg.seed = 4242;
        m.bridge = train_bridge(m.data, m.binder, m.lm, tcfg, nullptr);
        return m;
    }();
    return p;
}

}  // namespace

TEST_CASE("concept_accuracy: exclusivity rule and word-scan oracle") {
    const Vocab& v = Vocab::instance();
    ConceptScene scene;
    scene.object_id = 0;    // box
    scene.attribute_id = 0;  // red

    CHECK(concept_accuracy(v.tokenize("a red box ."), scene).object_hit);
    CHECK(concept_accuracy(v.tokenize("a red box ."), scene).attribute_hit);

    // Two object words: exclusivity fails even though the right one appears.
    const ConceptHit two = concept_accuracy(v.tokenize("a red box and a blue cup"), scene);
    CHECK_FALSE(two.object_hit);
    CHECK_FALSE(two.attribute_hit);

    CHECK_FALSE(concept_accuracy(v.tokenize("yes it is ."), scene).object_hit);
    CHECK(concept_accuracy(v.tokenize("box box"), scene).object_hit);  // repeats of the right word are fine

    // 1000 random responses agree with the oracle.
    Rng rng(3);
    for (int trial = 0; trial < 1000; ++trial) {
        ConceptScene s;
        s.object_id = rng.next_int(kNumObjects);
        s.attribute_id = rng.next_int(kNumAttributes);
        std::vector<int> response;
        const int len = 1 + rng.next_int(10);
        for (int i = 0; i < len; ++i) response.push_back(8 + rng.next_int(56));  // skip specials
        const ConceptHit got = concept_accuracy(response, s);
        const ConceptHit want = word_scan_oracle(response, s);
        CHECK(got.object_hit == want.object_hit);
        CHECK(got.attribute_hit == want.attribute_hit);
    }
}

TEST_CASE("manifest extraction and the zero-shot guard") {
    const MicroPipeline& m = micro();
    CHECK(m.manifest.modalities == std::set<std::string>{"img"});
    CHECK(m.manifest.scene_seeds.size() > 0);

    // img without the in-domain flag is refused; the flag permits it.
    CHECK_THROWS_AS(zero_shot_eval(Modality::img, 4, m.world, m.binder, m.lm, m.bridge, m.manifest,
                                   false, Rng(1)),
                    InvariantError);
    CHECK_NOTHROW(zero_shot_eval(Modality::img, 4, m.world, m.binder, m.lm, m.bridge, m.manifest,
                                 true, Rng(1)));
    // Unseen modalities pass the guard.
    CHECK_NOTHROW(zero_shot_eval(Modality::aud, 4, m.world, m.binder, m.lm, m.bridge, m.manifest,
                                 false, Rng(1)));

    // Same guard applies to composition on both sides.
    CHECK_THROWS_AS(composition_eval(Modality::img, Modality::aud, 4, m.world, m.binder, m.lm,
                                     m.bridge, m.manifest, false, Rng(1)),
                    InvariantError);

    // Results are deterministic given the rng.
    const AccuracyResult a = zero_shot_eval(Modality::dep, 8, m.world, m.binder, m.lm, m.bridge,
                                            m.manifest, false, Rng(9));
    const AccuracyResult b = zero_shot_eval(Modality::dep, 8, m.world, m.binder, m.lm, m.bridge,
                                            m.manifest, false, Rng(9));
    CHECK(a.joint_acc == b.joint_acc);
    CHECK(a.object_acc == b.object_acc);
}

TEST_CASE("composition_eval degenerate self-pair reduces to single-concept mention") {
    const MicroPipeline& m = micro();
    // Composing a sample with itself must mention that object.
    Rng rng(7);
    const ConceptScene scene = sample_scene(rng);
    const ModalitySample s1 = render_modality(m.world, scene, Modality::aud, rng);
    const JointEmbedding h1 = binder_encode(m.binder, s1);
    const JointEmbedding self = compose({h1, h1}, {});
    CHECK(testutil::bitwise_equal(self.vec, h1.vec));
}

TEST_CASE("full_report: completeness and byte-identical reruns") {
    const MicroPipeline& m = micro();
    FullReportConfig cfg;
    cfg.eval_scenes = 6;
    cfg.eval_pairs = 10;
    cfg.holdout = 16;
    cfg.seed = 4242;

    const EvalReport rep = full_report(m.world, m.binder, m.lm, m.bridge, m.manifest, cfg,
                                       {{"config_fingerprint", "deadbeef"}});

    int accuracy_cells = 0, retrieval_rows = 0, composition_rows = 0, ppl_rows = 0;
    for (const auto& row : rep.rows) {
        if (row.metric.rfind("concept_", 0) == 0) accuracy_cells += 1;
        if (row.metric == "retrieval_r1") retrieval_rows += 1;
        if (row.metric == "composition_both_mention") composition_rows += 1;
        if (row.metric == "perplexity") ppl_rows += 1;
        CHECK(row.value >= 0.0);
        if (row.metric != "perplexity") {
            CHECK(row.value <= 1.0);
            CHECK(row.baseline <= 1.0);
        } else {
            CHECK(row.value >= 1.0);
        }
    }
    CHECK(accuracy_cells == 18);       // 6 modalities x 3 columns
    CHECK(retrieval_rows == 21);       // C(7,2) over six modalities + text
    CHECK(composition_rows == 10 + 1);  // C(5,2) unseen pairs + overall
    CHECK(ppl_rows == 1);

    const std::string text = render_report(rep);
    const EvalReport rep2 = full_report(m.world, m.binder, m.lm, m.bridge, m.manifest, cfg,
                                        {{"config_fingerprint", "deadbeef"}});
    CHECK(render_report(rep2) == text);

    // Render format: "# key value" header lines, then metric rows.
    CHECK(text.rfind("# ", 0) == 0);
    CHECK(text.find("concept_joint\taud\t") != std::string::npos);
    CHECK(text.find("retrieval_r1\timg-text\t") != std::string::npos);
}
