#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <set>

#include "pandagpt/checkpoint.hpp"
#include "pandagpt/synthworld.hpp"
#include "pandagpt/vocab.hpp"
#include "test_util.hpp"

using namespace pgpt;

namespace {

std::string temp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

// Parses a response back into concept words and checks them against the
// grounding scene(s) — the ground-truth consistency oracle.
bool consistent_with_scenes(const std::vector<int>& response, const std::vector<ConceptScene>& scenes) {
    for (int id : response) {
        if (Vocab::is_object_token(id)) {
            bool ok = false;
            for (const auto& s : scenes) ok = ok || Vocab::object_id_of(id) == s.object_id;
            if (!ok) return false;
        }
        if (Vocab::is_attribute_token(id)) {
            bool ok = false;
            for (const auto& s : scenes) ok = ok || Vocab::attribute_id_of(id) == s.attribute_id;
            if (!ok) return false;
        }
    }
    return true;
}

}  // namespace

TEST_CASE("vocabulary: 64 entries, bijective, specials in place") {
    const Vocab& v = Vocab::instance();
    std::set<std::string> words;
    for (int i = 0; i < kVocabSize; ++i) {
        words.insert(v.word(i));
        CHECK(v.id(v.word(i)) == i);
    }
    CHECK(words.size() == kVocabSize);
    CHECK(v.id("PAD") == PAD);
    CHECK(v.id("ASSISTANT") == ASSISTANT);
    CHECK(v.id("zzz") == UNK);
    CHECK(v.detokenize(v.tokenize("a red box .")) == "a red box .");
}

TEST_CASE("shipped vocabulary table matches the builtin") {
    // data/vocab.tsv is the frozen table; a drift here is a format break.
    const std::string shipped = read_file(std::string(PGPT_SOURCE_DIR) + "/data/vocab.tsv");
    CHECK(shipped == Vocab::instance().render_table());
}

TEST_CASE("sample_scene: determinism, ranges, uniformity") {
    Rng a(7), b(7);
    const ConceptScene s1 = sample_scene(a);
    const ConceptScene s2 = sample_scene(b);
    CHECK(s1.object_id == s2.object_id);
    CHECK(s1.attribute_id == s2.attribute_id);
    CHECK(s1.scene_seed == s2.scene_seed);

    Rng rng(11);
    std::array<int, kNumObjects> counts{};
    for (int i = 0; i < 12000; ++i) {
        const ConceptScene s = sample_scene(rng);
        CHECK(s.object_id >= 0);
        CHECK(s.object_id < kNumObjects);
        CHECK(s.attribute_id >= 0);
        CHECK(s.attribute_id < kNumAttributes);
        counts[static_cast<size_t>(s.object_id)] += 1;
    }
    for (int c : counts) {
        CHECK(c > 800);   // within ±20% of 1000
        CHECK(c < 1200);
    }
}

TEST_CASE("render_modality: determinism, dimensions, nearest-prototype recovery") {
    const World world(42);
    Rng rng(5);
    const ConceptScene scene = sample_scene(rng);

    Rng n1(99), n2(99);
    const ModalitySample r1 = render_modality(world, scene, Modality::aud, n1);
    const ModalitySample r2 = render_modality(world, scene, Modality::aud, n2);
    CHECK(testutil::bitwise_equal(r1.observation, r2.observation));

    for (int mi = 0; mi < kNumModalities; ++mi) {
        const Modality m = static_cast<Modality>(mi);
        Rng nr(13);
        const ModalitySample s = render_modality(world, scene, m, nr);
        CHECK(s.observation.shape[0] == kModalityDims[static_cast<size_t>(mi)]);
    }

    // Nearest-prototype classification over 1000 renders.
    Rng noise(21);
    Rng pick(22);
    int correct = 0;
    const int trials = 1000;
    for (int i = 0; i < trials; ++i) {
        ConceptScene s = sample_scene(pick);
        const Modality m = static_cast<Modality>(pick.next_int(kNumModalities));
        const ModalitySample obs = render_modality(world, s, m, noise);
        double best = 1e300;
        int best_obj = -1, best_attr = -1;
        for (int obj = 0; obj < kNumObjects; ++obj) {
            for (int attr = 0; attr < kNumAttributes; ++attr) {
                const Tensor proto = world.prototype(m, obj, attr);
                double d2 = 0.0;
                for (int j = 0; j < proto.shape[0]; ++j) {
                    const double d = static_cast<double>(obs.observation.at(j)) - proto.at(j);
                    d2 += d * d;
                }
                if (d2 < best) {
                    best = d2;
                    best_obj = obj;
                    best_attr = attr;
                }
            }
        }
        if (best_obj == s.object_id && best_attr == s.attribute_id) correct += 1;
    }
    CHECK(static_cast<double>(correct) / trials >= 0.99);
}

TEST_CASE("prototype map is injective with margin above the noise scale") {
    const World world(42);
    for (int mi = 0; mi < kNumModalities; ++mi) {
        const Modality m = static_cast<Modality>(mi);
        std::vector<Tensor> protos;
        for (int obj = 0; obj < kNumObjects; ++obj)
            for (int attr = 0; attr < kNumAttributes; ++attr) protos.push_back(world.prototype(m, obj, attr));
        double min_dist = 1e300;
        for (size_t i = 0; i < protos.size(); ++i) {
            for (size_t j = i + 1; j < protos.size(); ++j) {
                double d2 = 0.0;
                for (int k = 0; k < protos[i].shape[0]; ++k) {
                    const double d = static_cast<double>(protos[i].at(k)) - protos[j].at(k);
                    d2 += d * d;
                }
                min_dist = std::min(min_dist, std::sqrt(d2));
            }
        }
        CHECK(min_dist > 10.0 * kRenderNoiseSigma);
    }
}

TEST_CASE("render_caption: template length, round trip, 72 distinct sequences") {
    ConceptScene s;
    s.object_id = 3;
    s.attribute_id = 1;
    const std::vector<int> cap = render_caption(s);
    CHECK(cap.size() == 4);
    CHECK(Vocab::instance().detokenize(cap) == "a blue book .");

    std::set<std::vector<int>> all;
    for (int obj = 0; obj < kNumObjects; ++obj) {
        for (int attr = 0; attr < kNumAttributes; ++attr) {
            ConceptScene sc;
            sc.object_id = obj;
            sc.attribute_id = attr;
            all.insert(render_caption(sc));
        }
    }
    CHECK(all.size() == 72);
}

TEST_CASE("conversation templates") {
    Rng rng(3);
    ConceptScene s;
    s.object_id = 5;
    s.attribute_id = 2;

    Conversation t0 = make_conversation(s, 0, rng);
    CHECK(t0.turns.size() == 1);
    CHECK(t0.turns[0].response == render_caption(s));

    Conversation t1 = make_conversation(s, 1, rng);
    CHECK(t1.turns.size() == 2);
    int attr_words = 0;
    for (int id : t1.turns[1].response)
        if (Vocab::is_attribute_token(id)) attr_words += 1;
    CHECK(attr_words == 1);
    CHECK(std::count(t1.turns[1].response.begin(), t1.turns[1].response.end(),
                     Vocab::attribute_token(s.attribute_id)) == 1);

    CHECK_THROWS_AS(make_conversation(s, 99, rng), UsageError);

    // No template string produces UNK.
    for (int tid = 0; tid < kNumTemplates; ++tid) {
        Rng r2(17);
        const Conversation conv = make_conversation(s, tid, r2);
        for (const Turn& turn : conv.turns) {
            for (int id : turn.instruction) CHECK(id != UNK);
            for (int id : turn.response) CHECK(id != UNK);
        }
    }

    // 500 generated conversations all satisfy the parse-and-compare oracle.
    Rng r3(23);
    for (int i = 0; i < 500; ++i) {
        const ConceptScene sc = sample_scene(r3);
        const Conversation conv = make_conversation(sc, r3.next_int(kNumTemplates), r3);
        for (const Turn& turn : conv.turns) CHECK(consistent_with_scenes(turn.response, {sc}));
    }

    // Composed conversations mention exactly the two scenes' concepts.
    Rng r4(29);
    const ConceptScene a = sample_scene(r4);
    ConceptScene b = sample_scene(r4);
    while (b.object_id == a.object_id) b = sample_scene(r4);
    const Conversation comp = make_composed_conversation(a, b);
    CHECK(consistent_with_scenes(comp.turns[0].response, {a, b}));
    const auto& resp = comp.turns[0].response;
    CHECK(std::count(resp.begin(), resp.end(), Vocab::object_token(a.object_id)) == 1);
    CHECK(std::count(resp.begin(), resp.end(), Vocab::object_token(b.object_id)) == 1);
}

TEST_CASE("gen_dataset: determinism, per-index reseeding, round trip") {
    const World world(42);
    GenDataConfig cfg;
    cfg.seed = 42;
    cfg.count = 64;
    cfg.compose_fraction = 0.25;
    cfg.out_path = temp_path("pgpt_test_data_a.txt");

    GenDataConfig bad = cfg;
    bad.count = 0;
    CHECK_THROWS_AS(gen_dataset(world, bad), UsageError);

    gen_dataset(world, cfg);
    const std::string bytes_a = read_file(cfg.out_path);
    cfg.out_path = temp_path("pgpt_test_data_b.txt");
    gen_dataset(world, cfg);
    const std::string bytes_b = read_file(cfg.out_path);
    CHECK(bytes_a == bytes_b);  // same seed, byte-identical files

    // Record #k regenerated in isolation equals record #k from the full run.
    const std::vector<Conversation> records = parse_dataset(bytes_a);
    CHECK(records.size() == 64);
    for (int k : {0, 7, 63}) {
        const Conversation solo = gen_record(world, cfg, k);
        CHECK(render_record(solo) == render_record(records[static_cast<size_t>(k)]));
    }

    // Round trip: parse(write(records)) == records.
    std::string rendered;
    for (const Conversation& c : records) rendered += render_record(c);
    CHECK(rendered == bytes_a);

    // Responses are derivable from the scene alone (no leakage from observations).
    for (const Conversation& c : records) {
        std::vector<ConceptScene> scenes;
        for (const auto& g : c.grounding) scenes.push_back(g.scene);
        for (const Turn& turn : c.turns) CHECK(consistent_with_scenes(turn.response, scenes));
        if (c.grounding.size() == 2) {
            const Conversation again = make_composed_conversation(scenes[0], scenes[1]);
            CHECK(again.turns[0].response == c.turns[0].response);
        }
    }

    std::filesystem::remove(temp_path("pgpt_test_data_a.txt"));
    std::filesystem::remove(temp_path("pgpt_test_data_b.txt"));
}

TEST_CASE("modality names round-trip and bad names are rejected") {
    for (int mi = 0; mi < kNumModalities; ++mi) {
        const Modality m = static_cast<Modality>(mi);
        CHECK(modality_from_name(modality_name(m)) == m);
    }
    CHECK_THROWS_AS(modality_from_name("smell"), UsageError);
}
