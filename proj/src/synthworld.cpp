#include "pandagpt/synthworld.hpp"

#include <cinttypes>
#include <cstdio>
#include <cstring>

#include "pandagpt/checkpoint.hpp"
#include "pandagpt/vocab.hpp"

namespace pgpt {

namespace {

const char* kModalityNames[kNumModalities] = {"img", "vid", "aud", "dep", "thm", "imu"};

std::vector<int> tok(const std::string& text) { return Vocab::instance().tokenize(text); }

std::string obj_word(int object_id) { return Vocab::instance().word(Vocab::object_token(object_id)); }
std::string attr_word(int attribute_id) {
    return Vocab::instance().word(Vocab::attribute_token(attribute_id));
}

void append_f32(std::string& out, float v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
    out += buf;
}

}  // namespace

const char* modality_name(Modality m) { return kModalityNames[static_cast<size_t>(m)]; }

Modality modality_from_name(const std::string& name) {
    for (int i = 0; i < kNumModalities; ++i) {
        if (name == kModalityNames[i]) return static_cast<Modality>(i);
    }
    throw UsageError("unknown modality '" + name + "' (expected img|vid|aud|dep|thm|imu)");
}

int modality_dim(Modality m) { return kModalityDims[static_cast<size_t>(m)]; }

World::World(uint64_t seed) : seed_(seed) {
    Rng base(seed);
    for (int mi = 0; mi < kNumModalities; ++mi) {
        const int d = kModalityDims[static_cast<size_t>(mi)];
        Rng r = base.child(std::string("mixing-") + kModalityNames[mi], 0);
        Tensor g({d, kConceptDim});
        for (float& x : g.data) x = static_cast<float>(0.5 * r.next_gaussian());
        mixing_[static_cast<size_t>(mi)] = std::move(g);
    }
}

Tensor World::prototype(Modality m, int object_id, int attribute_id) const {
    const Tensor& g = mixing(m);
    const int d = modality_dim(m);
    Tensor out({d});
    for (int i = 0; i < d; ++i) {
        out.at(i) = static_cast<float>(static_cast<double>(g.at(i, object_id)) +
                                       static_cast<double>(g.at(i, kNumObjects + attribute_id)));
    }
    return out;
}

ConceptScene sample_scene(Rng& rng) {
    ConceptScene s;
    s.object_id = rng.next_int(kNumObjects);
    s.attribute_id = rng.next_int(kNumAttributes);
    s.scene_seed = rng.next_u64();
    return s;
}

ModalitySample render_modality(const World& world, const ConceptScene& scene, Modality m, Rng& rng) {
    if (scene.object_id < 0 || scene.object_id >= kNumObjects || scene.attribute_id < 0 ||
        scene.attribute_id >= kNumAttributes) {
        throw InvariantError("scene ids out of range");
    }
    const Tensor& g = world.mixing(m);
    const int d = modality_dim(m);
    ModalitySample out;
    out.modality = m;
    out.scene = scene;
    out.observation = Tensor({d});
    for (int i = 0; i < d; ++i) {
        const double clean = static_cast<double>(g.at(i, scene.object_id)) +
                             static_cast<double>(g.at(i, kNumObjects + scene.attribute_id));
        out.observation.at(i) = static_cast<float>(clean + kRenderNoiseSigma * rng.next_gaussian());
    }
    ensure_finite(out.observation, "render_modality");
    return out;
}

std::vector<int> render_caption(const ConceptScene& scene) {
    return tok("a " + attr_word(scene.attribute_id) + " " + obj_word(scene.object_id) + " .");
}

Conversation make_conversation(const ConceptScene& scene, int template_id, Rng& rng) {
    const std::string obj = obj_word(scene.object_id);
    const std::string attr = attr_word(scene.attribute_id);
    Conversation conv;
    switch (template_id) {
        case 0:
            conv.turns.push_back({tok("what is shown ?"), render_caption(scene)});
            break;
        case 1:
            conv.turns.push_back({tok("what is shown ?"), render_caption(scene)});
            conv.turns.push_back({tok("what is its attribute ?"), tok("it is " + attr + " .")});
            break;
        case 2: {
            const int probe = rng.next_int(kNumObjects);
            const std::string lead = (probe == scene.object_id) ? "yes" : "no";
            conv.turns.push_back({tok("is this a " + obj_word(probe) + " ?"),
                                  tok(lead + " this is a " + obj + " .")});
            break;
        }
        case 3:
            conv.turns.push_back({tok("please describe the scene ."),
                                  tok("there is a " + attr + " " + obj + " in the scene .")});
            break;
        default:
            throw UsageError("unknown conversation template " + std::to_string(template_id));
    }
    return conv;
}

Conversation make_composed_conversation(const ConceptScene& a, const ConceptScene& b) {
    Conversation conv;
    conv.turns.push_back({tok("what is shown ?"),
                          tok("a " + attr_word(a.attribute_id) + " " + obj_word(a.object_id) + " and a " +
                              attr_word(b.attribute_id) + " " + obj_word(b.object_id) + " .")});
    return conv;
}

std::string render_record(const Conversation& conv) {
    const Vocab& vocab = Vocab::instance();
    std::string out;
    for (const ModalitySample& s : conv.grounding) {
        char line[96];
        std::snprintf(line, sizeof(line), "SCENE obj=%d attr=%d seed=%" PRIu64 "\n", s.scene.object_id,
                      s.scene.attribute_id, s.scene.scene_seed);
        out += line;
    }
    for (const ModalitySample& s : conv.grounding) {
        out += "MOD ";
        out += modality_name(s.modality);
        for (float v : s.observation.data) {
            out += ' ';
            append_f32(out, v);
        }
        out += '\n';
    }
    for (const Turn& t : conv.turns) {
        out += "TURN H: " + vocab.detokenize(t.instruction) + " | A: " + vocab.detokenize(t.response) + "\n";
    }
    out += '\n';
    return out;
}

std::vector<Conversation> parse_dataset(const std::string& text) {
    const Vocab& vocab = Vocab::instance();
    std::vector<Conversation> records;
    Conversation cur;
    std::vector<ConceptScene> scenes;
    bool any_line = false;

    auto flush = [&]() {
        if (!any_line) return;
        if (cur.grounding.empty() || cur.turns.empty()) {
            throw IoError("dataset: record missing MOD or TURN lines");
        }
        records.push_back(std::move(cur));
        cur = Conversation{};
        scenes.clear();
        any_line = false;
    };

    size_t start = 0;
    int lineno = 0;
    while (start < text.size()) {
        size_t nl = text.find('\n', start);
        if (nl == std::string::npos) nl = text.size();
        std::string line = text.substr(start, nl - start);
        start = nl + 1;
        lineno += 1;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) {
            flush();
            continue;
        }
        any_line = true;
        const std::string where = " (line " + std::to_string(lineno) + ")";
        if (line.rfind("SCENE ", 0) == 0) {
            ConceptScene s;
            if (std::sscanf(line.c_str(), "SCENE obj=%d attr=%d seed=%" SCNu64, &s.object_id,
                            &s.attribute_id, &s.scene_seed) != 3) {
                throw IoError("dataset: malformed SCENE line" + where);
            }
            scenes.push_back(s);
        } else if (line.rfind("MOD ", 0) == 0) {
            size_t sp = line.find(' ', 4);
            if (sp == std::string::npos) throw IoError("dataset: malformed MOD line" + where);
            ModalitySample sample;
            sample.modality = modality_from_name(line.substr(4, sp - 4));
            std::vector<float> vals;
            const char* p = line.c_str() + sp;
            char* end = nullptr;
            while (*p) {
                const float v = std::strtof(p, &end);
                if (end == p) break;
                vals.push_back(v);
                p = end;
            }
            const int d = modality_dim(sample.modality);
            if (static_cast<int>(vals.size()) != d) {
                throw IoError("dataset: MOD line has " + std::to_string(vals.size()) + " values, expected " +
                              std::to_string(d) + where);
            }
            if (cur.grounding.size() >= scenes.size()) {
                throw IoError("dataset: MOD line without matching SCENE line" + where);
            }
            sample.scene = scenes[cur.grounding.size()];
            sample.observation = Tensor({d}, std::move(vals));
            cur.grounding.push_back(std::move(sample));
        } else if (line.rfind("TURN H: ", 0) == 0) {
            const size_t sep = line.find(" | A: ");
            if (sep == std::string::npos) throw IoError("dataset: malformed TURN line" + where);
            Turn t;
            t.instruction = vocab.tokenize(line.substr(8, sep - 8));
            t.response = vocab.tokenize(line.substr(sep + 6));
            cur.turns.push_back(std::move(t));
        } else {
            throw IoError("dataset: unrecognized line '" + line + "'" + where);
        }
    }
    flush();
    return records;
}

Conversation gen_record(const World& world, const GenDataConfig& cfg, int index) {
    Rng r = Rng(cfg.seed).child("record", static_cast<uint64_t>(index));
    const bool composed = r.next_double() < cfg.compose_fraction;
    Conversation conv;
    if (composed) {
        const ConceptScene a = sample_scene(r);
        ConceptScene b = sample_scene(r);
        while (b.object_id == a.object_id) b = sample_scene(r);
        ModalitySample sa = render_modality(world, a, cfg.modality, r);
        ModalitySample sb = render_modality(world, b, cfg.modality, r);
        conv = make_composed_conversation(a, b);
        conv.grounding.push_back(std::move(sa));
        conv.grounding.push_back(std::move(sb));
    } else {
        const ConceptScene s = sample_scene(r);
        const int template_id = r.next_int(kNumTemplates);
        ModalitySample sample = render_modality(world, s, cfg.modality, r);
        conv = make_conversation(s, template_id, r);
        conv.grounding.push_back(std::move(sample));
    }
    return conv;
}

void gen_dataset(const World& world, const GenDataConfig& cfg) {
    if (cfg.count <= 0) throw UsageError("gen_dataset: record count must be positive");
    std::vector<std::string> chunks(static_cast<size_t>(cfg.count));
#pragma omp parallel for schedule(static)
    for (int k = 0; k < cfg.count; ++k) {
        chunks[static_cast<size_t>(k)] = render_record(gen_record(world, cfg, k));
    }
    std::string out;
    size_t total = 0;
    for (const std::string& c : chunks) total += c.size();
    out.reserve(total);
    for (const std::string& c : chunks) out += c;
    write_file(cfg.out_path, out);
}

}  // namespace pgpt
