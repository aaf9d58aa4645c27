#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "pandagpt/rng.hpp"
#include "pandagpt/tensor.hpp"

namespace pgpt {

enum class Modality : int { img = 0, vid = 1, aud = 2, dep = 3, thm = 4, imu = 5 };

constexpr int kNumModalities = 6;
constexpr std::array<int, kNumModalities> kModalityDims = {48, 48, 24, 16, 16, 12};
constexpr int kConceptDim = 72;  // 12-way object one-hot ++ 6-way attribute one-hot, zero padded
constexpr double kRenderNoiseSigma = 0.05;

const char* modality_name(Modality m);
Modality modality_from_name(const std::string& name);  // throws UsageError
int modality_dim(Modality m);

// Latent ground truth. The scene fully determines captions; (scene, modality,
// noise seed) fully determines observations.
struct ConceptScene {
    int object_id = 0;     // [0, 12)
    int attribute_id = 0;  // [0, 6)
    uint64_t scene_seed = 0;
};

struct ModalitySample {
    Modality modality = Modality::img;
    Tensor observation;  // [d_m]
    ConceptScene scene;
};

struct Turn {
    std::vector<int> instruction;  // x_i
    std::vector<int> response;     // y_i
};

// Multi-turn conversation tied to one grounding sample (two for composition
// records). Responses are deterministic functions of the grounding scene(s).
struct Conversation {
    std::vector<Turn> turns;
    std::vector<ModalitySample> grounding;
};

// Fixed world structure: one full-rank mixing matrix per modality, drawn once
// from the global seed.
class World {
public:
    explicit World(uint64_t seed);

    const Tensor& mixing(Modality m) const { return mixing_[static_cast<size_t>(m)]; }
    // Noiseless render of a concept.
    Tensor prototype(Modality m, int object_id, int attribute_id) const;
    uint64_t seed() const { return seed_; }

private:
    uint64_t seed_;
    std::array<Tensor, kNumModalities> mixing_;  // [d_m x 72]
};

ConceptScene sample_scene(Rng& rng);
ModalitySample render_modality(const World& world, const ConceptScene& scene, Modality m, Rng& rng);
// "a {attribute} {object} ." as token ids (no BOS/EOS).
std::vector<int> render_caption(const ConceptScene& scene);

constexpr int kNumTemplates = 4;
// Template bank:
//   0: "what is shown ?"            -> full caption (1 turn)
//   1: template 0, then "what is its attribute ?" -> attribute (2 turns)
//   2: "is this a {probe} ?"        -> yes/no plus the true caption (1 turn)
//   3: "please describe the scene ." -> description sentence (1 turn)
// Grounding samples are attached by the caller.
Conversation make_conversation(const ConceptScene& scene, int template_id, Rng& rng);
// Two-scene record teaching the "X and Y" response form ("what is shown ?").
Conversation make_composed_conversation(const ConceptScene& a, const ConceptScene& b);

// Text dataset format. One record:
//   SCENE obj=<int> attr=<int> seed=<u64>     (one line per grounding scene)
//   MOD <name> <d_m floats, 9 significant digits>
//   TURN H: <instruction words> | A: <response words>
//   <blank line>
std::string render_record(const Conversation& conv);
std::vector<Conversation> parse_dataset(const std::string& text);

struct GenDataConfig {
    uint64_t seed = 42;
    Modality modality = Modality::img;
    int count = 4096;
    double compose_fraction = 0.25;
    std::string out_path;
};

// Record #k is a pure function of (seed, k); generation parallelizes across
// indices and the output bytes match a sequential run.
Conversation gen_record(const World& world, const GenDataConfig& cfg, int index);
void gen_dataset(const World& world, const GenDataConfig& cfg);

}  // namespace pgpt
