#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "pandagpt/bridge.hpp"

namespace pgpt {

struct ConceptHit {
    bool object_hit = false;
    bool attribute_hit = false;
};

// Exclusive word matching: a hit requires the scene's word to appear and no
// other word of the same kind to appear, so a model that lists everything
// scores zero.
ConceptHit concept_accuracy(const std::vector<int>& response, const ConceptScene& scene);

// What the bridge saw during training; the zero-shot guard and the train/test
// seed-disjointness check run against this.
struct TrainManifest {
    std::set<std::string> modalities;
    std::set<uint64_t> scene_seeds;
};

TrainManifest manifest_from_records(const std::vector<Conversation>& data);

struct AccuracyResult {
    double object_acc = 0.0;
    double attribute_acc = 0.0;
    double joint_acc = 0.0;
    int n_scenes = 0;
};

// Renders n held-out scenes in the given modality, encodes, projects, prompts
// "what is shown ?", greedily generates, and scores with concept_accuracy.
// Refuses modalities present in the training manifest unless in_domain is
// set; in-domain results are reported separately.
AccuracyResult zero_shot_eval(Modality m, int n_scenes, const World& world, const ParamMap& binder,
                              const ParamMap& lm, const BridgeState& bridge,
                              const TrainManifest& manifest, bool in_domain, const Rng& rng);

struct CompositionResult {
    double both_mention_rate = 0.0;
    int n_pairs = 0;
};

// Scene pairs with distinct objects, one rendered in each modality, composed
// into a single conditioning vector. Success iff both object words appear in
// the answer. Same guards as zero_shot_eval, applied to both modalities.
CompositionResult composition_eval(Modality mod_a, Modality mod_b, int n_pairs, const World& world,
                                   const ParamMap& binder, const ParamMap& lm, const BridgeState& bridge,
                                   const TrainManifest& manifest, bool in_domain, const Rng& rng);

// Embeddings of 64 held-out distinct-concept scenes for every side (six
// modalities + text), for the full retrieval table.
struct RetrievalSides {
    std::vector<std::vector<JointEmbedding>> sides;  // 7 sides
    static constexpr int kTextSide = 6;
};

RetrievalSides make_retrieval_sides(const World& world, const ParamMap& binder, int n_scenes,
                                    const Rng& rng);
// Mean of both retrieval directions for a side pair.
double retrieval_pair_r1(const RetrievalSides& sides, int side_a, int side_b);
const char* retrieval_side_name(int side);

struct EvalReportRow {
    std::string metric;
    std::string modality;
    double value = 0.0;
    double baseline = 0.0;
};

struct EvalReport {
    std::map<std::string, std::string> header;  // config fingerprint, checksums, seed
    std::vector<EvalReportRow> rows;
};

// TSV: "metric<TAB>modality<TAB>value<TAB>baseline" under a "# key value"
// summary block.
std::string render_report(const EvalReport& report);

struct FullReportConfig {
    int eval_scenes = 200;
    int eval_pairs = 200;  // split across the unseen modality pairs
    int holdout = 64;
    uint64_t seed = 42;
};

// Runs every evaluation: 6 modalities x 3 accuracy columns, all 21 retrieval
// pairs, composition rates, perplexities; every accuracy row carries its
// untrained-counterpart baseline.
EvalReport full_report(const World& world, const ParamMap& binder, const ParamMap& lm,
                       const BridgeState& bridge, const TrainManifest& manifest,
                       const FullReportConfig& cfg, std::map<std::string, std::string> header);

}  // namespace pgpt
