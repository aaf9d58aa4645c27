#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace pgpt {

// Special token ids. The table is frozen at build time; data files and
// checkpoints all assume this exact 64-entry vocabulary.
enum SpecialToken : int {
    PAD = 0,
    UNK = 1,
    BOS = 2,
    EOS = 3,
    EMB_BEGIN = 4,
    EMB_END = 5,
    HUMAN = 6,
    ASSISTANT = 7,
};

constexpr int kVocabSize = 64;
constexpr int kNumObjects = 12;
constexpr int kNumAttributes = 6;
constexpr int kFirstObjectId = 8;
constexpr int kFirstAttributeId = 20;

// Bidirectional word <-> id table over exactly 64 entries: 8 specials,
// 12 object words, 6 attribute words, 38 function words.
class Vocab {
public:
    static const Vocab& instance();

    int id(const std::string& word) const;        // UNK for unknown words
    const std::string& word(int id) const;

    // Whitespace word split; unknown words map to UNK.
    std::vector<int> tokenize(const std::string& text) const;
    std::string detokenize(const std::vector<int>& ids) const;

    static int object_token(int object_id);       // object_id in [0, 12)
    static int attribute_token(int attribute_id); // attribute_id in [0, 6)
    static bool is_object_token(int id);
    static bool is_attribute_token(int id);
    static int object_id_of(int token);           // -1 if not an object token
    static int attribute_id_of(int token);

    // "id<TAB>word" lines for all 64 entries.
    std::string render_table() const;

private:
    Vocab();
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> ids_;
};

}  // namespace pgpt
