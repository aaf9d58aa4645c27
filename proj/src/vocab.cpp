#include "pandagpt/vocab.hpp"

#include <stdexcept>

namespace pgpt {

namespace {

// ids 8..19
const char* kObjects[kNumObjects] = {
    "box", "cup", "ball", "book", "lamp", "chair", "drum", "bell", "car", "tree", "fish", "bird",
};

// ids 20..25
const char* kAttributes[kNumAttributes] = {
    "red", "blue", "green", "small", "large", "dark",
};

// ids 26..63
const char* kFunctionWords[] = {
    "a", "the", "what", "is", "shown", "it", "its", "attribute", "yes", "no",
    "this", "that", "there", "in", "scene", "i", "see", "describe", "please", "tell",
    "me", "about", "kind", "of", "thing", "and", "not", "question", "answer", "here",
    "now", "color", "looks", "like", "sound", "object", ".", "?",
};
static_assert(sizeof(kFunctionWords) / sizeof(kFunctionWords[0]) == 38);

}  // namespace

Vocab::Vocab() {
    words_ = {"PAD", "UNK", "BOS", "EOS", "EMB_BEGIN", "EMB_END", "HUMAN", "ASSISTANT"};
    for (const char* w : kObjects) words_.emplace_back(w);
    for (const char* w : kAttributes) words_.emplace_back(w);
    for (const char* w : kFunctionWords) words_.emplace_back(w);
    if (static_cast<int>(words_.size()) != kVocabSize) {
        throw std::logic_error("vocabulary must have exactly 64 entries");
    }
    for (int i = 0; i < kVocabSize; ++i) ids_[words_[static_cast<size_t>(i)]] = i;
    if (ids_.size() != static_cast<size_t>(kVocabSize)) {
        throw std::logic_error("vocabulary words must be distinct");
    }
}

const Vocab& Vocab::instance() {
    static const Vocab v;
    return v;
}

int Vocab::id(const std::string& word) const {
    auto it = ids_.find(word);
    return it == ids_.end() ? UNK : it->second;
}

const std::string& Vocab::word(int id) const {
    if (id < 0 || id >= kVocabSize) throw std::out_of_range("token id out of range");
    return words_[static_cast<size_t>(id)];
}

std::vector<int> Vocab::tokenize(const std::string& text) const {
    std::vector<int> out;
    size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && (text[i] == ' ' || text[i] == '\t' || text[i] == '\n' || text[i] == '\r')) ++i;
        size_t j = i;
        while (j < text.size() && text[j] != ' ' && text[j] != '\t' && text[j] != '\n' && text[j] != '\r') ++j;
        if (j > i) out.push_back(id(text.substr(i, j - i)));
        i = j;
    }
    return out;
}

std::string Vocab::detokenize(const std::vector<int>& ids) const {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += word(ids[i]);
    }
    return out;
}

int Vocab::object_token(int object_id) { return kFirstObjectId + object_id; }
int Vocab::attribute_token(int attribute_id) { return kFirstAttributeId + attribute_id; }

bool Vocab::is_object_token(int id) { return id >= kFirstObjectId && id < kFirstObjectId + kNumObjects; }
bool Vocab::is_attribute_token(int id) {
    return id >= kFirstAttributeId && id < kFirstAttributeId + kNumAttributes;
}

int Vocab::object_id_of(int token) { return is_object_token(token) ? token - kFirstObjectId : -1; }
int Vocab::attribute_id_of(int token) {
    return is_attribute_token(token) ? token - kFirstAttributeId : -1;
}

std::string Vocab::render_table() const {
    std::string out;
    for (int i = 0; i < kVocabSize; ++i) out += std::to_string(i) + "\t" + words_[static_cast<size_t>(i)] + "\n";
    return out;
}

}  // namespace pgpt
