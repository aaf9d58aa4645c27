#include "pandagpt/config.hpp"

#include <cerrno>
#include <cstdio>
#include <cstdlib>

#include "pandagpt/checkpoint.hpp"

namespace pgpt {

const std::vector<Config::KeySpec>& Config::schema() {
    static const std::vector<KeySpec> spec = {
        {"seed", Type::Int, "42", "global seed; everything derives from it"},
        {"data.count", Type::Int, "4096", "training conversations to generate"},
        {"data.modality", Type::Str, "img", "grounding modality for gen-data / train-bridge"},
        {"data.compose_fraction", Type::Float, "0.25", "fraction of records grounded in two scenes"},
        {"data.path", Type::Str, "out/train.txt", "conversation dataset file"},
        {"binder.steps", Type::Int, "300", "binder training steps"},
        {"binder.lr", Type::Float, "1e-3", "binder Adam learning rate"},
        {"binder.batch", Type::Int, "32", "binder batch size"},
        {"binder.tau", Type::Float, "0.07", "InfoNCE temperature"},
        {"binder.scenes", Type::Int, "512", "scene pool size for binder training"},
        {"binder.holdout", Type::Int, "64", "held-out scenes for retrieval metrics"},
        {"lm.steps", Type::Int, "2000", "language-model pre-training steps"},
        {"lm.lr", Type::Float, "3e-4", "language-model Adam learning rate"},
        {"lm.batch", Type::Int, "32", "language-model batch size"},
        {"lm.corpus", Type::Int, "24000", "pre-training corpus size in sentences"},
        {"bridge.epochs", Type::Int, "2", "bridge training epochs"},
        {"bridge.lr", Type::Float, "5e-4", "bridge peak learning rate (decays linearly to 0)"},
        {"bridge.batch", Type::Int, "8", "bridge batch size (gradient averaging)"},
        {"bridge.log", Type::Str, "out/bridge_train.tsv", "bridge training log (step, lr, loss)"},
        {"eval.scenes", Type::Int, "200", "scenes per modality for zero-shot evaluation"},
        {"eval.pairs", Type::Int, "200", "scene pairs for composition evaluation"},
        {"ckpt.binder", Type::Str, "out/binder.ckpt", "binder checkpoint path"},
        {"ckpt.lm", Type::Str, "out/lm.ckpt", "language-model checkpoint path"},
        {"ckpt.bridge", Type::Str, "out/bridge.ckpt", "bridge checkpoint path"},
        {"report.path", Type::Str, "out/report.tsv", "evaluation report path"},
    };
    return spec;
}

namespace {

const Config::KeySpec* find_spec(const std::string& key) {
    for (const auto& s : Config::schema()) {
        if (key == s.key) return &s;
    }
    return nullptr;
}

bool parse_int(const std::string& v, int64_t* out) {
    if (v.empty()) return false;
    errno = 0;
    char* end = nullptr;
    const long long r = std::strtoll(v.c_str(), &end, 10);
    if (errno != 0 || end != v.c_str() + v.size()) return false;
    *out = r;
    return true;
}

bool parse_float(const std::string& v, double* out) {
    if (v.empty()) return false;
    errno = 0;
    char* end = nullptr;
    const double r = std::strtod(v.c_str(), &end);
    if (errno != 0 || end != v.c_str() + v.size()) return false;
    *out = r;
    return true;
}

}  // namespace

Config::Config() {
    for (const auto& s : schema()) values_[s.key] = s.def;
}

Config Config::load(const std::string& path) { return parse(read_file(path)); }

Config Config::parse(const std::string& text) {
    Config c;
    size_t start = 0;
    int lineno = 0;
    while (start <= text.size()) {
        size_t nl = text.find('\n', start);
        if (nl == std::string::npos) nl = text.size();
        std::string line = text.substr(start, nl - start);
        start = nl + 1;
        lineno += 1;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        size_t a = line.find_first_not_of(" \t\r");
        if (a == std::string::npos) continue;
        size_t b = line.find_last_not_of(" \t\r");
        line = line.substr(a, b - a + 1);
        const size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw UsageError("config line " + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
        }
        std::string key = line.substr(0, eq);
        std::string val = line.substr(eq + 1);
        while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
        size_t v0 = val.find_first_not_of(" \t");
        val = (v0 == std::string::npos) ? "" : val.substr(v0);
        c.set(key, val);
    }
    return c;
}

void Config::set(const std::string& key, const std::string& value) {
    const KeySpec* s = find_spec(key);
    if (!s) throw UsageError("unknown config key '" + key + "'");
    if (s->type == Type::Int) {
        int64_t dummy;
        if (!parse_int(value, &dummy)) {
            throw UsageError("config key '" + key + "': '" + value + "' is not an integer");
        }
    } else if (s->type == Type::Float) {
        double dummy;
        if (!parse_float(value, &dummy)) {
            throw UsageError("config key '" + key + "': '" + value + "' is not a number");
        }
    }
    values_[key] = value;
}

int64_t Config::get_int(const std::string& key) const {
    const KeySpec* s = find_spec(key);
    if (!s || s->type != Type::Int) throw UsageError("not an integer config key: " + key);
    int64_t out = 0;
    parse_int(values_.at(key), &out);
    return out;
}

double Config::get_float(const std::string& key) const {
    const KeySpec* s = find_spec(key);
    if (!s || s->type != Type::Float) throw UsageError("not a float config key: " + key);
    double out = 0;
    parse_float(values_.at(key), &out);
    return out;
}

const std::string& Config::get_str(const std::string& key) const {
    if (!find_spec(key)) throw UsageError("unknown config key: " + key);
    return values_.at(key);
}

std::string Config::render() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
    return out;
}

std::string Config::fingerprint() const {
    const std::string text = render();
    const uint32_t h = crc32(text.data(), text.size());
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%08x", h);
    return buf;
}

}  // namespace pgpt
