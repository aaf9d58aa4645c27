#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pandagpt/tensor.hpp"

namespace pgpt {

// Flat key=value configuration. Every key has a documented default; unknown
// keys and badly typed values are usage errors. parse(render(c)) == c.
class Config {
public:
    enum class Type { Int, Float, Str };

    struct KeySpec {
        const char* key;
        Type type;
        const char* def;
        const char* doc;
    };

    static const std::vector<KeySpec>& schema();

    Config();  // all defaults

    static Config load(const std::string& path);
    static Config parse(const std::string& text);

    // Validates the key against the schema and the value against its type.
    void set(const std::string& key, const std::string& value);

    int64_t get_int(const std::string& key) const;
    double get_float(const std::string& key) const;
    const std::string& get_str(const std::string& key) const;

    // Sorted "key=value\n" lines.
    std::string render() const;
    // Stable hash of the rendering, reported as 8 hex digits.
    std::string fingerprint() const;

    const std::map<std::string, std::string>& entries() const { return values_; }

private:
    std::map<std::string, std::string> values_;
};

}  // namespace pgpt
