#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace pgpt {

// Counter-based splittable generator (splitmix64 finalizer over seed + counter).
// Identical seed gives an identical stream. Child streams are derived by
// mixing (seed, label, index) without touching the parent's counter, so a
// child is the same no matter how many draws the parent has made.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed) {}

    uint64_t next_u64() {
        counter_ += 1;
        return mix64(seed_ + counter_ * kGamma);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). n must be positive.
    int next_int(int n) {
        return static_cast<int>((static_cast<unsigned __int128>(next_u64()) *
                                 static_cast<uint64_t>(n)) >> 64);
    }

    // Standard normal via Box-Muller; the spare draw is discarded so the
    // output stream is a pure function of the counter sequence.
    double next_gaussian() {
        double u1 = 1.0 - next_double();  // (0, 1]
        double u2 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    float next_gaussian_f32() { return static_cast<float>(next_gaussian()); }

    Rng child(std::string_view label, uint64_t index) const {
        uint64_t h = fnv1a(label);
        return Rng(mix64(mix64(seed_ + kGamma * h) + kGamma * index));
    }

    uint64_t seed() const { return seed_; }

    static uint64_t mix64(uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    static constexpr uint64_t kGamma = 0x9e3779b97f4a7c15ULL;

    static uint64_t fnv1a(std::string_view s) {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (char c : s) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ULL;
        }
        return h;
    }

    uint64_t seed_;
    uint64_t counter_ = 0;
};

}  // namespace pgpt
