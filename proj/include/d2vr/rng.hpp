// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace d2vr {

// Counter-based splittable RNG. Every draw is a pure function of (key, counter),
// so streams can be split per purpose and checkpointed as two u64 words.
// Mixing function is the splitmix64 finalizer.
class Rng {
public:
    Rng() = default;
    explicit Rng(uint64_t seed) : key_(mix(seed ^ 0xD2D2D2D2D2D2D2D2ULL)) {}

    // Derives an independent child stream. Children with distinct labels never
    // collide with each other or with the parent.
    [[nodiscard]] Rng split(uint64_t label) const {
        Rng child;
        child.key_ = mix(key_ ^ mix(label + 0x9E3779B97F4A7C15ULL));
        return child;
    }
    [[nodiscard]] Rng split(std::string_view label) const { return split(fnv1a(label)); }

    uint64_t next_u64() { return mix(key_ + 0x9E3779B97F4A7C15ULL * ++counter_); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n).
    uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

    int range_int(int lo, int hi_inclusive) {
        return lo + static_cast<int>(below(static_cast<uint64_t>(hi_inclusive - lo + 1)));
    }

    // Standard normal via Box-Muller. Consumes two words per draw and keeps no
    // cache so the (key, counter) pair fully describes the stream state.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    uint64_t key() const { return key_; }
    uint64_t counter() const { return counter_; }
    void restore(uint64_t key, uint64_t counter) {
        key_ = key;
        counter_ = counter;
    }

    static uint64_t mix(uint64_t z) {
        z += 0x9E3779B97F4A7C15ULL;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    static uint64_t fnv1a(std::string_view s) {
        uint64_t h = 0xCBF29CE484222325ULL;
        for (char c : s) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001B3ULL;
        }
        return h;
    }

private:
    uint64_t key_ = 0x853C49E6748FEA9BULL;
    uint64_t counter_ = 0;
};

}  // namespace d2vr
