#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace nyoforge {

inline uint64_t splitmix64(uint64_t& x) {
    x += 0x9E3779B97F4A7C15ull;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

// xoshiro256**. 32 bytes of state, so it round-trips through the stream
// checkpoint format exactly. All derived draws below are written out
// explicitly to keep sequences identical across platforms.
class Rng {
public:
    Rng() : Rng(0) {}

    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& w : s_) w = splitmix64(x);
    }

    static Rng from_state(const std::array<uint64_t, 4>& s) {
        Rng r;
        r.s_ = s;
        return r;
    }

    const std::array<uint64_t, 4>& state() const { return s_; }

    uint64_t next() {
        auto rotl = [](uint64_t v, int k) { return (v << k) | (v >> (64 - k)); };
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // [0, 1), 53-bit resolution
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    // (0, 1], safe as a log argument
    double uniform_pos() { return static_cast<double>((next() >> 11) + 1) * 0x1.0p-53; }

    // unbiased draw in [0, n) by rejection
    uint64_t bounded(uint64_t n) {
        const uint64_t threshold = (0 - n) % n;
        for (;;) {
            uint64_t r = next();
            if (r >= threshold) return r % n;
        }
    }

    // Box-Muller; consumes exactly two draws per call
    double gaussian() {
        double u1 = uniform_pos();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

private:
    std::array<uint64_t, 4> s_{};
};

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
    for (size_t i = v.size(); i > 1; --i) {
        size_t j = static_cast<size_t>(rng.bounded(i));
        std::swap(v[i - 1], v[j]);
    }
}

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    return h;
}

// Seed derivation for independent sub-streams (per dataset, per rank, ...).
inline uint64_t mix_seed(uint64_t seed, std::string_view tag) {
    uint64_t x = seed ^ fnv1a64(tag);
    return splitmix64(x);
}

inline uint64_t mix_seed(uint64_t seed, std::string_view tag, uint64_t n) {
    uint64_t x = seed ^ fnv1a64(tag) ^ (0x9E3779B97F4A7C15ull * (n + 1));
    return splitmix64(x);
}

}  // namespace nyoforge
