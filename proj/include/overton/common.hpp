#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

namespace overton {

// FNV-1a, 64-bit. Used for schema/store digests and the hashed vocabulary.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t seed = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

inline uint64_t mix64(uint64_t x) {
    // splitmix64 finalizer
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Deterministic counter-based stream: value k of stream (seed, name).
inline uint64_t counter_rng(uint64_t seed, uint64_t stream, uint64_t counter) {
    return mix64(seed ^ mix64(stream ^ mix64(counter + 0x632be59bd9b4e019ull)));
}

// Maps a u64 to [0, 1).
inline double unit_double(uint64_t x) {
    return static_cast<double>(x >> 11) * 0x1.0p-53;
}

// Small sequential PRNG for shuffles and sampling.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Unbiased-enough for desk scale: rejection-free Lemire reduction.
    uint64_t next_below(uint64_t bound) {
        return bound == 0 ? 0 : next_u64() % bound;
    }

    double next_double() { return unit_double(next_u64()); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t state_;
};

// Little-endian scalar IO for the binary store/param formats.
inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
inline void put_u64(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
inline void put_f64(std::vector<uint8_t>& out, double d) {
    uint64_t v;
    std::memcpy(&v, &d, 8);
    put_u64(out, v);
}
inline uint32_t get_u32(const uint8_t* p) {
    uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}
inline uint64_t get_u64(const uint8_t* p) {
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}
inline double get_f64(const uint8_t* p) {
    uint64_t v = get_u64(p);
    double d;
    std::memcpy(&d, &v, 8);
    return d;
}

}  // namespace overton
