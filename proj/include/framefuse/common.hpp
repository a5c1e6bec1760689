#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace ff {

// ---------------------------------------------------------------- errors

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : Error {
    using Error::Error;
};
struct ShapeError : Error {
    using Error::Error;
};
struct InvalidEditError : Error {
    using Error::Error;
};
struct CapacityError : Error {
    using Error::Error;
};
struct VocabularyError : Error {
    using Error::Error;
};
// dangling or duplicated referring word; message names the word
struct ReferenceError : Error {
    using Error::Error;
};
// missing/corrupt on-disk artifact; exit code 3 at the CLI
struct IntegrityError : Error {
    using Error::Error;
};
struct ParseError : Error {
    using Error::Error;
};

// ---------------------------------------------------------------- rng

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

/// Deterministic counter-based RNG. State is a single u64 so checkpoints can
/// serialize it exactly; normal() uses Box-Muller without a cached spare.
struct Rng {
    uint64_t state = 0;

    Rng() = default;
    explicit Rng(uint64_t seed) : state(seed) {}

    uint64_t next_u64() { return splitmix64(state); }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n)
    uint64_t below(uint64_t n) { return next_u64() % n; }

    // integer in [lo, hi] inclusive
    int64_t range(int64_t lo, int64_t hi) { return lo + int64_t(below(uint64_t(hi - lo + 1))); }

    double normal() {
        double u1 = (double(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    bool coin(double p) { return uniform() < p; }
};

// stable seed derivation, e.g. per-record seed = derive_seed(dataset_seed, index)
inline uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b = 0x5bd1e995u) {
    uint64_t s = seed ^ (a * 0x9E3779B97F4A7C15ull) ^ (b * 0xC2B2AE3D27D4EB4Full);
    splitmix64(s);
    return splitmix64(s);
}

// FNV-1a, used as the checkpoint/weights integrity hash
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const uint8_t* p = static_cast<const uint8_t*>(data);
    for (size_t i = 0; i < n; i++) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace ff
