#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace aulite {

// Errors thrown by the core. The C API maps these onto status codes.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ValueError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline uint64_t splitmix64(uint64_t& state) {
    state += 0x9e3779b97f4a7c15ull;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Derive an independent stream seed from a master seed and a stream tag.
inline uint64_t derive_seed(uint64_t master, uint64_t stream) {
    uint64_t s = master ^ (0x9e3779b97f4a7c15ull * (stream + 1));
    return splitmix64(s);
}

// Seeded RNG with explicitly-coded distributions. std::*_distribution is
// implementation-defined, which would break the same-seed reproducibility
// contract, so uniform/gaussian/shuffle are spelled out here.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    // Uniform integer in [0, n).
    uint64_t uniform_int(uint64_t n) {
        // modulo bias is negligible for n << 2^64 but reject anyway
        uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v;
        do {
            v = engine_();
        } while (v >= limit);
        return v % n;
    }

    // Standard normal via Box-Muller (no cached spare; keeps state simple).
    double gaussian() {
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // Fisher-Yates; std::shuffle is implementation-defined.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace aulite
