#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace bevmt {

// Invalid user-supplied configuration (bad dimensions, unknown variant, ...).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

// A caller broke an API precondition (shape mismatch, out-of-range index, ...).
struct ContractViolation : std::logic_error {
    explicit ContractViolation(const std::string& msg) : std::logic_error("contract violation: " + msg) {}
};

// Non-finite values or unstable numerics detected at runtime.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

// Deterministic RNG. Distributions are implemented by hand on top of
// mt19937_64 so that streams do not depend on the standard library's
// distribution internals.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    // uniform double in [0, 1)
    double uniform() { return double(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller (no cached second value; one draw
    // consumes two engine outputs, keeping the stream layout obvious)
    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // integer in [0, n)
    int64_t randint(int64_t n) {
        uint64_t un = uint64_t(n);
        uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        uint64_t v;
        do { v = gen_(); } while (v >= limit);
        return int64_t(v % un);
    }

    bool bernoulli(double p) { return uniform() < p; }

    uint64_t raw() { return gen_(); }

private:
    std::mt19937_64 gen_;
};

// Canonical flattening of grid coordinates: BEV cells are row-major (h, w),
// voxels append z fastest.
inline int64_t bev_index(int64_t h, int64_t w, int64_t grid_w) { return h * grid_w + w; }
inline int64_t voxel_index(int64_t h, int64_t w, int64_t z, int64_t grid_w, int64_t grid_z) {
    return (h * grid_w + w) * grid_z + z;
}

// Stable per-sample seed derivation (splitmix64 of base ^ index).
inline uint64_t derive_seed(uint64_t base, uint64_t index) {
    uint64_t z = base + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace bevmt
