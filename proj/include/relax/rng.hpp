#pragma once

#include <cstdint>
#include <random>

namespace relax {

// mt19937_64 engine with hand-rolled draw helpers. std::*_distribution output
// is implementation-defined, which would break the bit-exact reproducibility
// contracts, so the mappings from raw 64-bit words live here.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t raw() { return gen_(); }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Truncation bias is O(n * 2^-53).
    std::uint64_t below(std::uint64_t n) {
        std::uint64_t k = static_cast<std::uint64_t>(uniform() * static_cast<double>(n));
        return k >= n ? n - 1 : k;
    }

    // Standard normal via Box-Muller, caching the spare draw.
    double normal();

    // Stream derivation so parallel consumers (group members, steps) get
    // decorrelated seeds independent of scheduling order.
    static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream);

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

} // namespace relax
