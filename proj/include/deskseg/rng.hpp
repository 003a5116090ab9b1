#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace deskseg {

// splitmix64 finalizer; used to derive independent seeds from (seed, tag) pairs.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t seed_combine(std::uint64_t a, std::uint64_t b) {
    return mix64(a ^ mix64(b));
}

// Deterministic random stream. Distributions are implemented here rather than
// with std::*_distribution so draws depend only on this code and the engine,
// not on standard-library internals.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), engine_(mix64(seed)) {}

    std::uint64_t next() { return engine_(); }

    // [0, 1), 53-bit resolution
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller, spare value cached
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // uniform integer in [0, bound); bound must be nonzero
    std::size_t below(std::size_t bound) { return static_cast<std::size_t>(next() % bound); }

    // independent child stream; derived from the original seed, so forking
    // does not perturb this stream
    Rng fork(std::uint64_t tag) const { return Rng(seed_combine(seed_, tag)); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace deskseg
