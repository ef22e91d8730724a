#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

#include "flowsr/tensor.hpp"

namespace flowsr {

// splitmix64 finalizer; the workhorse behind all seeding and stream derivation.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t seed, std::uint64_t v) {
    return mix64(seed ^ (v + 0x9e3779b97f4a7c15ULL + (seed << 6) + (seed >> 2)));
}

// Deterministic counter-based generator. Every consumer derives its own
// stream from (seed, path...) so draws are independent of evaluation order
// across streams, and the i-th draw within a stream depends only on i.
// No <random> distributions are used anywhere: their output is
// implementation-defined, which would break byte-identical reruns.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(mix64(seed)) {}

    static Rng stream(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
        std::uint64_t s = mix64(seed);
        for (std::uint64_t p : path) s = hash_combine(s, p);
        return Rng(s);
    }

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        std::uint64_t x = state_;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    int uniform_int(int n) {
        return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
    }

    // Box-Muller; both values of each pair are consumed in order.
    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        cached_ = r * std::sin(a);
        have_cached_ = true;
        return r * std::cos(a);
    }

    template <typename T>
    void fill_normal(TensorT<T>& t, double mean = 0.0, double stddev = 1.0) {
        for (auto& v : t.data) v = static_cast<T>(mean + stddev * normal());
    }

    template <typename T>
    void fill_uniform(TensorT<T>& t, double lo, double hi) {
        for (auto& v : t.data) v = static_cast<T>(uniform(lo, hi));
    }

private:
    std::uint64_t state_;
    double cached_ = 0.0;
    bool have_cached_ = false;
};

}  // namespace flowsr
