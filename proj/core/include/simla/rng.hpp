#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace simla {

// Deterministic PRNG with explicit stream derivation. Standard-library
// distributions are implementation-defined, so uniform/normal draws are
// generated here from raw 64-bit outputs and behave identically on every
// platform and toolchain.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(mix64(seed + 0x9e3779b97f4a7c15ull)) {}

    // Independent substream: mix the parent seed with a stream tag.
    Rng stream(uint64_t tag) const { return Rng(mix64(state_ ^ mix64(tag + 0xbf58476d1ce4e5b9ull))); }

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        return mix64(state_);
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    uint64_t uniform_int(uint64_t n) {
        // 128-bit multiply avoids modulo bias down to 2^-64.
        return static_cast<uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
    }

    int uniform_index(int n) { return static_cast<int>(uniform_int(static_cast<uint64_t>(n))); }

    // Standard normal via Box-Muller.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

    // Fisher-Yates over an index vector.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = uniform_int(i);
            std::swap(v[i - 1], v[j]);
        }
    }

    // Weighted pick: index i with probability w[i] / sum(w). Weights must be
    // non-negative with positive sum.
    int pick_weighted(const std::vector<double>& w) {
        double total = 0.0;
        for (double x : w) total += x;
        double u = uniform() * total;
        double acc = 0.0;
        for (size_t i = 0; i < w.size(); ++i) {
            acc += w[i];
            if (u < acc) return static_cast<int>(i);
        }
        return static_cast<int>(w.size()) - 1;
    }

    static uint64_t mix64(uint64_t z) {
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ull;
        z ^= z >> 27;
        z *= 0x94d049bb133111ebull;
        z ^= z >> 31;
        return z;
    }

private:
    uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace simla
