#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "charpipe/common.hpp"

namespace charpipe {

// Counter-based deterministic RNG. Every stream is keyed by (seed, purpose
// string, counter) so any draw can be reproduced without carrying mutable
// state through checkpoints: resuming a run at step k re-derives the exact
// stream for step k. Generation is splitmix64 over a hashed key; normals use
// Box-Muller. Results are identical across platforms and thread counts.
class Rng {
public:
    Rng() : state_(0x9e3779b97f4a7c15ull) {}
    explicit Rng(uint64_t seed) : state_(mix(seed ^ 0x9e3779b97f4a7c15ull)) {}

    // Derive an independent stream for a named purpose and counter.
    Rng fork(const std::string& purpose, uint64_t counter = 0) const;

    uint64_t next_u64();
    // Uniform in [0, 1).
    double uniform();
    double uniform(double lo, double hi);
    // Uniform integer in [0, n). n must be positive.
    int64_t uniform_int(int64_t n);
    // Standard normal via Box-Muller.
    double normal();
    std::vector<double> normal_vec(size_t n);

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(static_cast<int64_t>(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

    static uint64_t mix(uint64_t x);
    // Stable 64-bit hash of a string (FNV-1a), used for purpose keys.
    static uint64_t hash_str(const std::string& s);

private:
    uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

} // namespace charpipe
