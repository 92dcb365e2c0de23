#pragma once

#include <cstdint>
#include <random>

#include "hash.hpp"

namespace hammer {

// Seeded generator shared by data generation, masking, dropout and shuffling.
// Streams are derived with mix_seed so that adding a consumer never shifts the
// draws seen by another.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

    [[nodiscard]] std::uint64_t seed() const { return seed_; }

    [[nodiscard]] Rng derive(std::uint64_t stream) const { return Rng(mix_seed(seed_, stream)); }

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }

    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }

    // Uniform integer in [lo, hi].
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
    }

    bool bernoulli(double p) { return uniform() < p; }

    std::mt19937_64& engine() { return engine_; }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

} // namespace hammer
