// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace dprobe {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Seed for a named random stream. Every random consumer gets its own stream keyed by
/// (master seed, stage, item ids); there is no global generator.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view stage, std::uint64_t a = 0,
                                 std::uint64_t b = 0) {
    std::uint64_t h = splitmix64(master ^ 0x6a09e667f3bcc909ULL);
    h = splitmix64(h ^ fnv1a64(stage));
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ (b + 0x3c6ef372fe94f82bULL));
    return h;
}

/// A single random stream: uniform, normal and index draws.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}
    Rng(std::uint64_t master, std::string_view stage, std::uint64_t a = 0, std::uint64_t b = 0)
        : engine_(derive_seed(master, stage, a, b)) {}

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
    double normal() { return normal_(engine_); }
    std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace dprobe
