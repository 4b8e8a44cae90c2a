#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace semfed {

std::uint64_t fnv1a64(std::string_view bytes);
std::uint64_t splitmix64(std::uint64_t x);

// Seed for a named substream, e.g. derive_seed(master, "shuffle", client, round).
// Streams with different tags or indices are decorrelated; the derivation is
// pure arithmetic so it is stable across platforms.
std::uint64_t derive_seed(std::uint64_t master, std::string_view tag, std::uint64_t a = 0,
                          std::uint64_t b = 0);

// Deterministic RNG. All value conversions are spelled out here instead of
// going through std::*_distribution, whose outputs vary between standard
// library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n), n >= 1.
    std::uint64_t below(std::uint64_t n);

    // Standard normal via Box-Muller (second value cached).
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Marsaglia-Tsang gamma sampler, shape alpha > 0, scale 1.
    double gamma(double alpha);

    // Symmetric Dirichlet over n components.
    std::vector<double> dirichlet(double alpha, std::size_t n);

    // Fisher-Yates.
    template <class T>
    void shuffle(std::vector<T>& v) {
        if (v.size() < 2) return;
        for (std::size_t i = v.size() - 1; i > 0; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i + 1));
            std::swap(v[i], v[j]);
        }
    }

    // Sattolo's variant: a uniformly random single cycle, so no element keeps
    // its position (length >= 2).
    template <class T>
    void cycle(std::vector<T>& v) {
        for (std::size_t i = v.size() - 1; i > 0; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i], v[j]);
        }
    }

private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace semfed
