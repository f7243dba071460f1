#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace brnn {

// Deterministic random source. All stochastic code in the library takes an
// Rng explicitly; nothing reads the wall clock or global state. Draws are
// reproducible bit-for-bit for a fixed seed and a fixed order of calls,
// which the experiment tooling relies on.
//
// normal() uses the Box-Muller transform without caching the second variate,
// so the mapping from engine state to output does not depend on the standard
// library's distribution implementation.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

    // Uniform on [0, 1).
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    // Standard normal draw.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        // Guard log(0); pushes u1 into (0, 1].
        u1 = 1.0 - u1;
        return std::sqrt(-2.0 * std::log(u1)) *
               std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    // Uniform integer in [0, bound). bound must be positive.
    std::uint64_t integer(std::uint64_t bound) {
        // Rejection sampling keeps the draw unbiased for any bound.
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % bound;
    }

    // Independent stream derived from the original seed and a stream id.
    // Gives parallel units (trajectories, repetitions, particles) their own
    // deterministic source regardless of evaluation order. Derivation does
    // not disturb this rng's state.
    Rng derive(std::uint64_t stream) const {
        std::uint64_t x = seed_ + 0x9E3779B97F4A7C15ull * (stream + 1);
        x ^= x >> 30;
        x *= 0xBF58476D1CE4E5B9ull;
        x ^= x >> 27;
        x *= 0x94D049BB133111EBull;
        x ^= x >> 31;
        return Rng(x);
    }

    // Fisher-Yates shuffle driven by integer(); independent of std::shuffle's
    // implementation-defined draw pattern.
    template <typename T>
    void shuffle(std::vector<T>& values) {
        for (std::size_t i = values.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(integer(i));
            std::swap(values[i - 1], values[j]);
        }
    }

  private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

}  // namespace brnn
