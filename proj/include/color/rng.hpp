#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace color {

// Mixes a base seed with a list of tags into an independent stream seed.
// Used to give every (split, domain, class, sample) cell its own stream.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags);

// Deterministic random source. The distributions are implemented here on top of
// the raw mt19937_64 output so results do not depend on the standard library's
// distribution algorithms.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }
    double uniform();  // [0, 1)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    std::size_t uniform_index(std::size_t n);  // [0, n)
    double normal();
    // Standard normal truncated to [-2, 2], scaled by sigma.
    double truncated_normal(double sigma);

    template <typename T>
    void shuffle(std::vector<T>& values) {
        for (std::size_t i = values.size(); i > 1; --i) {
            std::size_t j = uniform_index(i);
            std::swap(values[i - 1], values[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace color
