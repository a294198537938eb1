#ifndef ROOMSBI_RANDOM_HPP
#define ROOMSBI_RANDOM_HPP

#include <cstdint>
#include <random>

namespace roomsbi {

/// SplitMix64 finalizer; derives independent stream seeds from (seed, index)
/// so that record i is reproducible regardless of generation order.
constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index = 0) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    double normal() { return normal_(engine_); }
    std::uint64_t next() { return engine_(); }
    std::size_t index(std::size_t n) {
        return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
    }
    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

} // namespace roomsbi

#endif // ROOMSBI_RANDOM_HPP
