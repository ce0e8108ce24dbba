#pragma once

// Counter-based random streams. Every draw is a pure function of
// (master seed, step, query, role, element index), so perturbations and
// rounding decisions are regenerated on demand instead of stored.

#include <cmath>
#include <cstdint>
#include <numbers>

namespace quzo {

enum class Role : std::uint32_t {
    Perturbation = 1, // Gaussian direction u_i
    Round1 = 2,       // stochastic rounding stream producing u_{i,1}
    Round2 = 3,       // stochastic rounding stream producing u_{i,2}
    Update = 4,       // stochastic rounding of the weight update
    Init = 5,         // parameter initialisation
    Data = 6,         // synthetic dataset generation
    Batch = 7,        // minibatch sampling
    Test = 8,
};

/// splitmix64 output function.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

struct SeedPath {
    std::uint64_t master = 0;
    std::uint64_t step = 0;
    std::uint64_t query = 0;
    Role role = Role::Perturbation;

    constexpr SeedPath with_role(Role r) const noexcept { return {master, step, query, r}; }

    /// Stream key: distinct coordinates give unrelated keys.
    constexpr std::uint64_t key() const noexcept {
        std::uint64_t h = mix64(master ^ 0x243f6a8885a308d3ULL);
        h = mix64(h ^ (step * 0x9e3779b97f4a7c15ULL + 0x13198a2e03707344ULL));
        h = mix64(h ^ (query * 0xd1b54a32d192ed03ULL + 0xa4093822299f31d0ULL));
        h = mix64(h ^ (static_cast<std::uint64_t>(role) * 0x8cb92ba72f3d8dd7ULL + 0x082efa98ec4e6c89ULL));
        return h;
    }

    friend constexpr bool operator==(const SeedPath&, const SeedPath&) = default;
};

/// A value-type view of one counter-based stream. Copying it is free and
/// two copies with the same path produce the same numbers at the same index.
class RngStream {
public:
    constexpr RngStream() noexcept : RngStream(SeedPath{}) {}
    constexpr explicit RngStream(SeedPath path, std::uint64_t offset = 0) noexcept
        : path_(path), key_(path.key()), offset_(offset) {}

    constexpr const SeedPath& path() const noexcept { return path_; }
    constexpr std::uint64_t offset() const noexcept { return offset_; }

    /// Same stream, indices shifted by `extra`.
    constexpr RngStream advanced(std::uint64_t extra) const noexcept {
        RngStream s = *this;
        s.offset_ += extra;
        return s;
    }

    constexpr std::uint64_t bits(std::uint64_t index) const noexcept {
        return mix64(key_ + (offset_ + index + 1) * 0x9e3779b97f4a7c15ULL);
    }

    /// Uniform in [0, 1) with 53 random bits.
    constexpr double uniform(std::uint64_t index) const noexcept {
        return static_cast<double>(bits(index) >> 11) * 0x1.0p-53;
    }

    /// Standard normal via Box-Muller over a disjoint pair of counters.
    double normal(std::uint64_t index) const noexcept {
        const std::uint64_t base = offset_ + index;
        const double u1 = 1.0 - raw_uniform(2 * base); // (0, 1]
        const double u2 = raw_uniform(2 * base + 1);
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

private:
    constexpr double raw_uniform(std::uint64_t counter) const noexcept {
        return static_cast<double>(mix64(key_ + (counter + 1) * 0x9e3779b97f4a7c15ULL) >> 11) * 0x1.0p-53;
    }

    SeedPath path_;
    std::uint64_t key_;
    std::uint64_t offset_;
};

} // namespace quzo
