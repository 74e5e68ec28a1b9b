#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <string_view>

namespace dstkit {

// 64-bit FNV-1a. Stable across platforms, used to derive per-item seeds.
constexpr std::uint64_t fnv1a64(std::string_view text,
                                std::uint64_t hash = 0xcbf29ce484222325ULL) noexcept {
    for (unsigned char c : text) {
        hash ^= c;
        hash *= 0x100000001b3ULL;
    }
    return hash;
}

constexpr std::uint64_t splitmix_finalize(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Seed for one item, keyed by the run seed and a tuple of identifying parts.
// Every random decision about an item draws from a stream seeded this way,
// so results do not depend on the order in which items are processed.
inline std::uint64_t keyed_seed(std::uint64_t seed,
                                std::initializer_list<std::string_view> parts) noexcept {
    std::uint64_t h = splitmix_finalize(seed ^ 0x6a09e667f3bcc908ULL);
    for (std::string_view p : parts) {
        h = fnv1a64(p, h);
        h = fnv1a64(std::string_view{"\x1f", 1}, h);
    }
    return splitmix_finalize(h);
}

// SplitMix64 stream with portable uniform/Gaussian draws. The std
// distributions are implementation-defined, which would break byte-identical
// outputs across toolchains.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) noexcept : state_{seed} {}

    std::uint64_t next() noexcept {
        state_ += 0x9e3779b97f4a7c15ULL;
        return splitmix_finalize(state_);
    }

    // Uniform in [0, 1) with 53 bits of precision.
    double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). Rejection sampling keeps it unbiased.
    std::uint64_t below(std::uint64_t n) noexcept {
        if (n <= 1) {
            return 0;
        }
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = next();
        while (x >= limit) {
            x = next();
        }
        return x % n;
    }

    bool coin(double p) noexcept { return uniform() < p; }

    // Box-Muller; the spare value is cached.
    double gaussian() noexcept {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * std::numbers::pi * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace dstkit
