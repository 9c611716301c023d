#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace pairforge {

/// Deterministic 64-bit generator (splitmix64). Used instead of <random>
/// engines and distributions so that streams are byte-stable across
/// platforms and standard-library versions.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Unbiased uniform integer in [0, n). n must be > 0.
    std::uint64_t next_below(std::uint64_t n) {
        // Rejection sampling over the largest multiple of n.
        const std::uint64_t limit = n * ((~std::uint64_t{0}) / n);
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    /// Standard normal via Box-Muller (pairs cached).
    double next_gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = next_unit();
        } while (u1 <= 0.0);
        const double u2 = next_unit();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    /// k distinct indices drawn uniformly from [0, n), in draw order.
    /// When k == n every index is taken in ascending order and no
    /// randomness is consumed.
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

  private:
    std::uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

/// FNV-1a over bytes.
std::uint64_t hash64(std::string_view s);

/// Order-dependent combination of two 64-bit values.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

/// Keyed sub-stream seed: mix(seed, hash64(tag)).
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag);
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag, std::string_view key);

}  // namespace pairforge
