#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace cagevit {

// Seeded generator with hand-rolled draw functions so that the produced
// sequence depends only on the seed, not on the standard library's
// distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t bits() { return eng_(); }

    // Uniform in [0, 1) with 53 random mantissa bits.
    double unit() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * unit(); }

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // modulo bias is irrelevant for the small n used here, but rejecting
        // the tail keeps the draw exact
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v = eng_();
        while (v >= limit) v = eng_();
        return v % n;
    }

    // Box-Muller; one value per call, no cached state.
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = unit();
        while (u1 <= 0.0) u1 = unit();
        const double u2 = unit();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(6.283185307179586476925286766559 * u2);
    }

    // Normal(0, stddev) rejected outside +/- 2 stddev.
    double trunc_normal(double stddev) {
        for (;;) {
            const double v = normal(0.0, stddev);
            if (std::fabs(v) <= 2.0 * stddev) return v;
        }
    }

    template <typename T>
    void fill_uniform(std::vector<T>& out, double lo, double hi) {
        for (auto& v : out) v = static_cast<T>(uniform(lo, hi));
    }

    template <typename T>
    void fill_trunc_normal(std::vector<T>& out, double stddev) {
        for (auto& v : out) v = static_cast<T>(trunc_normal(stddev));
    }

    // Distinct sorted-free sample of k indices from [0, n).
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
        std::vector<std::size_t> pool(n);
        for (std::size_t i = 0; i < n; ++i) pool[i] = i;
        for (std::size_t i = 0; i < k && i + 1 < n; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(below(n - i));
            std::swap(pool[i], pool[j]);
        }
        pool.resize(k < n ? k : n);
        return pool;
    }

private:
    std::mt19937_64 eng_;
};

}  // namespace cagevit
