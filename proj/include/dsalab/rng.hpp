#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>

#include "dsalab/common.hpp"

namespace dsalab {

// Deterministic generator. mt19937_64 output is pinned by the standard, and all
// distributions below are hand-rolled, so a (seed, config) pair reproduces the
// same stream on every platform and compiler.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    // Derives an independent stream, e.g. one per worker seed.
    static Rng substream(std::uint64_t seed, std::uint64_t stream) {
        return Rng(splitmix64(seed ^ (0x9e3779b97f4a7c15ull * (stream + 1))));
    }

    std::uint64_t bits() { return gen_(); }

    // Uniform on [0, 1) with 53 random bits.
    double uniform01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform01();
        double u2 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_     = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // Index draw from an unnormalized nonnegative weight vector.
    int discrete(std::span<const double> weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        double u   = uniform01() * total;
        double acc = 0.0;
        for (size_t i = 0; i + 1 < weights.size(); ++i) {
            acc += weights[i];
            if (u < acc) return static_cast<int>(i);
        }
        return static_cast<int>(weights.size()) - 1;
    }

    // Marsaglia-Tsang gamma sampler; shape < 1 handled by the boost identity
    // G(a) = G(a+1) * U^{1/a}.
    double gamma(double shape) {
        if (shape < 1.0) {
            double u = uniform01();
            while (u <= 0.0) u = uniform01();
            return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
        }
        double d = shape - 1.0 / 3.0;
        double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x = gaussian();
            double v = 1.0 + c * x;
            if (v <= 0.0) continue;
            v         = v * v * v;
            double u  = uniform01();
            double x2 = x * x;
            if (u < 1.0 - 0.0331 * x2 * x2) return d * v;
            if (u > 0.0 && std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    // Strictly positive point on the simplex (Dirichlet with common concentration).
    Vec dirichlet(int n, double concentration) {
        Vec out(n);
        double total = 0.0;
        for (int i = 0; i < n; ++i) {
            double g = gamma(concentration);
            while (g <= 0.0) g = gamma(concentration);
            out[i] = g;
            total += g;
        }
        return out / total;
    }

  private:
    static std::uint64_t splitmix64(std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_   = 0.0;
};

}  // namespace dsalab
