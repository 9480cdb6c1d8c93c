#pragma once

#include "dpkf/linalg.hpp"

#include <cstdint>
#include <random>

namespace dpkf {

/// SplitMix64 finalizer; used to derive decorrelated seeds for independent streams.
constexpr std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Seeded Gaussian source. Streams with the same seed and different stream ids
/// are independent; the same (seed, stream) pair always reproduces the same draws.
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
        : engine_(splitmix64(splitmix64(seed) ^ splitmix64(stream + 0x632be59bd9b4e019ULL)))
    {
    }

    double normal() { return normal_(engine_); }

    Vector normal_vector(Eigen::Index n)
    {
        Vector v(n);
        for (Eigen::Index k = 0; k < n; ++k)
            v(k) = normal_(engine_);
        return v;
    }

    /// Draw from N(mean, L L^T) given a lower Cholesky factor L.
    Vector gaussian(const Vector& mean, const Matrix& chol_lower)
    {
        return mean + chol_lower * normal_vector(mean.size());
    }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

} // namespace dpkf
