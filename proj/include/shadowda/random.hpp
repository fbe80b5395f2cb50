#pragma once

#include "shadowda/core.hpp"

#include <cstdint>
#include <random>

namespace shadowda {

/// One generator per replicate, seeded explicitly.
using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

/// Draws C^{1/2} eta with eta standard normal, C^{1/2} the principal root.
/// The root is computed once at construction.
class GaussianSampler {
public:
    GaussianSampler() = default;

    explicit GaussianSampler(const Matrix& covariance) : sqrt_(CovarianceFactors(covariance).sqrt) {}

    Index dim() const noexcept { return sqrt_.rows(); }

    Vector operator()(Rng& rng) {
        Vector eta(sqrt_.rows());
        for (Index i = 0; i < eta.size(); ++i) eta[i] = normal_(rng);
        return sqrt_ * eta;
    }

private:
    Matrix sqrt_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

inline Vector gaussian_sample(Rng& rng, const Matrix& covariance) {
    GaussianSampler sampler(covariance);
    return sampler(rng);
}

}  // namespace shadowda
