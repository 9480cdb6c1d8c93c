#pragma once

// Gaussian-mechanism calibration: the Gaussian tail Q, its inverse, the noise
// multiplier kappa(epsilon, delta), l2-sensitivity of a static shaping matrix
// under per-participant adjacency, and the mechanism s = D y + zeta itself.

#include "dpkf/linalg.hpp"
#include "dpkf/lin_model.hpp"
#include "dpkf/random.hpp"

#include <cmath>
#include <numbers>
#include <vector>

namespace dpkf {

/// Standard normal upper tail, Q(x) = P(N(0,1) > x).
inline double q_function(double x)
{
    return 0.5 * std::erfc(x / std::numbers::sqrt2);
}

/// Inverse of the Gaussian tail by bisection on q_function. The bracket starts
/// at [-1, 1] and doubles until it contains the root.
inline double q_inverse(double p)
{
    if (!(p > 0.0 && p < 1.0))
        throw DomainError("q_inverse requires 0 < p < 1");
    double lo = -1.0;
    double hi = 1.0;
    while (q_function(lo) < p)
        lo *= 2.0;
    while (q_function(hi) > p)
        hi *= 2.0;
    // Q is decreasing: Q(lo) >= p >= Q(hi).
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (mid <= lo || mid >= hi)
            break;
        const double q = q_function(mid);
        if (q == p)
            return mid;
        if (q > p)
            lo = mid;
        else
            hi = mid;
    }
    return std::abs(q_function(lo) - p) <= std::abs(q_function(hi) - p) ? lo : hi;
}

struct PrivacySpec {
    double epsilon = 0.0;
    double delta = 0.0;
    double mu = 0.0;    ///< Q^{-1}(delta)
    double kappa = 0.0; ///< noise std per unit of l2-sensitivity
};

/// kappa = (mu + sqrt(mu^2 + 2 epsilon)) / (2 epsilon) with mu = Q^{-1}(delta).
inline PrivacySpec calibrate(double epsilon, double delta)
{
    if (!(epsilon > 0.0) || !std::isfinite(epsilon))
        throw DomainError("epsilon must be positive and finite");
    if (!(delta > 0.0 && delta < 1.0))
        throw DomainError("delta must lie in (0, 1)");
    PrivacySpec s;
    s.epsilon = epsilon;
    s.delta = delta;
    s.mu = q_inverse(delta);
    s.kappa = (s.mu + std::sqrt(s.mu * s.mu + 2.0 * epsilon)) / (2.0 * epsilon);
    return s;
}

/// Residual of the quadratic 2 eps kappa^2 - 2 mu kappa - 1 that kappa solves.
inline double kappa_residual(const PrivacySpec& s)
{
    return 2.0 * s.epsilon * s.kappa * s.kappa - 2.0 * s.mu * s.kappa - 1.0;
}

/// max_i rho_i ||D_i||_2 where D_i are the column blocks of widths `block_cols`.
inline double sensitivity_l2(const Matrix& D, const std::vector<Eigen::Index>& block_cols,
                             const AdjacencySpec& adj)
{
    if (block_cols.size() != adj.size())
        throw DimensionError("column partition and adjacency specification differ in length");
    Eigen::Index total = 0;
    for (auto w : block_cols)
        total += w;
    if (total != D.cols())
        throw DimensionError("column partition does not cover the shaping matrix");
    double s = 0.0;
    Eigen::Index off = 0;
    for (std::size_t i = 0; i < block_cols.size(); ++i) {
        s = std::max(s, adj.rho(i) * linalg::spectral_norm(D.middleCols(off, block_cols[i])));
        off += block_cols[i];
    }
    return s;
}

/// Static shaping matrix D = [D_1 ... D_n] together with its l2-sensitivity.
class ShapingMatrix {
public:
    ShapingMatrix(Matrix D, std::vector<Eigen::Index> block_cols, const AdjacencySpec& adj)
        : D_(std::move(D)), block_cols_(std::move(block_cols)), rho_(adj.values())
    {
        if (D_.rows() < 1)
            throw DimensionError("shaping matrix needs at least one row");
        sensitivity_ = sensitivity_l2(D_, block_cols_, adj);
        Eigen::Index off = 0;
        for (auto w : block_cols_) {
            offsets_.push_back(off);
            off += w;
        }
    }

    const Matrix& matrix() const { return D_; }
    Eigen::Index rows() const { return D_.rows(); }
    Eigen::Index cols() const { return D_.cols(); }
    std::size_t blocks() const { return block_cols_.size(); }
    const std::vector<Eigen::Index>& block_cols() const { return block_cols_; }
    auto block(std::size_t i) const { return D_.middleCols(offsets_.at(i), block_cols_.at(i)); }
    double sensitivity() const { return sensitivity_; }

    /// rho_i ||D_i||_2 for each participant.
    std::vector<double> block_sensitivities() const
    {
        std::vector<double> out;
        for (std::size_t i = 0; i < blocks(); ++i)
            out.push_back(rho_[i] * linalg::spectral_norm(block(i)));
        return out;
    }

    AdjacencySpec adjacency() const { return AdjacencySpec(rho_); }

private:
    Matrix D_;
    std::vector<Eigen::Index> block_cols_;
    std::vector<Eigen::Index> offsets_;
    std::vector<double> rho_;
    double sensitivity_ = 0.0;
};

/// Gaussian mechanism on a shaped signal: isotropic noise of std kappa * Delta_2 D.
class MechanismSpec {
public:
    MechanismSpec(ShapingMatrix shaping, const PrivacySpec& privacy)
        : shaping_(std::move(shaping)), noise_std_(privacy.kappa * shaping_.sensitivity())
    {
    }

    const ShapingMatrix& shaping() const { return shaping_; }
    double noise_std() const { return noise_std_; }
    Eigen::Index output_dim() const { return shaping_.rows(); }
    Matrix noise_covariance() const
    {
        return noise_std_ * noise_std_ * Matrix::Identity(output_dim(), output_dim());
    }

private:
    ShapingMatrix shaping_;
    double noise_std_;
};

/// s = D y + zeta, zeta ~ N(0, sigma^2 I_q).
inline Vector apply_mechanism(const MechanismSpec& spec, const Vector& y, Rng& rng)
{
    const auto& D = spec.shaping().matrix();
    if (y.size() != D.cols())
        throw DimensionError("measurement length does not match the shaping matrix");
    Vector s = D * y;
    const Vector noise = rng.normal_vector(s.size());
    if (spec.noise_std() > 0.0)
        s += spec.noise_std() * noise;
    return s;
}

} // namespace dpkf
