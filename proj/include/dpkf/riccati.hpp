#pragma once

// Kalman filtering of the shaped, noised measurements s_t = D y_t + zeta_t.
//
// The release enters the filter only through
//   Pi = D^T (D V D^T + sigma^2 I_q)^{-1} D,     sigma = kappa * Delta_2 D,
// and the error covariances follow
//   predicted  Sigma_bar_t = A_{t-1} Sigma_{t-1} A_{t-1}^T + W_{t-1}
//   posterior  Sigma_t^{-1} = Sigma_bar_t^{-1} + C_t^T Pi C_t
// with Sigma_bar_0 the block-diagonal initial covariance.

#include "dpkf/lin_model.hpp"
#include "dpkf/linalg.hpp"
#include "dpkf/privacy.hpp"

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace dpkf {

/// Pi for an arbitrary noise level; zero when D or sigma make the release uninformative.
inline Matrix pi_from_d(const Matrix& D, const Matrix& V, double noise_std)
{
    if (D.cols() != V.rows())
        throw DimensionError("shaping matrix column count must equal the output dimension");
    if (D.isZero(0.0))
        return Matrix::Zero(V.rows(), V.cols());
    const Matrix R = D * V * D.transpose() +
                     noise_std * noise_std * Matrix::Identity(D.rows(), D.rows());
    Eigen::LDLT<Matrix> ldlt(linalg::symmetrize(R));
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
        ldlt.vectorD().minCoeff() <= 0.0)
        throw NumericalError("D V D^T + sigma^2 I is singular");
    return linalg::symmetrize(D.transpose() * ldlt.solve(D));
}

inline Matrix pi_from_d(const ShapingMatrix& D, const Matrix& V, const PrivacySpec& priv)
{
    return pi_from_d(D.matrix(), V, priv.kappa * D.sensitivity());
}

/// Equivalent matrix-inversion-lemma form
///   Pi = V^{-1} - V^{-1} (V^{-1} + D^T D / sigma^2)^{-1} V^{-1}.
/// Requires sigma > 0.
inline Matrix pi_from_d_information_form(const Matrix& D, const Matrix& V, double noise_std)
{
    if (!(noise_std > 0.0))
        throw DomainError("information form requires a positive noise level");
    const Matrix Vinv = linalg::spd_inverse(V, "V");
    const Matrix inner = Vinv + D.transpose() * D / (noise_std * noise_std);
    return linalg::symmetrize(Vinv - Vinv * linalg::spd_inverse(inner, "V^{-1} + D^T D / sigma^2") * Vinv);
}

inline Matrix kf_time_update(const Matrix& Sigma, const Matrix& A, const Matrix& W)
{
    if (A.cols() != Sigma.rows() || W.rows() != A.rows())
        throw DimensionError("time update operands have inconsistent shapes");
    return linalg::symmetrize(A * Sigma * A.transpose() + W);
}

/// Information-form update Sigma = (Sigma_bar^{-1} + C^T Pi C)^{-1}.
inline Matrix kf_measurement_update(const Matrix& Sigma_bar, const Matrix& C, const Matrix& Pi)
{
    if (C.cols() != Sigma_bar.rows() || Pi.rows() != C.rows())
        throw DimensionError("measurement update operands have inconsistent shapes");
    if (Pi.isZero(0.0)) {
        if (!linalg::is_positive_definite(Sigma_bar, 1e-9))
            throw NumericalError("predicted covariance is not positive definite");
        return Sigma_bar;
    }
    const Matrix info = linalg::spd_inverse(Sigma_bar, "predicted covariance") +
                        C.transpose() * Pi * C;
    return linalg::spd_inverse(info, "posterior information matrix");
}

/// Covariance sequences obtained from a fixed Pi over the model horizon.
struct CovarianceTrace {
    std::vector<Matrix> predicted; ///< Sigma_bar_t, t = 0..T
    std::vector<Matrix> posterior; ///< Sigma_t, t = 0..T
    std::vector<double> mse;       ///< Tr(L_t Sigma_t L_t^T)
    double cost = 0.0;             ///< time average of mse
};

inline CovarianceTrace covariance_recursion(const GlobalModel& model, const Matrix& Pi)
{
    CovarianceTrace out;
    const auto T = model.horizon();
    Matrix predicted = model.Sigma0();
    for (std::size_t t = 0; t <= T; ++t) {
        if (t > 0)
            predicted = kf_time_update(out.posterior.back(), model.A(t - 1), model.W(t - 1));
        Matrix posterior;
        try {
            posterior = kf_measurement_update(predicted, model.C(t), Pi);
        }
        catch (const NumericalError& e) {
            throw NumericalError(std::string(e.what()) + " at t=" + std::to_string(t));
        }
        out.mse.push_back((model.L(t) * posterior * model.L(t).transpose()).trace());
        out.predicted.push_back(std::move(predicted));
        out.posterior.push_back(std::move(posterior));
    }
    double sum = 0.0;
    for (double v : out.mse)
        sum += v;
    out.cost = sum / static_cast<double>(T + 1);
    return out;
}

/// Time-varying filter realizing a shaping design.
struct FilterDesign {
    Matrix D;
    double noise_std = 0.0;
    Matrix Pi;
    Matrix R;                    ///< D V D^T + sigma^2 I_q
    std::vector<Matrix> DC;      ///< effective observation matrices D C_t
    std::vector<Matrix> gains;   ///< K_t, m x q
    CovarianceTrace covariance;

    double cost() const { return covariance.cost; }
};

/// Filter for an arbitrary shaping matrix and noise level.
inline FilterDesign run_covariance_recursion(const GlobalModel& model, const Matrix& D, double noise_std)
{
    FilterDesign f;
    f.D = D;
    f.noise_std = noise_std;
    f.Pi = pi_from_d(D, model.V(), noise_std);
    f.R = linalg::symmetrize(f.D * model.V() * f.D.transpose() +
                             noise_std * noise_std * Matrix::Identity(f.D.rows(), f.D.rows()));
    f.covariance = covariance_recursion(model, f.Pi);
    const bool informative = !f.Pi.isZero(0.0);
    for (std::size_t t = 0; t <= model.horizon(); ++t) {
        Matrix H = f.D * model.C(t);
        if (!informative) {
            f.gains.push_back(Matrix::Zero(model.state_dim(), f.D.rows()));
        }
        else {
            const Matrix& Sb = f.covariance.predicted[t];
            const Matrix innov = linalg::symmetrize(H * Sb * H.transpose() + f.R);
            Eigen::LLT<Matrix> llt(innov);
            if (llt.info() != Eigen::Success)
                throw NumericalError("innovation covariance is not positive definite at t=" +
                                     std::to_string(t));
            f.gains.push_back(llt.solve(H * Sb).transpose());
        }
        f.DC.push_back(std::move(H));
    }
    return f;
}

inline FilterDesign run_covariance_recursion(const GlobalModel& model, const ShapingMatrix& D,
                                             const PrivacySpec& priv)
{
    return run_covariance_recursion(model, D.matrix(), priv.kappa * D.sensitivity());
}

inline FilterDesign run_covariance_recursion(const GlobalModel& model, const MechanismSpec& mech)
{
    return run_covariance_recursion(model, mech.shaping().matrix(), mech.noise_std());
}

/// Error raised when the steady-state iteration does not settle.
class ConvergenceError : public NumericalError {
public:
    ConvergenceError(const std::string& what, double residual)
        : NumericalError(what + " (last relative change " + std::to_string(residual) + ")"),
          residual_(residual)
    {
    }
    double residual() const { return residual_; }

private:
    double residual_;
};

struct SteadyState {
    Matrix predicted;
    Matrix posterior;
    std::size_t iterations = 0;
    double residual = 0.0;
};

struct SteadyStateOptions {
    double tolerance = 1e-11;
    std::size_t max_iterations = 100000;
    /// When set, convergence is judged on L X L^T only. Needed when D leaves
    /// unstable modes undetectable: the full covariance then grows without
    /// bound while the query variance still settles.
    std::optional<Matrix> query;
};

/// Fixed point of the predicted-covariance Riccati map, iterated from W.
///
/// The stopping rule bounds the distance to the fixed point rather than the
/// last step: with observed contraction r, ||X_k - X*|| <= ||dX_k|| r / (1 - r).
inline SteadyState steady_state_covariance(const Matrix& A, const Matrix& C, const Matrix& W,
                                           const Matrix& Pi, SteadyStateOptions opts = {})
{
    SteadyState out;
    Matrix predicted = W;
    double prev_change = std::numeric_limits<double>::infinity();
    constexpr double noise_floor = 64.0 * std::numeric_limits<double>::epsilon();
    for (std::size_t k = 1; k <= opts.max_iterations; ++k) {
        const Matrix posterior = kf_measurement_update(predicted, C, Pi);
        Matrix next = kf_time_update(posterior, A, W);
        const double change =
            opts.query ? (*opts.query * (next - predicted) * opts.query->transpose()).norm() /
                             std::max((*opts.query * next * opts.query->transpose()).norm(), 1e-300)
                       : (next - predicted).norm() / std::max(next.norm(), 1e-300);
        predicted = std::move(next);
        out.iterations = k;
        out.residual = change;
        const double rate = change / prev_change;
        prev_change = change;
        if (change <= noise_floor)
            break;
        if (change <= opts.tolerance && rate < 1.0 && change * rate / (1.0 - rate) <= opts.tolerance)
            break;
        if (!std::isfinite(change))
            throw ConvergenceError("steady-state iteration diverged", change);
        if (k == opts.max_iterations)
            throw ConvergenceError("steady-state iteration did not converge", change);
    }
    out.posterior = kf_measurement_update(predicted, C, Pi);
    out.predicted = std::move(predicted);
    return out;
}

inline SteadyState steady_state_covariance(const GlobalModel& model, const Matrix& Pi,
                                           SteadyStateOptions opts = {})
{
    if (!model.is_time_invariant())
        throw DomainError("steady-state solution requires a time-invariant model");
    return steady_state_covariance(model.A(0), model.C(0), model.W(0), Pi, opts);
}

inline SteadyState steady_state_covariance(const GlobalModel& model, const ShapingMatrix& D,
                                           const PrivacySpec& priv, SteadyStateOptions opts = {})
{
    return steady_state_covariance(model, pi_from_d(D, model.V(), priv), opts);
}

/// Scalar aggregation scenario: n identical participants with x_{t+1} = a x_t + w_t,
/// y_t = c x_t + v_t, common adjacency bound rho and query z_t = sum_i x_{i,t}.
struct ScalarScenario {
    double a = 1.0;
    double c = 1.0;
    double sigma_w2 = 1.0;
    double sigma_v2 = 1.0;
    double rho = 1.0;
    int n = 1;
    double epsilon = 1.0;
    double delta = 0.05;

    void validate() const
    {
        if (!(sigma_w2 > 0.0) || !(sigma_v2 >= 0.0) || n < 1 || c == 0.0)
            throw DomainError("scalar scenario requires sigma_w2 > 0, sigma_v2 >= 0, c != 0, n >= 1");
    }

    double gamma() const { return calibrate(epsilon, delta).kappa * rho; }
};

struct ScalarMse {
    double mse = 0.0;
    double beta = 0.0;
};

namespace detail {

/// Predicted steady-state variance of z for effective measurement-noise variance r_eff
/// per participant, scaled to n participants.
inline ScalarMse scalar_closed_form(const ScalarScenario& s, double r_eff)
{
    const double c2 = s.c * s.c;
    ScalarMse out;
    out.beta = (1.0 - s.a * s.a) * r_eff - c2 * s.sigma_w2;
    const double disc = out.beta * out.beta + 4.0 * r_eff * s.sigma_w2 * c2;
    out.mse = static_cast<double>(s.n) / (2.0 * c2) * (-out.beta + std::sqrt(disc));
    return out;
}

} // namespace detail

/// Input perturbation: every participant releases y_i + N(0, gamma^2).
inline ScalarMse mse_input_perturbation_scalar(const ScalarScenario& s)
{
    s.validate();
    const double g = s.gamma();
    return detail::scalar_closed_form(s, s.sigma_v2 + g * g);
}

/// Aggregate-then-perturb: the sum of the y_i is released with N(0, gamma^2).
inline ScalarMse mse_aggregated_scalar(const ScalarScenario& s)
{
    s.validate();
    const double g = s.gamma();
    return detail::scalar_closed_form(s, s.sigma_v2 + g * g / static_cast<double>(s.n));
}

} // namespace dpkf
