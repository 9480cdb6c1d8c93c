#pragma once

// Synthesis of the static shaping matrix D by semidefinite programming.
//
// Decision variables: Pi (p x p), information matrices Omega_t = Sigma_t^{-1}
// (m x m) and slacks X_t (z x z) bounding L_t Omega_t^{-1} L_t^T. The problem is
//
//   min (1/(T+1)) sum_t Tr X_t
//   [X_t  L_t; L_t^T  Omega_t] >= 0                                  t = 0..T
//   Omega_0 = Sigma_bar_0^{-1} + C_0^T Pi C_0
//   [C_{t+1}^T Pi C_{t+1} - Omega_{t+1} + Xi_t,  Xi_t A_t;
//    A_t^T Xi_t,  Omega_t + A_t^T Xi_t A_t] >= 0                      t = 0..T-1
//   [I/alpha_i^2 + V_i^{-1},  E_i^T;  E_i,  V - V Pi V] >= 0          i = 1..n
//
// with Xi_t = W_t^{-1} and alpha_i = kappa rho_i. The stationary variant keeps a
// single Omega and X. A shaping matrix with Delta_2 D = 1 is recovered from the
// optimal Pi by factoring kappa^2 [(V - V Pi V)^{-1} - V^{-1}] = D^T D.

#include "dpkf/lin_model.hpp"
#include "dpkf/linalg.hpp"
#include "dpkf/privacy.hpp"
#include "dpkf/riccati.hpp"
#include "dpkf/sdp.hpp"

#include <optional>
#include <string>
#include <vector>

namespace dpkf {

/// Strict Omega > 0 is imposed as Omega >= omega_floor * I.
inline constexpr double omega_floor = 1e-9;

/// Semidefinite program for one design instance, with handles to its variables.
struct SdpProblem {
    sdp::Problem program;
    sdp::VarRef pi;
    std::vector<sdp::VarRef> omega; ///< one per time step (a single entry when stationary)
    std::vector<sdp::VarRef> slack; ///< X_t, matching omega
    std::vector<double> alpha;      ///< kappa * rho_i
    std::vector<Matrix> xi;         ///< W_t^{-1}
    bool stationary = false;
};

namespace detail {

inline Matrix process_information(const Matrix& W, std::size_t t)
{
    Eigen::LLT<Matrix> llt(linalg::symmetrize(W));
    const double scale = W.cwiseAbs().maxCoeff();
    if (llt.info() != Eigen::Success || llt.matrixL().toDenseMatrix().diagonal().minCoeff() <=
                                            1e-7 * std::sqrt(scale))
        throw DomainError("process-noise covariance W at t=" + std::to_string(t) +
                          " is singular or nearly so; add eta*I with a chosen eta > 0");
    return linalg::symmetrize(llt.solve(Matrix::Identity(W.rows(), W.cols())));
}

inline void add_pi_constraints(SdpProblem& sp, const GlobalModel& model, const AdjacencySpec& adj,
                               const PrivacySpec& priv)
{
    if (adj.size() != model.participants())
        throw DimensionError("adjacency specification must list one rho per participant");
    const auto p = model.output_dim();
    const Matrix& V = model.V();
    sp.program.add_lmi(
        sdp::Lmi("pi_psd", p, true).set(0, 0, sdp::AffineExpr(p, p).add(sp.pi)));
    for (std::size_t i = 0; i < model.participants(); ++i) {
        const auto pi_dim = model.output_dim(i);
        const double alpha = priv.kappa * adj.rho(i);
        sp.alpha.push_back(alpha);
        const Matrix Vi = model.model(i).V();
        const Matrix top = Matrix::Identity(pi_dim, pi_dim) / (alpha * alpha) +
                           linalg::spd_inverse(Vi, "V_i");
        sdp::AffineExpr lower(V);
        lower.add(sp.pi, -V, V);
        sp.program.add_lmi(sdp::Lmi("pi_lmi[" + std::to_string(i) + "]", pi_dim + p)
                               .set(0, 0, sdp::AffineExpr(top))
                               .set(0, pi_dim, sdp::AffineExpr(Matrix(model.selector(i).transpose())))
                               .set(pi_dim, pi_dim, std::move(lower)));
    }
}

inline sdp::Lmi slack_lmi(const std::string& label, const Matrix& L, sdp::VarRef X, sdp::VarRef Omega)
{
    const auto z = L.rows();
    const auto m = L.cols();
    return std::move(sdp::Lmi(label, z + m)
                         .set(0, 0, sdp::AffineExpr(z, z).add(X))
                         .set(0, z, sdp::AffineExpr(L))
                         .set(z, z, sdp::AffineExpr(m, m).add(Omega)));
}

inline sdp::Lmi dynamics_lmi(const std::string& label, const Matrix& A, const Matrix& C_next,
                             const Matrix& Xi, sdp::VarRef Pi, sdp::VarRef Omega_now,
                             sdp::VarRef Omega_next)
{
    const auto m = A.rows();
    sdp::AffineExpr top(Xi);
    top.add(Pi, C_next.transpose(), C_next).add(Omega_next, -1.0);
    sdp::AffineExpr bottom(linalg::symmetrize(A.transpose() * Xi * A));
    bottom.add(Omega_now);
    return std::move(sdp::Lmi(label, 2 * m)
                         .set(0, 0, std::move(top))
                         .set(0, m, sdp::AffineExpr(Matrix(Xi * A)))
                         .set(m, m, std::move(bottom)));
}

inline void add_omega_floor(SdpProblem& sp, sdp::VarRef Omega, Eigen::Index m, const std::string& label)
{
    sdp::AffineExpr e(-omega_floor * Matrix::Identity(m, m));
    e.add(Omega);
    sp.program.add_lmi(sdp::Lmi(label, m, true).set(0, 0, std::move(e)));
}

} // namespace detail

/// Finite-horizon design program over t = 0..T, T = model.horizon().
inline SdpProblem build_finite_horizon_sdp(const GlobalModel& model, const AdjacencySpec& adj,
                                           const PrivacySpec& priv)
{
    SdpProblem sp;
    const auto T = model.horizon();
    const auto m = model.state_dim();
    const auto p = model.output_dim();
    const auto z = model.query_dim();
    for (std::size_t t = 0; t < T; ++t)
        sp.xi.push_back(detail::process_information(model.W(t), t));

    sp.pi = sp.program.add_variable("Pi", p);
    for (std::size_t t = 0; t <= T; ++t) {
        sp.omega.push_back(sp.program.add_variable("Omega[" + std::to_string(t) + "]", m));
        sp.slack.push_back(sp.program.add_variable("X[" + std::to_string(t) + "]", z));
    }

    detail::add_pi_constraints(sp, model, adj, priv);
    for (std::size_t t = 0; t <= T; ++t) {
        const auto ts = std::to_string(t);
        detail::add_omega_floor(sp, sp.omega[t], m, "omega_pd[" + ts + "]");
        sp.program.add_lmi(detail::slack_lmi("slack[" + ts + "]", model.L(t), sp.slack[t], sp.omega[t]));
        sp.program.add_objective(sp.slack[t], Matrix::Identity(z, z) / static_cast<double>(T + 1));
    }

    sdp::AffineExpr init(-linalg::spd_inverse(model.Sigma0(), "initial covariance"));
    init.add(sp.omega[0]).add(sp.pi, -model.C(0).transpose(), model.C(0));
    sp.program.add_equality("omega_init", std::move(init));

    for (std::size_t t = 0; t < T; ++t)
        sp.program.add_lmi(detail::dynamics_lmi("dynamics[" + std::to_string(t) + "]", model.A(t),
                                                model.C(t + 1), sp.xi[t], sp.pi, sp.omega[t],
                                                sp.omega[t + 1]));
    return sp;
}

/// Stationary design program for a time-invariant model.
inline SdpProblem build_stationary_sdp(const GlobalModel& model, const AdjacencySpec& adj,
                                       const PrivacySpec& priv)
{
    if (!model.is_time_invariant())
        throw DomainError("stationary design requires a time-invariant model");
    SdpProblem sp;
    sp.stationary = true;
    const auto m = model.state_dim();
    const auto p = model.output_dim();
    const auto z = model.query_dim();
    sp.xi.push_back(detail::process_information(model.W(0), 0));

    sp.pi = sp.program.add_variable("Pi", p);
    sp.omega.push_back(sp.program.add_variable("Omega", m));
    sp.slack.push_back(sp.program.add_variable("X", z));

    detail::add_pi_constraints(sp, model, adj, priv);
    detail::add_omega_floor(sp, sp.omega[0], m, "omega_pd");
    sp.program.add_lmi(detail::slack_lmi("slack", model.L(0), sp.slack[0], sp.omega[0]));
    sp.program.add_lmi(detail::dynamics_lmi("dynamics", model.A(0), model.C(0), sp.xi[0], sp.pi,
                                            sp.omega[0], sp.omega[0]));
    sp.program.add_objective(sp.slack[0], Matrix::Identity(z, z));
    return sp;
}

inline sdp::Solution solve_sdp(const SdpProblem& problem, const sdp::Settings& settings = {})
{
    return sdp::solve(problem.program, settings);
}

/// Result of factoring Pi back into a shaping matrix.
struct DRecovery {
    ShapingMatrix shaping;
    Eigen::Index rank = 0;    ///< numerical rank q of M; zero means the release carries nothing
    Vector m_eigenvalues;     ///< spectrum of M before clipping, ascending
};

/// Factors M = kappa^2 [(V - V Pi V)^{-1} - V^{-1}] = D^T D. Eigenvalues of M
/// within -neg_tol of zero are clipped; those above rank_tol * lambda_max are kept.
inline DRecovery recover_d(const Matrix& Pi, const Matrix& V, const PrivacySpec& priv,
                           const AdjacencySpec& adj, const std::vector<Eigen::Index>& block_cols,
                           double rank_tol = 1e-8, double neg_tol = 1e-6)
{
    if (Pi.rows() != V.rows() || Pi.cols() != V.cols())
        throw DimensionError("Pi and V must have the same shape");
    const Matrix reduced = linalg::symmetrize(V - V * Pi * V);
    Eigen::LLT<Matrix> llt(reduced);
    if (llt.info() != Eigen::Success)
        throw NumericalError("V - V Pi V is singular or indefinite; Pi is not feasible");
    const Matrix M = priv.kappa * priv.kappa *
                     (linalg::symmetrize(llt.solve(Matrix::Identity(V.rows(), V.cols()))) -
                      linalg::spd_inverse(V, "V"));
    auto fac = linalg::psd_factor(M, rank_tol);
    if (fac.eigenvalues.size() && fac.eigenvalues.minCoeff() < -neg_tol)
        throw NumericalError("Pi does not correspond to any shaping matrix (M has eigenvalue " +
                             std::to_string(fac.eigenvalues.minCoeff()) + ")");
    const Eigen::Index rank = fac.factor.rows();
    Matrix D = rank > 0 ? fac.factor : Matrix::Zero(1, V.cols());
    return DRecovery{ShapingMatrix(std::move(D), block_cols, adj), rank, std::move(fac.eigenvalues)};
}

/// Raises the per-participant sensitivities rho_i ||D_i||_2 to the common value
/// Delta_2 D by factoring D^T D + diag(eta_i I), eta_i = (Delta_2 D / rho_i)^2 - ||D_i||_2^2.
inline ShapingMatrix equalize_sensitivity(const ShapingMatrix& D, double rank_tol = 1e-13)
{
    const double delta = D.sensitivity();
    if (!(delta > 0.0))
        throw DomainError("cannot equalize a zero shaping matrix");
    const auto adj = D.adjacency();
    Matrix M = D.matrix().transpose() * D.matrix();
    Eigen::Index off = 0;
    for (std::size_t i = 0; i < D.blocks(); ++i) {
        const auto w = D.block_cols()[i];
        const double norm = linalg::spectral_norm(D.block(i));
        const double target = delta / adj.rho(i);
        const double eta = std::max(0.0, target * target - norm * norm);
        M.block(off, off, w, w).diagonal().array() += eta;
        off += w;
    }
    auto fac = linalg::psd_factor(M, rank_tol);
    return ShapingMatrix(std::move(fac.factor), D.block_cols(), adj);
}

/// R_t(Omega_1, Omega_2) = C_{t+1}^T Pi C_{t+1} - Omega_2 + Xi_t
///                         - Xi_t A_t (Omega_1 + A_t^T Xi_t A_t)^{-1} A_t^T Xi_t.
inline Matrix rt_operator(const GlobalModel& model, const Matrix& Pi, std::size_t t,
                          const Matrix& Omega1, const Matrix& Omega2)
{
    const Matrix Xi = detail::process_information(model.W(t), t);
    const Matrix& A = model.A(t);
    const Matrix& C = model.C(t + 1);
    const Matrix inner = linalg::spd_inverse(Omega1 + A.transpose() * Xi * A, "Omega + A^T Xi A");
    return linalg::symmetrize(C.transpose() * Pi * C - Omega2 + Xi -
                              Xi * A * inner * A.transpose() * Xi);
}

/// Builds covariances satisfying the exact Riccati equalities from a feasible
/// information sequence: Sigma_0 = Omega_0^{-1},
/// Sigma_{t+1} = (Omega_{t+1} + R_t(Sigma_t^{-1}, Omega_{t+1}))^{-1}.
inline std::vector<Matrix> reconstruct_sigma(const std::vector<Matrix>& omegas, const Matrix& Pi,
                                             const GlobalModel& model)
{
    if (omegas.size() != model.horizon() + 1)
        throw DimensionError("one information matrix per time step required");
    std::vector<Matrix> sigmas;
    sigmas.push_back(linalg::spd_inverse(omegas[0], "Omega at t=0"));
    for (std::size_t t = 0; t + 1 < omegas.size(); ++t) {
        const Matrix info_now = linalg::spd_inverse(sigmas.back(), "Sigma at t=" + std::to_string(t));
        const Matrix tilde = omegas[t + 1] + rt_operator(model, Pi, t, info_now, omegas[t + 1]);
        sigmas.push_back(linalg::spd_inverse(tilde, "reconstructed information at t=" +
                                                        std::to_string(t + 1)));
    }
    return sigmas;
}

/// Largest Frobenius residual of the exact covariance recursion for a Sigma sequence.
inline double riccati_residual(const std::vector<Matrix>& sigmas, const Matrix& Pi,
                               const GlobalModel& model)
{
    double worst = 0.0;
    const Matrix start = linalg::spd_inverse(model.Sigma0(), "initial covariance") +
                         model.C(0).transpose() * Pi * model.C(0);
    auto rel = [](const Matrix& a, const Matrix& b) { return (a - b).norm() / std::max(1.0, b.norm()); };
    worst = rel(linalg::spd_inverse(sigmas[0]), start);
    for (std::size_t t = 0; t + 1 < sigmas.size(); ++t) {
        const Matrix pred = kf_time_update(sigmas[t], model.A(t), model.W(t));
        const Matrix expect = linalg::spd_inverse(pred) + model.C(t + 1).transpose() * Pi * model.C(t + 1);
        worst = std::max(worst, rel(linalg::spd_inverse(sigmas[t + 1]), expect));
    }
    return worst;
}

enum class Horizon { finite, stationary };

struct DesignOptions {
    sdp::Settings solver;
    double rank_tol = 1e-8;
    double activity_tol = 1e-4;
    double condition_threshold = 1e-10;
};

struct DesignSolution {
    Horizon horizon = Horizon::stationary;
    sdp::Status status = sdp::Status::failed;
    std::vector<std::string> warnings;
    Matrix pi;
    std::vector<Matrix> omegas;
    std::vector<Matrix> sigmas; ///< reconstructed posterior covariances (finite horizon)
    std::optional<DRecovery> recovery;
    double sdp_objective = 0.0;
    double riccati_cost = 0.0;  ///< cost of the recovered D evaluated by the filter recursion
    double predicted_cost = 0.0; ///< same, with predicted instead of posterior covariance
    std::vector<double> block_sensitivities;
    double activity_error = 0.0;     ///< max_i |rho_i ||D_i||_2 - 1|
    bool tightness_condition = false; ///< some L_t Omega_t^{-1} C_t^T != 0
    std::optional<FilterDesign> filter;     // finite horizon
    std::optional<SteadyState> steady;      // stationary
    sdp::Solution solver;

    const ShapingMatrix& shaping() const { return recovery.value().shaping; }
};

class DesignError : public Error {
public:
    DesignError(const std::string& what, sdp::Status status) : Error(what), status_(status) {}
    sdp::Status status() const { return status_; }

private:
    sdp::Status status_;
};

/// Builds and solves the design program, recovers D, and evaluates it with the
/// Riccati recursion (finite horizon) or the steady-state solver (stationary).
inline DesignSolution design_pipeline(const GlobalModel& model, const AdjacencySpec& adj,
                                      const PrivacySpec& priv, Horizon horizon,
                                      const DesignOptions& opts = {})
{
    DesignSolution out;
    out.horizon = horizon;
    const SdpProblem sp = horizon == Horizon::stationary ? build_stationary_sdp(model, adj, priv)
                                                         : build_finite_horizon_sdp(model, adj, priv);
    out.solver = solve_sdp(sp, opts.solver);
    out.status = out.solver.status;
    if (out.status == sdp::Status::infeasible || out.status == sdp::Status::failed)
        throw DesignError("design program not solved: " + out.solver.message + " (gap " +
                              std::to_string(out.solver.relative_gap) + ", primal residual " +
                              std::to_string(out.solver.primal_infeasibility) + ", dual residual " +
                              std::to_string(out.solver.dual_infeasibility) + ")",
                          out.status);
    out.pi = linalg::symmetrize(out.solver.value(sp.pi));
    for (const auto& o : sp.omega)
        out.omegas.push_back(out.solver.value(o));
    out.sdp_objective = out.solver.primal_objective;

    out.recovery = recover_d(out.pi, model.V(), priv, adj, model.output_dims(), opts.rank_tol);
    if (out.recovery->rank == 0)
        throw DesignError("optimal Pi is zero: the release carries no information", out.status);

    out.block_sensitivities = out.shaping().block_sensitivities();
    for (double s : out.block_sensitivities)
        out.activity_error = std::max(out.activity_error, std::abs(s - 1.0));

    for (std::size_t t = 0; t < out.omegas.size(); ++t) {
        const std::size_t tt = horizon == Horizon::stationary ? 0 : t;
        const Matrix probe = model.L(tt) * linalg::spd_inverse(out.omegas[t], "Omega") *
                             model.C(tt).transpose();
        if (probe.cwiseAbs().maxCoeff() > opts.condition_threshold)
            out.tightness_condition = true;
    }
    if (!out.tightness_condition)
        out.warnings.push_back("L_t Omega_t^{-1} C_t^T vanishes for every t; tightness is not guaranteed");
    if (out.activity_error > opts.activity_tol) {
        out.warnings.push_back("sensitivity constraints not active at the solution (max deviation " +
                               std::to_string(out.activity_error) + ")");
        if (out.status == sdp::Status::optimal)
            out.status = sdp::Status::near_optimal;
    }

    if (horizon == Horizon::finite) {
        out.sigmas = reconstruct_sigma(out.omegas, out.pi, model);
        out.filter = run_covariance_recursion(model, out.shaping(), priv);
        out.riccati_cost = out.filter->cost();
        double pred = 0.0;
        for (std::size_t t = 0; t <= model.horizon(); ++t)
            pred += (model.L(t) * out.filter->covariance.predicted[t] * model.L(t).transpose()).trace();
        out.predicted_cost = pred / static_cast<double>(model.horizon() + 1);
    }
    else {
        SteadyStateOptions ss;
        ss.query = model.L(0);
        out.steady = steady_state_covariance(model, out.shaping(), priv, ss);
        out.riccati_cost = (model.L(0) * out.steady->posterior * model.L(0).transpose()).trace();
        out.predicted_cost = (model.L(0) * out.steady->predicted * model.L(0).transpose()).trace();
    }
    return out;
}

/// Input perturbation baselines expressed as fixed shaping matrices.
enum class InputPerturbation {
    equalized, ///< D = diag(I_{p_i} / rho_i): per-participant noise std kappa rho_i
    max_rho,   ///< D = I_p: noise std kappa max_i rho_i on every channel
};

inline ShapingMatrix input_perturbation(const GlobalModel& model, const AdjacencySpec& adj,
                                        InputPerturbation kind)
{
    const auto p = model.output_dim();
    Matrix D = Matrix::Identity(p, p);
    if (kind == InputPerturbation::equalized)
        for (std::size_t i = 0; i < model.participants(); ++i)
            D.block(model.output_offset(i), model.output_offset(i), model.output_dim(i),
                    model.output_dim(i)) /= adj.rho(i);
    return ShapingMatrix(std::move(D), model.output_dims(), adj);
}

/// Analytic cost of a fixed shaping matrix: steady state for stationary
/// evaluation, the finite-horizon average otherwise.
struct DesignCost {
    double posterior = 0.0;
    double predicted = 0.0;
};

inline DesignCost evaluate_design(const GlobalModel& model, const ShapingMatrix& D,
                                  const PrivacySpec& priv, Horizon horizon)
{
    DesignCost c;
    if (horizon == Horizon::stationary) {
        SteadyStateOptions opts;
        opts.query = model.L(0);
        const auto ss = steady_state_covariance(model, D, priv, opts);
        c.posterior = (model.L(0) * ss.posterior * model.L(0).transpose()).trace();
        c.predicted = (model.L(0) * ss.predicted * model.L(0).transpose()).trace();
        return c;
    }
    const auto tr = covariance_recursion(model, pi_from_d(D, model.V(), priv));
    c.posterior = tr.cost;
    for (std::size_t t = 0; t <= model.horizon(); ++t)
        c.predicted += (model.L(t) * tr.predicted[t] * model.L(t).transpose()).trace();
    c.predicted /= static_cast<double>(model.horizon() + 1);
    return c;
}

} // namespace dpkf
