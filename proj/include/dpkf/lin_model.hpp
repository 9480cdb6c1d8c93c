#pragma once

// Per-participant linear Gaussian state-space models and their block-diagonal
// aggregate.
//
//   x_{i,t+1} = A_{i,t} x_{i,t} + w_{i,t},   w_{i,t} ~ N(0, W_{i,t}),  t = 0..T-1
//   y_{i,t}   = C_{i,t} x_{i,t} + v_{i,t},   v_{i,t} ~ N(0, V_i),      t = 0..T
//
// Transition data (A, W) is stored for t = 0..T-1 and observation data (C, L)
// for t = 0..T. Models are immutable once constructed.

#include "dpkf/linalg.hpp"

#include <cstddef>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace dpkf {

/// Raised by model validation; carries the participant and time index involved
/// when they are known.
class ModelError : public DimensionError {
public:
    ModelError(const std::string& what, std::optional<std::size_t> participant = std::nullopt,
               std::optional<std::size_t> time = std::nullopt)
        : DimensionError(format(what, participant, time)), participant_(participant), time_(time)
    {
    }

    std::optional<std::size_t> participant() const { return participant_; }
    std::optional<std::size_t> time() const { return time_; }

private:
    static std::string format(const std::string& what, std::optional<std::size_t> participant,
                              std::optional<std::size_t> time)
    {
        std::ostringstream os;
        os << what;
        if (participant)
            os << " (participant " << *participant;
        if (time)
            os << (participant ? ", " : " (") << "t=" << *time;
        if (participant || time)
            os << ")";
        return os.str();
    }

    std::optional<std::size_t> participant_;
    std::optional<std::size_t> time_;
};

class IndividualModel {
public:
    IndividualModel(std::vector<Matrix> A, std::vector<Matrix> C, std::vector<Matrix> W, Matrix V,
                    Vector x0_mean, Matrix Sigma0)
        : A_(std::move(A)), C_(std::move(C)), W_(std::move(W)), V_(std::move(V)),
          x0_mean_(std::move(x0_mean)), Sigma0_(std::move(Sigma0))
    {
        validate();
    }

    /// Replicates time-invariant matrices across a horizon of `horizon` transitions.
    static IndividualModel constant(const Matrix& A, const Matrix& C, const Matrix& W,
                                    const Matrix& V, const Vector& x0_mean, const Matrix& Sigma0,
                                    std::size_t horizon)
    {
        return IndividualModel(std::vector<Matrix>(horizon, A), std::vector<Matrix>(horizon + 1, C),
                               std::vector<Matrix>(horizon, W), V, x0_mean, Sigma0);
    }

    std::size_t horizon() const { return C_.size() - 1; }
    Eigen::Index state_dim() const { return Sigma0_.rows(); }
    Eigen::Index output_dim() const { return V_.rows(); }

    const Matrix& A(std::size_t t) const { return A_.at(t); }
    const Matrix& C(std::size_t t) const { return C_.at(t); }
    const Matrix& W(std::size_t t) const { return W_.at(t); }
    const Matrix& V() const { return V_; }
    const Vector& x0_mean() const { return x0_mean_; }
    const Matrix& Sigma0() const { return Sigma0_; }

    const std::vector<Matrix>& A_seq() const { return A_; }
    const std::vector<Matrix>& C_seq() const { return C_; }
    const std::vector<Matrix>& W_seq() const { return W_; }

    bool operator==(const IndividualModel& o) const
    {
        return A_ == o.A_ && C_ == o.C_ && W_ == o.W_ && V_ == o.V_ && x0_mean_ == o.x0_mean_ &&
               Sigma0_ == o.Sigma0_;
    }

private:
    void validate() const
    {
        if (C_.empty())
            throw ModelError("observation sequence must contain at least one matrix");
        if (A_.size() + 1 != C_.size() || W_.size() != A_.size())
            throw ModelError("sequence lengths must be T (A, W) and T+1 (C)");
        const auto m = Sigma0_.rows();
        if (m == 0 || !linalg::is_square(Sigma0_))
            throw ModelError("Sigma0 must be square and nonempty");
        if (!linalg::is_positive_definite(Sigma0_))
            throw ModelError("Sigma0 must be symmetric positive definite");
        if (x0_mean_.size() != m)
            throw ModelError("x0_mean length must equal the state dimension");
        const auto p = V_.rows();
        if (p == 0 || !linalg::is_square(V_))
            throw ModelError("V must be square and nonempty");
        if (!linalg::is_positive_definite(V_))
            throw ModelError("V must be symmetric positive definite");
        for (std::size_t t = 0; t < A_.size(); ++t) {
            if (A_[t].rows() != m || A_[t].cols() != m)
                throw ModelError("A must be m x m", std::nullopt, t);
            if (W_[t].rows() != m || W_[t].cols() != m)
                throw ModelError("W must be m x m", std::nullopt, t);
            if (!linalg::is_positive_definite(W_[t]))
                throw ModelError("W must be symmetric positive definite", std::nullopt, t);
        }
        for (std::size_t t = 0; t < C_.size(); ++t)
            if (C_[t].rows() != p || C_[t].cols() != m)
                throw ModelError("C must be p x m", std::nullopt, t);
    }

    std::vector<Matrix> A_;
    std::vector<Matrix> C_;
    std::vector<Matrix> W_;
    Matrix V_;
    Vector x0_mean_;
    Matrix Sigma0_;
};

/// Per-participant l2 adjacency bounds rho_i: two input signals are adjacent when
/// they differ only in one participant's channel, by at most rho_i in l2 norm.
class AdjacencySpec {
public:
    explicit AdjacencySpec(std::vector<double> rho) : rho_(std::move(rho))
    {
        if (rho_.empty())
            throw DomainError("adjacency needs at least one participant");
        for (std::size_t i = 0; i < rho_.size(); ++i)
            if (!(rho_[i] > 0.0) || !std::isfinite(rho_[i]))
                throw DomainError("rho[" + std::to_string(i) + "] must be positive and finite");
    }

    std::size_t size() const { return rho_.size(); }
    double rho(std::size_t i) const { return rho_.at(i); }
    const std::vector<double>& values() const { return rho_; }

private:
    std::vector<double> rho_;
};

/// Horizontal concatenation [L_1 ... L_n] of per-participant query selectors.
inline Matrix query_row(const std::vector<Matrix>& rows, const std::vector<Eigen::Index>& state_dims)
{
    if (rows.size() != state_dims.size())
        throw ModelError("one query selector per participant required");
    if (rows.empty())
        throw ModelError("at least one participant required");
    const auto z = rows.front().rows();
    Eigen::Index m = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].cols() != state_dims[i])
            throw ModelError("query selector column count must equal the state dimension", i);
        if (rows[i].rows() != z)
            throw ModelError("query selectors must share a row count", i);
        m += state_dims[i];
    }
    Matrix L(z, m);
    Eigen::Index off = 0;
    for (const auto& r : rows) {
        L.middleCols(off, r.cols()) = r;
        off += r.cols();
    }
    return L;
}

/// Constant query sequence L_0 .. L_T built from per-participant selectors.
inline std::vector<Matrix> query_from_rows(const std::vector<Matrix>& rows,
                                           const std::vector<Eigen::Index>& state_dims,
                                           std::size_t horizon)
{
    return std::vector<Matrix>(horizon + 1, query_row(rows, state_dims));
}

class GlobalModel {
public:
    std::size_t participants() const { return models_.size(); }
    std::size_t horizon() const { return C_.size() - 1; }
    Eigen::Index state_dim() const { return Sigma0_.rows(); }
    Eigen::Index output_dim() const { return V_.rows(); }
    Eigen::Index query_dim() const { return L_.front().rows(); }

    const Matrix& A(std::size_t t) const { return A_.at(t); }
    const Matrix& C(std::size_t t) const { return C_.at(t); }
    const Matrix& W(std::size_t t) const { return W_.at(t); }
    const Matrix& L(std::size_t t) const { return L_.at(t); }
    const Matrix& V() const { return V_; }
    /// Block-diagonal initial covariance diag(Sigma0_1, ..., Sigma0_n).
    const Matrix& Sigma0() const { return Sigma0_; }
    const Vector& x0_mean() const { return x0_; }

    const IndividualModel& model(std::size_t i) const { return models_.at(i); }

    Eigen::Index state_offset(std::size_t i) const { return state_off_.at(i); }
    Eigen::Index output_offset(std::size_t i) const { return output_off_.at(i); }
    Eigen::Index state_dim(std::size_t i) const { return models_.at(i).state_dim(); }
    Eigen::Index output_dim(std::size_t i) const { return models_.at(i).output_dim(); }

    std::vector<Eigen::Index> output_dims() const
    {
        std::vector<Eigen::Index> out;
        for (const auto& m : models_)
            out.push_back(m.output_dim());
        return out;
    }

    /// E_i: p x p_i, identity in output block i.
    Matrix selector(std::size_t i) const
    {
        Matrix E = Matrix::Zero(output_dim(), output_dim(i));
        E.middleRows(output_offset(i), output_dim(i)).setIdentity();
        return E;
    }

    /// Reads participant i back out of the aggregated block-diagonal matrices.
    IndividualModel participant(std::size_t i) const
    {
        const auto so = state_offset(i);
        const auto sm = state_dim(i);
        const auto oo = output_offset(i);
        const auto op = output_dim(i);
        std::vector<Matrix> A;
        std::vector<Matrix> C;
        std::vector<Matrix> W;
        for (const auto& a : A_)
            A.emplace_back(a.block(so, so, sm, sm));
        for (const auto& w : W_)
            W.emplace_back(w.block(so, so, sm, sm));
        for (const auto& c : C_)
            C.emplace_back(c.block(oo, so, op, sm));
        return IndividualModel(std::move(A), std::move(C), std::move(W), V_.block(oo, oo, op, op),
                               x0_.segment(so, sm), Sigma0_.block(so, so, sm, sm));
    }

    /// All sequences constant over time and at least one transition present.
    bool is_time_invariant() const
    {
        if (A_.empty())
            return false;
        for (std::size_t t = 1; t < A_.size(); ++t)
            if (A_[t] != A_[0] || W_[t] != W_[0])
                return false;
        for (std::size_t t = 1; t < C_.size(); ++t)
            if (C_[t] != C_[0] || L_[t] != L_[0])
                return false;
        return true;
    }

    friend GlobalModel build_global(std::vector<IndividualModel> models, std::vector<Matrix> L);

private:
    GlobalModel() = default;

    std::vector<IndividualModel> models_;
    std::vector<Matrix> A_, C_, W_, L_;
    Matrix V_;
    Matrix Sigma0_;
    Vector x0_;
    std::vector<Eigen::Index> state_off_, output_off_;
};

/// Aggregates participants in order into block-diagonal global matrices.
/// `L` holds the query matrices L_0 .. L_T (z x m each).
inline GlobalModel build_global(std::vector<IndividualModel> models, std::vector<Matrix> L)
{
    if (models.empty())
        throw ModelError("at least one participant required");
    const auto T = models.front().horizon();
    for (std::size_t i = 1; i < models.size(); ++i)
        if (models[i].horizon() != T)
            throw ModelError("horizon differs from participant 0", i);

    GlobalModel g;
    Eigen::Index m = 0;
    Eigen::Index p = 0;
    for (const auto& mod : models) {
        g.state_off_.push_back(m);
        g.output_off_.push_back(p);
        m += mod.state_dim();
        p += mod.output_dim();
    }

    if (L.size() != T + 1)
        throw ModelError("query sequence must have length T+1");
    const auto z = L.front().rows();
    for (std::size_t t = 0; t < L.size(); ++t) {
        if (L[t].cols() != m)
            throw ModelError("query matrix column count must equal the total state dimension",
                             std::nullopt, t);
        if (L[t].rows() != z || z == 0)
            throw ModelError("query matrices must share a nonzero row count", std::nullopt, t);
    }

    auto gather = [&](auto&& pick) {
        std::vector<Matrix> blocks;
        blocks.reserve(models.size());
        for (const auto& mod : models)
            blocks.push_back(pick(mod));
        return linalg::block_diag(blocks);
    };

    for (std::size_t t = 0; t < T; ++t) {
        g.A_.push_back(gather([t](const IndividualModel& mod) { return mod.A(t); }));
        g.W_.push_back(gather([t](const IndividualModel& mod) { return mod.W(t); }));
    }
    for (std::size_t t = 0; t <= T; ++t)
        g.C_.push_back(gather([t](const IndividualModel& mod) { return mod.C(t); }));
    g.V_ = gather([](const IndividualModel& mod) { return mod.V(); });
    g.Sigma0_ = gather([](const IndividualModel& mod) { return mod.Sigma0(); });
    g.x0_.resize(m);
    for (std::size_t i = 0; i < models.size(); ++i)
        g.x0_.segment(g.state_off_[i], models[i].state_dim()) = models[i].x0_mean();
    g.L_ = std::move(L);
    g.models_ = std::move(models);
    return g;
}

} // namespace dpkf
