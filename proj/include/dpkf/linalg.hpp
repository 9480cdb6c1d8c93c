#pragma once

// Dense linear-algebra helpers shared by the filtering, privacy and design
// layers. Everything here works on Eigen dynamic-size double matrices.

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace dpkf {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shapes of operands do not agree.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
public:
    using Error::Error;
};

/// A factorization failed or a matrix lost definiteness during a recursion.
class NumericalError : public Error {
public:
    using Error::Error;
};

namespace linalg {

inline Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

inline bool is_square(const Matrix& m) { return m.rows() == m.cols(); }

/// Symmetric to `rel_tol` relative to the largest entry.
inline bool is_symmetric(const Matrix& m, double rel_tol = 1e-12)
{
    if (!is_square(m))
        return false;
    const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
    return (m - m.transpose()).cwiseAbs().maxCoeff() <= rel_tol * scale;
}

/// Accepted iff symmetric and a Cholesky factorization succeeds.
inline bool is_positive_definite(const Matrix& m, double rel_tol = 1e-12)
{
    if (m.size() == 0 || !is_symmetric(m, rel_tol))
        return false;
    Eigen::LLT<Matrix> llt(symmetrize(m));
    return llt.info() == Eigen::Success;
}

inline double min_eigenvalue(const Matrix& m)
{
    if (m.size() == 0)
        return 0.0;
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(m), Eigen::EigenvaluesOnly);
    return es.eigenvalues()(0);
}

inline double max_eigenvalue(const Matrix& m)
{
    if (m.size() == 0)
        return 0.0;
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(m), Eigen::EigenvaluesOnly);
    return es.eigenvalues()(es.eigenvalues().size() - 1);
}

/// Largest singular value. Empty matrices have norm zero.
inline double spectral_norm(const Matrix& m)
{
    if (m.size() == 0)
        return 0.0;
    Eigen::JacobiSVD<Matrix> svd(m);
    return svd.singularValues()(0);
}

/// Inverse of a symmetric positive definite matrix, symmetrized afterwards.
/// `what` names the operand in the error message.
inline Matrix spd_inverse(const Matrix& m, const std::string& what = "matrix")
{
    Eigen::LLT<Matrix> llt(symmetrize(m));
    if (llt.info() != Eigen::Success)
        throw NumericalError(what + " is not positive definite");
    return symmetrize(llt.solve(Matrix::Identity(m.rows(), m.cols())));
}

/// Lower-triangular Cholesky factor, used as a covariance square root.
inline Matrix cholesky_factor(const Matrix& m, const std::string& what = "matrix")
{
    Eigen::LLT<Matrix> llt(symmetrize(m));
    if (llt.info() != Eigen::Success)
        throw NumericalError(what + " is not positive definite");
    return llt.matrixL();
}

/// Block-diagonal concatenation in the given order.
inline Matrix block_diag(const std::vector<Matrix>& blocks)
{
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    for (const auto& b : blocks) {
        rows += b.rows();
        cols += b.cols();
    }
    Matrix out = Matrix::Zero(rows, cols);
    Eigen::Index r = 0;
    Eigen::Index c = 0;
    for (const auto& b : blocks) {
        out.block(r, c, b.rows(), b.cols()) = b;
        r += b.rows();
        c += b.cols();
    }
    return out;
}

/// Factorization M = F^T F of a symmetric PSD matrix via its eigendecomposition.
/// Eigenvalues above `rel_rank_tol * lambda_max` are retained; F has one row per
/// retained eigenpair, so its row count is the numerical rank of M.
struct PsdFactor {
    Matrix factor;
    Vector eigenvalues; // full spectrum, ascending
};

inline PsdFactor psd_factor(const Matrix& m, double rel_rank_tol)
{
    PsdFactor out;
    if (m.size() == 0) {
        out.factor = Matrix(0, m.cols());
        return out;
    }
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(m));
    out.eigenvalues = es.eigenvalues();
    const double lmax = out.eigenvalues.maxCoeff();
    if (lmax <= 0.0) {
        out.factor = Matrix(0, m.cols());
        return out;
    }
    const double cut = rel_rank_tol * lmax;
    std::vector<Eigen::Index> keep;
    for (Eigen::Index k = out.eigenvalues.size() - 1; k >= 0; --k)
        if (out.eigenvalues(k) > cut)
            keep.push_back(k);
    out.factor.resize(static_cast<Eigen::Index>(keep.size()), m.cols());
    for (std::size_t r = 0; r < keep.size(); ++r) {
        const auto k = keep[r];
        out.factor.row(static_cast<Eigen::Index>(r)) =
            std::sqrt(out.eigenvalues(k)) * es.eigenvectors().col(k).transpose();
    }
    return out;
}

inline double relative_frobenius(const Matrix& a, const Matrix& b)
{
    const double denom = b.norm();
    if (denom == 0.0)
        return a.norm();
    return (a - b).norm() / denom;
}

} // namespace linalg
} // namespace dpkf
