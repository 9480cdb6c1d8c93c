#pragma once

// Shared fixtures: the syndromic surveillance instance and random model generators.

#include "dpkf/design.hpp"
#include "dpkf/lin_model.hpp"
#include "dpkf/privacy.hpp"

#include <cmath>
#include <random>
#include <vector>

namespace dpkf::fixtures {

inline GlobalModel syndromic_model(std::size_t T)
{
    Matrix A(2, 2), W(2, 2), L(1, 2);
    A << -0.4, 0.5, 0.6, 0.75;
    W << 1.0, 0.2, 0.2, 2.0;
    W *= 0.15;
    L << 1.0, 0.0;
    const Matrix C = Matrix::Identity(2, 2);
    const Matrix V = 0.4 * Matrix::Identity(2, 2);
    std::vector<IndividualModel> models;
    std::vector<Matrix> rows;
    for (int i = 0; i < 10; ++i) {
        models.push_back(IndividualModel::constant(A, C, W, V, Vector::Zero(2), Matrix::Identity(2, 2), T));
        rows.push_back(L);
    }
    return build_global(std::move(models), query_from_rows(rows, std::vector<Eigen::Index>(10, 2), T));
}

inline AdjacencySpec syndromic_adjacency()
{
    std::vector<double> rho{5.0, 5.0};
    rho.resize(10, 10.0);
    return AdjacencySpec(rho);
}

inline PrivacySpec syndromic_privacy() { return calibrate(std::log(3.0), 0.01); }

inline Matrix random_matrix(std::mt19937_64& g, Eigen::Index r, Eigen::Index c)
{
    std::normal_distribution<double> n(0.0, 1.0);
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j)
            m(i, j) = n(g);
    return m;
}

/// Symmetric positive definite with eigenvalues at least `floor`.
inline Matrix random_spd(std::mt19937_64& g, Eigen::Index n, double floor = 0.1)
{
    const Matrix B = random_matrix(g, n, n);
    return 0.5 * (B * B.transpose()) / static_cast<double>(n) + floor * Matrix::Identity(n, n);
}

/// Positive semidefinite of rank r.
inline Matrix random_psd(std::mt19937_64& g, Eigen::Index n, Eigen::Index r)
{
    const Matrix B = random_matrix(g, n, r);
    return B * B.transpose();
}

inline double uniform(std::mt19937_64& g, double lo, double hi)
{
    return std::uniform_real_distribution<double>(lo, hi)(g);
}

inline double log_uniform(std::mt19937_64& g, double lo, double hi)
{
    return std::exp(uniform(g, std::log(lo), std::log(hi)));
}

struct RandomInstance {
    GlobalModel model;
    AdjacencySpec adj;
};

/// n participants with state and output dimensions in 1..max_dim, time-invariant
/// over T transitions, with a scalar query touching every participant.
inline RandomInstance random_instance(std::mt19937_64& g, std::size_t n, Eigen::Index max_dim, std::size_t T)
{
    std::uniform_int_distribution<Eigen::Index> dim(1, max_dim);
    std::vector<IndividualModel> models;
    std::vector<Matrix> rows;
    std::vector<Eigen::Index> dims;
    std::vector<double> rho;
    for (std::size_t i = 0; i < n; ++i) {
        const auto m = dim(g);
        const auto p = dim(g);
        Matrix A = random_matrix(g, m, m);
        const double radius = Eigen::EigenSolver<Matrix>(A).eigenvalues().cwiseAbs().maxCoeff();
        A *= uniform(g, 0.3, 1.1) / std::max(radius, 1e-3);
        models.push_back(IndividualModel::constant(A, random_matrix(g, p, m), random_spd(g, m),
                                                   random_spd(g, p), random_matrix(g, m, 1).col(0),
                                                   random_spd(g, m, 0.5), T));
        rows.push_back(random_matrix(g, 1, m));
        dims.push_back(m);
        rho.push_back(log_uniform(g, 0.5, 10.0));
    }
    return {build_global(std::move(models), query_from_rows(rows, dims, T)), AdjacencySpec(rho)};
}

} // namespace dpkf::fixtures
