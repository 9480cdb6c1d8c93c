#pragma once

// Small semidefinite programming toolkit.
//
// Problems are stated over symmetric matrix variables X_1..X_k:
//
//   minimize    sum_j <W_j, X_j>
//   subject to  F_l(X) >= 0            (affine symmetric block matrices, PSD)
//               G_e(X)  = 0            (affine symmetric matrix equalities)
//
// The solver vectorizes the upper triangles of the variables into y and runs an
// infeasible primal-dual path-following method (HKM direction, Mehrotra
// predictor-corrector) on
//
//   min c^T y   s.t.  S = F_0 + sum_i y_i F_i >= 0,  A y = b
//   max -<F_0, Z> + b^T lambda   s.t.  <F_i, Z> + (A^T lambda)_i = c_i,  Z >= 0.

#include "dpkf/linalg.hpp"

#include <Eigen/Sparse>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace dpkf::sdp {

class SolverError : public Error {
public:
    using Error::Error;
};

/// Handle to a symmetric matrix variable of a Problem.
struct VarRef {
    std::size_t id = 0;
};

/// left * X * right for a matrix variable X.
struct Term {
    std::size_t var;
    Matrix left;
    Matrix right;
};

class AffineExpr {
public:
    AffineExpr(Eigen::Index rows, Eigen::Index cols) : constant_(Matrix::Zero(rows, cols)) {}
    explicit AffineExpr(Matrix constant) : constant_(std::move(constant)) {}

    Eigen::Index rows() const { return constant_.rows(); }
    Eigen::Index cols() const { return constant_.cols(); }
    const Matrix& constant() const { return constant_; }
    const std::vector<Term>& terms() const { return terms_; }

    AffineExpr& add(VarRef v, Matrix left, Matrix right)
    {
        if (left.rows() != rows() || right.cols() != cols())
            throw DimensionError("term shape does not match the expression");
        terms_.push_back({v.id, std::move(left), std::move(right)});
        return *this;
    }

    /// scale * X, for a variable whose size matches the expression.
    AffineExpr& add(VarRef v, double scale = 1.0)
    {
        return add(v, scale * Matrix::Identity(rows(), rows()), Matrix::Identity(cols(), cols()));
    }

    AffineExpr& add_constant(const Matrix& m)
    {
        if (m.rows() != rows() || m.cols() != cols())
            throw DimensionError("constant shape does not match the expression");
        constant_ += m;
        return *this;
    }

    Matrix evaluate(const std::vector<Matrix>& values) const
    {
        Matrix out = constant_;
        for (const auto& t : terms_)
            out += t.left * values.at(t.var) * t.right;
        return out;
    }

private:
    Matrix constant_;
    std::vector<Term> terms_;
};

/// Symmetric block matrix constrained to be PSD. Blocks are given for the upper
/// triangle (row offset <= col offset); off-diagonal blocks are mirrored.
class Lmi {
public:
    struct Block {
        Eigen::Index row;
        Eigen::Index col;
        AffineExpr expr;
    };

    Lmi(std::string label, Eigen::Index size, bool domain = false)
        : label_(std::move(label)), size_(size), domain_(domain)
    {
    }

    Lmi& set(Eigen::Index row, Eigen::Index col, AffineExpr expr)
    {
        if (row > col)
            throw DimensionError("LMI blocks are specified on the upper triangle");
        if (row + expr.rows() > size_ || col + expr.cols() > size_)
            throw DimensionError("LMI block exceeds the matrix size in " + label_);
        blocks_.push_back({row, col, std::move(expr)});
        return *this;
    }

    const std::string& label() const { return label_; }
    Eigen::Index size() const { return size_; }
    /// Domain constraints (e.g. X >= 0) restrict variables rather than encode the model.
    bool domain() const { return domain_; }
    const std::vector<Block>& blocks() const { return blocks_; }

    Matrix evaluate(const std::vector<Matrix>& values) const
    {
        Matrix out = Matrix::Zero(size_, size_);
        for (const auto& b : blocks_) {
            const Matrix v = b.expr.evaluate(values);
            out.block(b.row, b.col, v.rows(), v.cols()) += v;
            if (b.row != b.col)
                out.block(b.col, b.row, v.cols(), v.rows()) += v.transpose();
        }
        return out;
    }

private:
    std::string label_;
    Eigen::Index size_;
    bool domain_;
    std::vector<Block> blocks_;
};

struct Equality {
    std::string label;
    AffineExpr expr; ///< symmetric; constrained to equal zero
};

struct ObjectiveTerm {
    std::size_t var;
    Matrix weight; ///< contributes <weight, X>
};

class Problem {
public:
    struct Variable {
        std::string name;
        Eigen::Index dim;
    };

    VarRef add_variable(std::string name, Eigen::Index dim)
    {
        if (dim < 1)
            throw DimensionError("variable dimension must be positive");
        vars_.push_back({std::move(name), dim});
        return {vars_.size() - 1};
    }

    void add_lmi(Lmi lmi)
    {
        for (const auto& b : lmi.blocks())
            check_terms(b.expr, lmi.label());
        lmis_.push_back(std::move(lmi));
    }

    void add_equality(std::string label, AffineExpr expr)
    {
        if (expr.rows() != expr.cols())
            throw DimensionError("equality " + label + " must be square");
        check_terms(expr, label);
        equalities_.push_back({std::move(label), std::move(expr)});
    }

    void add_objective(VarRef v, Matrix weight)
    {
        const auto d = vars_.at(v.id).dim;
        if (weight.rows() != d || weight.cols() != d)
            throw DimensionError("objective weight must match the variable size");
        objective_.push_back({v.id, std::move(weight)});
    }

    const std::vector<Variable>& variables() const { return vars_; }
    const std::vector<Lmi>& lmis() const { return lmis_; }
    const std::vector<Equality>& equalities() const { return equalities_; }
    const std::vector<ObjectiveTerm>& objective() const { return objective_; }

    /// Number of model constraints: non-domain LMIs plus equality families.
    std::size_t constraint_count() const
    {
        std::size_t n = equalities_.size();
        for (const auto& l : lmis_)
            n += l.domain() ? 0 : 1;
        return n;
    }

    double objective_value(const std::vector<Matrix>& values) const
    {
        double v = 0.0;
        for (const auto& o : objective_)
            v += (o.weight.transpose() * values.at(o.var)).trace();
        return v;
    }

    std::size_t scalar_count() const
    {
        std::size_t n = 0;
        for (const auto& v : vars_)
            n += static_cast<std::size_t>(v.dim * (v.dim + 1) / 2);
        return n;
    }

private:
    void check_terms(const AffineExpr& e, const std::string& where) const
    {
        for (const auto& t : e.terms()) {
            if (t.var >= vars_.size())
                throw DimensionError("unknown variable in " + where);
            const auto d = vars_[t.var].dim;
            if (t.left.cols() != d || t.right.rows() != d)
                throw DimensionError("term shape does not match variable " + vars_[t.var].name +
                                     " in " + where);
        }
    }

    std::vector<Variable> vars_;
    std::vector<Lmi> lmis_;
    std::vector<Equality> equalities_;
    std::vector<ObjectiveTerm> objective_;
};

enum class Status { optimal, near_optimal, infeasible, failed };

inline const char* to_string(Status s)
{
    switch (s) {
    case Status::optimal: return "optimal";
    case Status::near_optimal: return "near-optimal";
    case Status::infeasible: return "infeasible";
    case Status::failed: return "failed";
    }
    return "unknown";
}

struct Settings {
    double gap = 1e-8;         ///< relative duality gap target
    double feasibility = 1e-8; ///< relative primal/dual residual target
    int max_iterations = 150;
    double step_fraction = 0.98;
    /// Accept as near-optimal at stall when gap and residuals are below these.
    double near_gap = 1e-5;
    double near_feasibility = 1e-6;
    bool verbose = false; ///< per-iteration trace on stderr
};

struct Solution {
    Status status = Status::failed;
    std::vector<Matrix> values;
    double primal_objective = 0.0;
    double dual_objective = 0.0;
    double relative_gap = 0.0;
    double primal_infeasibility = 0.0;
    double dual_infeasibility = 0.0;
    /// Largest violation of the original constraints at the returned point:
    /// negative eigenvalues of the LMIs and equality residuals.
    double max_violation = 0.0;
    int iterations = 0;
    double seconds = 0.0;
    std::string message;

    const Matrix& value(VarRef v) const { return values.at(v.id); }
};

namespace detail {

struct Entry {
    int row;
    int col;
    double value;
};

/// One scalar variable's coefficient matrix within one PSD block (full storage).
struct Coefficient {
    int var;
    std::vector<Entry> entries;
};

struct Block {
    int size = 0;
    Matrix constant;
    std::vector<Coefficient> coefficients; // sorted by var
};

struct Compiled {
    int n = 0; // scalar variables
    Vector c;
    std::vector<Block> blocks;
    Eigen::SparseMatrix<double> A; // equalities
    Vector b;
    std::vector<int> var_offset;   // per matrix variable
};

inline int packed_index(int a, int b) // a <= b
{
    return b * (b + 1) / 2 + a;
}

/// Coefficient of the scalar unknown X(a,b) = X(b,a) in left * X * right.
inline Matrix unit_image(const Matrix& left, const Matrix& right, int a, int b)
{
    Matrix m = left.col(a) * right.row(b);
    if (a != b)
        m += left.col(b) * right.row(a);
    return m;
}

inline Compiled compile(const Problem& problem)
{
    Compiled out;
    for (const auto& v : problem.variables()) {
        out.var_offset.push_back(out.n);
        out.n += static_cast<int>(v.dim * (v.dim + 1) / 2);
    }
    out.c = Vector::Zero(out.n);
    for (const auto& o : problem.objective()) {
        const int d = static_cast<int>(problem.variables()[o.var].dim);
        for (int bcol = 0; bcol < d; ++bcol)
            for (int a = 0; a <= bcol; ++a)
                out.c(out.var_offset[o.var] + packed_index(a, bcol)) +=
                    a == bcol ? o.weight(a, a) : o.weight(a, bcol) + o.weight(bcol, a);
    }

    for (const auto& lmi : problem.lmis()) {
        Block blk;
        blk.size = static_cast<int>(lmi.size());
        blk.constant = Matrix::Zero(blk.size, blk.size);
        std::map<int, Matrix> coeff;
        for (const auto& b : lmi.blocks()) {
            const auto& e = b.expr;
            const auto place = [&](Matrix& target, const Matrix& v) {
                target.block(b.row, b.col, v.rows(), v.cols()) += v;
                if (b.row != b.col)
                    target.block(b.col, b.row, v.cols(), v.rows()) += v.transpose();
            };
            place(blk.constant, e.constant());
            for (const auto& t : e.terms()) {
                const int d = static_cast<int>(problem.variables()[t.var].dim);
                for (int bcol = 0; bcol < d; ++bcol)
                    for (int a = 0; a <= bcol; ++a) {
                        const Matrix img = unit_image(t.left, t.right, a, bcol);
                        if (img.isZero(0.0))
                            continue;
                        auto [it, fresh] = coeff.try_emplace(
                            out.var_offset[t.var] + packed_index(a, bcol),
                            Matrix::Zero(blk.size, blk.size));
                        place(it->second, img);
                    }
            }
        }
        if (!linalg::is_symmetric(blk.constant, 1e-12))
            throw DimensionError("LMI " + lmi.label() + " is not symmetric");
        for (auto& [var, m] : coeff) {
            if (!linalg::is_symmetric(m, 1e-12))
                throw DimensionError("LMI " + lmi.label() + " is not symmetric in its variables");
            Coefficient cf{var, {}};
            for (int j = 0; j < blk.size; ++j)
                for (int i = 0; i < blk.size; ++i)
                    if (m(i, j) != 0.0)
                        cf.entries.push_back({i, j, m(i, j)});
            if (!cf.entries.empty())
                blk.coefficients.push_back(std::move(cf));
        }
        out.blocks.push_back(std::move(blk));
    }

    std::vector<Eigen::Triplet<double>> trip;
    std::vector<double> rhs;
    int row = 0;
    for (const auto& eq : problem.equalities()) {
        const auto& e = eq.expr;
        const int s = static_cast<int>(e.rows());
        std::map<int, Matrix> coeff;
        for (const auto& t : e.terms()) {
            const int d = static_cast<int>(problem.variables()[t.var].dim);
            for (int bcol = 0; bcol < d; ++bcol)
                for (int a = 0; a <= bcol; ++a) {
                    const Matrix img = unit_image(t.left, t.right, a, bcol);
                    if (img.isZero(0.0))
                        continue;
                    auto [it, fresh] = coeff.try_emplace(
                        out.var_offset[t.var] + packed_index(a, bcol), Matrix::Zero(s, s));
                    it->second += img;
                }
        }
        for (int j = 0; j < s; ++j)
            for (int i = 0; i <= j; ++i) {
                bool any = false;
                for (const auto& [var, m] : coeff)
                    if (m(i, j) != 0.0) {
                        trip.emplace_back(row, var, m(i, j));
                        any = true;
                    }
                if (!any && e.constant()(i, j) != 0.0)
                    throw SolverError("equality " + eq.label + " has an inconsistent constant row");
                if (!any)
                    continue;
                rhs.push_back(-e.constant()(i, j));
                ++row;
            }
    }
    out.A.resize(row, out.n);
    out.A.setFromTriplets(trip.begin(), trip.end());
    out.b = Eigen::Map<Vector>(rhs.data(), static_cast<Eigen::Index>(rhs.size()));
    return out;
}

/// Largest alpha with X + alpha dX PSD (infinity if unbounded); X must be PD.
inline double max_step(const Eigen::LLT<Matrix>& chol, const Matrix& dX)
{
    const auto& L = chol.matrixL();
    Matrix tmp = L.solve(dX);
    tmp = L.solve(tmp.transpose()).transpose();
    const double lmin = linalg::min_eigenvalue(tmp);
    if (lmin >= 0.0)
        return std::numeric_limits<double>::infinity();
    return -1.0 / lmin;
}

inline double inner(const Matrix& a, const Matrix& b) { return a.cwiseProduct(b).sum(); }

/// Cholesky factorization of a symmetric positive definite matrix whose unknowns
/// come in groups (one group per matrix variable). Each group is a dense
/// supernode; groups are ordered by minimum degree on the group graph and
/// eliminated with dense block updates.
class BlockCholesky {
public:
    /// `starts` holds the first index of every group followed by the total size.
    void analyze(const Eigen::SparseMatrix<double>& M, const std::vector<int>& starts)
    {
        const int G = static_cast<int>(starts.size()) - 1;
        group_of_.assign(static_cast<std::size_t>(starts.back()), 0);
        for (int g = 0; g < G; ++g)
            for (int i = starts[g]; i < starts[g + 1]; ++i)
                group_of_[i] = g;
        std::vector<std::set<int>> adj(G);
        for (int c = 0; c < M.outerSize(); ++c)
            for (Eigen::SparseMatrix<double>::InnerIterator it(M, c); it; ++it) {
                const int a = group_of_[it.row()];
                const int b = group_of_[c];
                if (a != b) {
                    adj[a].insert(b);
                    adj[b].insert(a);
                }
            }
        // Greedy minimum degree, degree weighted by group size.
        std::vector<int> size(G);
        for (int g = 0; g < G; ++g)
            size[g] = starts[g + 1] - starts[g];
        std::vector<bool> done(G, false);
        order_.clear();
        pos_.assign(G, 0);
        for (int step = 0; step < G; ++step) {
            int pick = -1;
            long best = std::numeric_limits<long>::max();
            for (int g = 0; g < G; ++g) {
                if (done[g])
                    continue;
                long deg = 0;
                for (int h : adj[g])
                    deg += size[h];
                if (deg < best) {
                    best = deg;
                    pick = g;
                }
            }
            done[pick] = true;
            pos_[pick] = step;
            order_.push_back(pick);
            std::vector<int> nb(adj[pick].begin(), adj[pick].end());
            for (int a : nb) {
                adj[a].erase(pick);
                for (int b : nb)
                    if (a != b)
                        adj[a].insert(b);
            }
            later_.push_back(std::move(nb));
        }
        // Later neighbours in elimination order, as positions.
        for (auto& nb : later_) {
            for (int& g : nb)
                g = pos_[g];
            std::sort(nb.begin(), nb.end());
        }
        starts_.clear();
        sizes_.clear();
        for (int k = 0; k < G; ++k) {
            starts_.push_back(starts[order_[k]]);
            sizes_.push_back(size[order_[k]]);
        }
        n_ = starts.back();
    }

    /// Factors M + shift * I; false if a pivot block is not positive definite.
    bool factorize(const Eigen::SparseMatrix<double>& M, double shift)
    {
        const int G = static_cast<int>(order_.size());
        diag_.assign(G, Matrix());
        off_.assign(G, {});
        for (int k = 0; k < G; ++k) {
            diag_[k] = Matrix::Zero(sizes_[k], sizes_[k]);
            diag_[k].diagonal().setConstant(shift);
            off_[k].assign(later_[k].size(), Matrix());
            for (std::size_t j = 0; j < later_[k].size(); ++j)
                off_[k][j] = Matrix::Zero(sizes_[later_[k][j]], sizes_[k]);
        }
        for (int c = 0; c < M.outerSize(); ++c) {
            const int kc = pos_[group_of_[c]];
            for (Eigen::SparseMatrix<double>::InnerIterator it(M, c); it; ++it) {
                const int kr = pos_[group_of_[it.row()]];
                if (kr == kc)
                    diag_[kc](it.row() - starts_[kc], c - starts_[kc]) += it.value();
                else if (kr > kc)
                    block(kr, kc)(it.row() - starts_[kr], c - starts_[kc]) += it.value();
            }
        }
        llt_.assign(G, Eigen::LLT<Matrix>());
        for (int k = 0; k < G; ++k) {
            llt_[k].compute(diag_[k]);
            if (llt_[k].info() != Eigen::Success)
                return false;
            const auto& nb = later_[k];
            for (auto& L : off_[k])
                llt_[k].matrixU().solveInPlace<Eigen::OnTheRight>(L); // L_jk = W_jk L_kk^{-T}
            for (std::size_t a = 0; a < nb.size(); ++a) {
                diag_[nb[a]].selfadjointView<Eigen::Lower>().rankUpdate(off_[k][a], -1.0);
                for (std::size_t b = 0; b < a; ++b)
                    block(nb[a], nb[b]).noalias() -= off_[k][a] * off_[k][b].transpose();
            }
        }
        return true;
    }

    Matrix solve(const Matrix& rhs) const
    {
        const int G = static_cast<int>(order_.size());
        std::vector<Matrix> x(G);
        for (int k = 0; k < G; ++k)
            x[k] = rhs.middleRows(starts_[k], sizes_[k]);
        for (int k = 0; k < G; ++k) {
            llt_[k].matrixL().solveInPlace(x[k]);
            for (std::size_t a = 0; a < later_[k].size(); ++a)
                x[later_[k][a]].noalias() -= off_[k][a] * x[k];
        }
        for (int k = G - 1; k >= 0; --k) {
            for (std::size_t a = 0; a < later_[k].size(); ++a)
                x[k].noalias() -= off_[k][a].transpose() * x[later_[k][a]];
            llt_[k].matrixU().solveInPlace(x[k]);
        }
        Matrix out(n_, rhs.cols());
        for (int k = 0; k < G; ++k)
            out.middleRows(starts_[k], sizes_[k]) = x[k];
        return out;
    }

private:
    Matrix& block(int row_pos, int col_pos)
    {
        const auto& nb = later_[col_pos];
        const auto at = std::lower_bound(nb.begin(), nb.end(), row_pos) - nb.begin();
        return off_[col_pos][static_cast<std::size_t>(at)];
    }

    int n_ = 0;
    std::vector<int> group_of_, order_, pos_, starts_, sizes_;
    std::vector<std::vector<int>> later_;
    std::vector<Matrix> diag_;
    std::vector<std::vector<Matrix>> off_;
    std::vector<Eigen::LLT<Matrix>> llt_;
};

class InteriorPoint {
public:
    InteriorPoint(const Compiled& data, const Settings& settings) : d_(data), opts_(settings)
    {
        build_pattern();
    }

    Solution run(const Problem& problem)
    {
        const auto t0 = std::chrono::steady_clock::now();
        Solution sol;
        initialize();
        const int K = static_cast<int>(d_.blocks.size());
        std::vector<Matrix> Sinv(K), Rp(K), dS(K), dZ(K), dSa(K), dZa(K);
        std::vector<Eigen::LLT<Matrix>> cholS(K), cholZ(K);
        int stall = 0;
        int since_best = 0;
        double best_merit = std::numeric_limits<double>::infinity();
        for (int it = 0;; ++it) {
            if (it == 0)
                for (int k = 0; k < K; ++k) {
                    cholS[k].compute(S_[k]);
                    cholZ[k].compute(Z_[k]);
                }
            for (int k = 0; k < K; ++k)
                Sinv[k] = linalg::symmetrize(cholS[k].solve(Matrix::Identity(S_[k].rows(), S_[k].cols())));
            residuals(Rp);
            const Metrics m = metrics(Rp);
            last_ = m;
            if (opts_.verbose)
                std::fprintf(stderr, "%3d pobj % .9e dobj % .9e gap %.2e pinf %.2e dinf %.2e mu %.2e\n", it,
                             m.pobj, m.dobj, m.rel_gap, m.pinf, m.dinf, m.mu);
            const double merit = std::max({m.rel_gap, m.comp_gap, m.pinf, m.dinf});
            if (merit < best_merit) {
                best_merit = merit;
                since_best = 0;
                best_ = {y_, lam_, S_, Z_, m};
            }
            else {
                ++since_best;
            }
            if (m.rel_gap <= opts_.gap && m.comp_gap <= opts_.gap && m.pinf <= opts_.feasibility &&
                m.dinf <= opts_.feasibility)
                return finish(problem, sol, Status::optimal, it, t0);
            if (primal_infeasible()) {
                sol.message = "dual improving ray found: constraints cannot be satisfied";
                return finish(problem, sol, Status::infeasible, it, t0);
            }
            if (dual_infeasible()) {
                sol.message = "primal improving ray found: problem is unbounded";
                return finish(problem, sol, Status::failed, it, t0);
            }
            // Near the optimum the Schur matrix degenerates when complementarity is
            // not strict; once progress stops the best iterate seen is returned.
            if (it >= opts_.max_iterations || stall >= 5 || since_best >= 8)
                return finish_stalled(problem, sol, it, t0);

            assemble_schur(Sinv);
            if (!factorize()) {
                sol.message = "Schur complement factorization failed";
                return finish_stalled(problem, sol, it, t0);
            }

            const double mu = m.mu;
            // Predictor.
            std::vector<Matrix> SinvRc(K);
            for (int k = 0; k < K; ++k)
                SinvRc[k] = -Z_[k];
            Vector dy, dlam;
            if (direction(Sinv, Rp, SinvRc, dy, dlam, dSa, dZa) > newton_tolerance) {
                sol.message = "Newton system too ill-conditioned to continue";
                return finish_stalled(problem, sol, it, t0);
            }
            double ap = 1.0, ad = 1.0;
            for (int k = 0; k < K; ++k) {
                ap = std::min(ap, max_step(cholS[k], dSa[k]));
                ad = std::min(ad, max_step(cholZ[k], dZa[k]));
            }
            double mu_aff = 0.0;
            for (int k = 0; k < K; ++k)
                mu_aff += inner(S_[k] + ap * dSa[k], Z_[k] + ad * dZa[k]);
            mu_aff /= static_cast<double>(dim_);
            const double ratio = std::clamp(mu_aff / mu, 0.0, 1.0);
            const double sigma = std::pow(ratio, 3.0);

            // Corrector.
            for (int k = 0; k < K; ++k)
                SinvRc[k] = sigma * mu * Sinv[k] - Z_[k] - Sinv[k] * (dSa[k] * dZa[k]);
            if (direction(Sinv, Rp, SinvRc, dy, dlam, dS, dZ) > newton_tolerance) {
                sol.message = "Newton system too ill-conditioned to continue";
                return finish_stalled(problem, sol, it, t0);
            }
            double ap_max = std::numeric_limits<double>::infinity();
            double ad_max = std::numeric_limits<double>::infinity();
            for (int k = 0; k < K; ++k) {
                ap_max = std::min(ap_max, max_step(cholS[k], dS[k]));
                ad_max = std::min(ad_max, max_step(cholZ[k], dZ[k]));
            }
            ap = std::min(1.0, opts_.step_fraction * ap_max);
            ad = std::min(1.0, opts_.step_fraction * ad_max);
            if (!std::isfinite(dy.norm()) || !std::isfinite(dlam.norm())) {
                sol.message = "non-finite search direction";
                return finish_stalled(problem, sol, it, t0);
            }
            // Roundoff can leave the full step just outside the cone; back off until
            // both iterates factor.
            std::vector<Matrix> S_new(K), Z_new(K);
            bool accepted = false;
            for (int tries = 0; tries < 30 && !accepted; ++tries) {
                accepted = true;
                for (int k = 0; k < K && accepted; ++k) {
                    S_new[k] = linalg::symmetrize(S_[k] + ap * dS[k]);
                    Z_new[k] = linalg::symmetrize(Z_[k] + ad * dZ[k]);
                    cholS[k].compute(S_new[k]);
                    cholZ[k].compute(Z_new[k]);
                    accepted = cholS[k].info() == Eigen::Success && cholZ[k].info() == Eigen::Success;
                }
                if (!accepted) {
                    ap *= 0.7;
                    ad *= 0.7;
                }
            }
            if (!accepted) {
                for (int k = 0; k < K; ++k) {
                    cholS[k].compute(S_[k]);
                    cholZ[k].compute(Z_[k]);
                }
                sol.message = "iterates reached the boundary of the cone";
                return finish_stalled(problem, sol, it, t0);
            }
            y_ += ap * dy;
            lam_ += ad * dlam;
            S_.swap(S_new);
            Z_.swap(Z_new);
            stall = (ap < 1e-8 && ad < 1e-8) ? stall + 1 : 0;
        }
    }

private:
    struct Metrics {
        double pobj = 0, dobj = 0, rel_gap = 0, comp_gap = 0, pinf = 0, dinf = 0, mu = 0;
    };

    void build_pattern()
    {
        const int n = d_.n;
        const int neq = static_cast<int>(d_.A.rows());
        std::vector<Eigen::Triplet<double>> trip;
        for (const auto& blk : d_.blocks)
            for (const auto& ci : blk.coefficients)
                for (const auto& cj : blk.coefficients)
                    trip.emplace_back(ci.var, cj.var, 0.0);
        for (int k = 0; k < d_.A.outerSize(); ++k)
            for (Eigen::SparseMatrix<double>::InnerIterator it(d_.A, k); it; ++it) {
                trip.emplace_back(n + static_cast<int>(it.row()), static_cast<int>(it.col()), 0.0);
                trip.emplace_back(static_cast<int>(it.col()), n + static_cast<int>(it.row()), 0.0);
            }
        kkt_.resize(n + neq, n + neq);
        kkt_.setFromTriplets(trip.begin(), trip.end());
        kkt_.makeCompressed();

        auto slot = [&](int r, int c) {
            const auto* outer = kkt_.outerIndexPtr();
            const auto* inner = kkt_.innerIndexPtr();
            const auto* lo = inner + outer[c];
            const auto* hi = inner + outer[c + 1];
            const auto* pos = std::lower_bound(lo, hi, r);
            return static_cast<int>(pos - inner);
        };
        slots_.clear();
        for (const auto& blk : d_.blocks) {
            const int nv = static_cast<int>(blk.coefficients.size());
            std::vector<int> s(static_cast<std::size_t>(nv) * nv);
            for (int a = 0; a < nv; ++a)
                for (int bb = 0; bb < nv; ++bb)
                    s[static_cast<std::size_t>(a) * nv + bb] =
                        slot(blk.coefficients[a].var, blk.coefficients[bb].var);
            slots_.push_back(std::move(s));
        }
        // Constant equality entries never change.
        for (int k = 0; k < d_.A.outerSize(); ++k)
            for (Eigen::SparseMatrix<double>::InnerIterator it(d_.A, k); it; ++it) {
                const int r = n + static_cast<int>(it.row());
                const int c = static_cast<int>(it.col());
                eq_slots_.push_back({slot(r, c), it.value()});
                eq_slots_.push_back({slot(c, r), it.value()});
            }
        analyzed_ = false;
        dim_ = 0;
        for (const auto& blk : d_.blocks)
            dim_ += blk.size;
    }

    void initialize()
    {
        const int K = static_cast<int>(d_.blocks.size());
        S_.assign(K, Matrix());
        Z_.assign(K, Matrix());
        y_ = Vector::Zero(d_.n);
        lam_ = Vector::Zero(d_.A.rows());
        for (int k = 0; k < K; ++k) {
            const auto& blk = d_.blocks[k];
            const double sq = std::sqrt(static_cast<double>(blk.size));
            double fmax = blk.constant.norm();
            double ratio = 0.0;
            for (const auto& cf : blk.coefficients) {
                double nf = 0.0;
                for (const auto& e : cf.entries)
                    nf += e.value * e.value;
                nf = std::sqrt(nf);
                fmax = std::max(fmax, nf);
                ratio = std::max(ratio, (1.0 + std::abs(d_.c(cf.var))) / (1.0 + nf));
            }
            const double xi = std::max({10.0, sq, blk.size * ratio});
            const double eta = std::max({10.0, sq, fmax});
            Z_[k] = xi * Matrix::Identity(blk.size, blk.size);
            S_[k] = eta * Matrix::Identity(blk.size, blk.size);
        }
    }

    Matrix apply_f(int k, const Vector& y) const
    {
        const auto& blk = d_.blocks[k];
        Matrix out = Matrix::Zero(blk.size, blk.size);
        for (const auto& cf : blk.coefficients) {
            const double v = y(cf.var);
            if (v == 0.0)
                continue;
            for (const auto& e : cf.entries)
                out(e.row, e.col) += v * e.value;
        }
        return out;
    }

    /// (F^*(X))_i = sum_k <F_ki, X_k>, accumulated into out.
    void apply_fadj(const std::vector<Matrix>& X, Vector& out) const
    {
        out.setZero(d_.n);
        for (std::size_t k = 0; k < d_.blocks.size(); ++k)
            for (const auto& cf : d_.blocks[k].coefficients) {
                double s = 0.0;
                for (const auto& e : cf.entries)
                    s += e.value * X[k](e.row, e.col);
                out(cf.var) += s;
            }
    }

    void residuals(std::vector<Matrix>& Rp)
    {
        for (std::size_t k = 0; k < d_.blocks.size(); ++k)
            Rp[k] = d_.blocks[k].constant + apply_f(static_cast<int>(k), y_) - S_[k];
        Vector fz;
        apply_fadj(Z_, fz);
        rd_ = d_.c - fz - d_.A.transpose() * lam_;
        re_ = d_.b - d_.A * y_;
    }

    Metrics metrics(const std::vector<Matrix>& Rp) const
    {
        Metrics m;
        m.pobj = d_.c.dot(y_);
        double f0z = 0.0, sz = 0.0, rp2 = 0.0, f02 = 0.0;
        for (std::size_t k = 0; k < d_.blocks.size(); ++k) {
            f0z += inner(d_.blocks[k].constant, Z_[k]);
            sz += inner(S_[k], Z_[k]);
            rp2 += Rp[k].squaredNorm();
            f02 += d_.blocks[k].constant.squaredNorm();
        }
        m.dobj = -f0z + (d_.b.size() ? d_.b.dot(lam_) : 0.0);
        const double scale = 1.0 + std::abs(m.pobj) + std::abs(m.dobj);
        m.rel_gap = std::abs(m.pobj - m.dobj) / scale;
        m.comp_gap = std::abs(sz) / scale;
        m.mu = sz / static_cast<double>(dim_);
        const double pin = std::sqrt(rp2) / (1.0 + std::sqrt(f02));
        const double ein = d_.b.size() ? re_.norm() / (1.0 + d_.b.norm()) : 0.0;
        m.pinf = std::max(pin, ein);
        m.dinf = rd_.norm() / (1.0 + d_.c.norm());
        return m;
    }

    bool primal_infeasible() const
    {
        // (Z, lambda) with F^*(Z) + A^T lambda ~ 0 and -<F0, Z> + b^T lambda > 0.
        double dobj = 0.0;
        for (std::size_t k = 0; k < d_.blocks.size(); ++k)
            dobj -= inner(d_.blocks[k].constant, Z_[k]);
        if (d_.b.size())
            dobj += d_.b.dot(lam_);
        if (!(dobj > 0.0))
            return false;
        const Vector ray = d_.c - rd_; // F^*(Z) + A^T lambda
        return ray.norm() / dobj < 1e-8 && dobj > 1e6;
    }

    bool dual_infeasible() const
    {
        const double cy = d_.c.dot(y_);
        if (!(cy < 0.0))
            return false;
        double viol = 0.0;
        for (std::size_t k = 0; k < d_.blocks.size(); ++k) {
            const Matrix fy = apply_f(static_cast<int>(k), y_);
            viol = std::max(viol, -linalg::min_eigenvalue(fy));
        }
        if (d_.A.rows())
            viol = std::max(viol, (d_.A * y_).cwiseAbs().maxCoeff());
        return viol / -cy < 1e-8 && -cy > 1e6;
    }

    void assemble_schur(const std::vector<Matrix>& Sinv)
    {
        double* val = kkt_.valuePtr();
        std::fill(val, val + kkt_.nonZeros(), 0.0);
        for (const auto& [pos, v] : eq_slots_)
            val[pos] = v;
        for (std::size_t k = 0; k < d_.blocks.size(); ++k) {
            const auto& blk = d_.blocks[k];
            const auto& slots = slots_[k];
            const int nv = static_cast<int>(blk.coefficients.size());
            const Matrix& Si = Sinv[k];
            const Matrix& Z = Z_[k];
            Matrix G(blk.size, blk.size);
            for (int a = 0; a < nv; ++a) {
                const auto& ea = blk.coefficients[a].entries;
                // G = S^{-1} F_a Z
                if (static_cast<int>(ea.size()) > 2 * blk.size) {
                    Matrix F = Matrix::Zero(blk.size, blk.size);
                    for (const auto& e : ea)
                        F(e.row, e.col) = e.value;
                    G.noalias() = Si * F * Z;
                }
                else {
                    G.setZero();
                    for (const auto& e : ea)
                        G.noalias() += e.value * Si.col(e.row) * Z.row(e.col);
                }
                for (int bb = a; bb < nv; ++bb) {
                    double s = 0.0;
                    for (const auto& e : blk.coefficients[bb].entries)
                        s += e.value * G(e.col, e.row);
                    val[slots[static_cast<std::size_t>(a) * nv + bb]] += s;
                    if (bb != a)
                        val[slots[static_cast<std::size_t>(bb) * nv + a]] += s;
                }
            }
        }
    }

    /// Factors the Schur matrix M (block sparse Cholesky) and, with equalities present, the
    /// small dense complement A M^{-1} A^T. A tiny diagonal shift is added when the
    /// factorization loses definiteness near the optimum.
    bool factorize()
    {
        const int n = d_.n;
        schur_ = kkt_.topLeftCorner(n, n);
        if (!analyzed_) {
            std::vector<int> starts(d_.var_offset.begin(), d_.var_offset.end());
            starts.push_back(n);
            chol_.analyze(schur_, starts);
            analyzed_ = true;
        }
        const double scale = std::max(1.0, schur_.diagonal().cwiseAbs().maxCoeff());
        double shift = 0.0;
        for (int attempt = 0;; ++attempt) {
            if (chol_.factorize(schur_, shift))
                break;
            if (attempt == 5)
                return false;
            shift = shift == 0.0 ? 1e-15 * scale : 100.0 * shift;
        }
        if (d_.A.rows() > 0) {
            minv_at_ = chol_.solve(Matrix(d_.A.transpose()));
            comp_chol_.compute(linalg::symmetrize(d_.A * minv_at_));
            if (comp_chol_.info() != Eigen::Success)
                return false;
        }
        return true;
    }

    /// Solves [M A^T; A 0] [u; v] = [f; g].
    Vector kkt_solve(const Vector& rhs)
    {
        const int n = d_.n;
        const Eigen::Index neq = d_.A.rows();
        Vector out(n + neq);
        Vector u = chol_.solve(rhs.head(n)).col(0);
        if (neq > 0) {
            const Vector v = comp_chol_.solve(d_.A * u - rhs.tail(neq));
            u -= minv_at_ * v;
            out.tail(neq) = v;
        }
        out.head(n) = u;
        return out;
    }

    /// Solves the Newton system for a given S^{-1} Rc term; returns the relative
    /// residual of the linear solve.
    double direction(const std::vector<Matrix>& Sinv, const std::vector<Matrix>& Rp,
                   const std::vector<Matrix>& SinvRc, Vector& dy, Vector& dlam,
                   std::vector<Matrix>& dS, std::vector<Matrix>& dZ)
    {
        const int K = static_cast<int>(d_.blocks.size());
        std::vector<Matrix> T(K);
        for (int k = 0; k < K; ++k)
            T[k] = SinvRc[k] - Sinv[k] * Rp[k] * Z_[k];
        Vector h;
        apply_fadj(T, h);
        h -= rd_;
        Vector rhs(d_.n + d_.A.rows());
        rhs.head(d_.n) = h;
        rhs.tail(d_.A.rows()) = re_;
        Vector sol = kkt_solve(rhs);
        // Iterative refinement.
        for (int pass = 0; pass < 2; ++pass) {
            const Vector r = rhs - kkt_ * sol;
            sol += kkt_solve(r);
        }
        dy = sol.head(d_.n);
        dlam = -sol.tail(d_.A.rows());
        for (int k = 0; k < K; ++k) {
            dS[k] = Rp[k] + apply_f(k, dy);
            dZ[k] = linalg::symmetrize(SinvRc[k] - Sinv[k] * dS[k] * Z_[k]);
        }
        return (rhs - kkt_ * sol).norm() / std::max(rhs.norm(), 1e-300);
    }

    Solution& finish(const Problem& problem, Solution& sol, Status status, int it,
                     std::chrono::steady_clock::time_point t0)
    {
        sol.status = status;
        sol.iterations = it;
        sol.primal_objective = last_.pobj;
        sol.dual_objective = last_.dobj;
        sol.relative_gap = last_.rel_gap;
        sol.primal_infeasibility = last_.pinf;
        sol.dual_infeasibility = last_.dinf;
        sol.values.clear();
        for (std::size_t v = 0; v < problem.variables().size(); ++v) {
            const int dim = static_cast<int>(problem.variables()[v].dim);
            Matrix X(dim, dim);
            for (int bcol = 0; bcol < dim; ++bcol)
                for (int a = 0; a <= bcol; ++a)
                    X(a, bcol) = X(bcol, a) = y_(d_.var_offset[v] + packed_index(a, bcol));
            sol.values.push_back(std::move(X));
        }
        double viol = 0.0;
        for (std::size_t k = 0; k < d_.blocks.size(); ++k) {
            const Matrix F = d_.blocks[k].constant + apply_f(static_cast<int>(k), y_);
            viol = std::max(viol, -linalg::min_eigenvalue(F));
        }
        if (d_.A.rows())
            viol = std::max(viol, (d_.A * y_ - d_.b).cwiseAbs().maxCoeff());
        sol.max_violation = viol;
        sol.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (sol.message.empty())
            sol.message = to_string(status);
        return sol;
    }

    Solution& finish_stalled(const Problem& problem, Solution& sol, int it,
                             std::chrono::steady_clock::time_point t0)
    {
        y_ = best_.y;
        lam_ = best_.lam;
        S_ = best_.S;
        Z_ = best_.Z;
        last_ = best_.metrics;
        const Metrics& m = last_;
        const bool reached = m.rel_gap <= opts_.gap && m.comp_gap <= opts_.gap &&
                             m.pinf <= opts_.feasibility && m.dinf <= opts_.feasibility;
        const bool near = m.rel_gap <= opts_.near_gap && m.comp_gap <= opts_.near_gap &&
                          m.pinf <= opts_.near_feasibility && m.dinf <= opts_.near_feasibility;
        if (sol.message.empty())
            sol.message = it >= opts_.max_iterations ? "iteration limit reached" : "progress stalled";
        return finish(problem, sol, reached ? Status::optimal : near ? Status::near_optimal : Status::failed,
                      it, t0);
    }

    struct Iterate {
        Vector y, lam;
        std::vector<Matrix> S, Z;
        Metrics metrics;
    };
    static constexpr double newton_tolerance = 1e-3;

    const Compiled& d_;
    Settings opts_;
    Iterate best_;
    Eigen::SparseMatrix<double> kkt_;
    Eigen::SparseMatrix<double> schur_;
    BlockCholesky chol_;
    bool analyzed_ = false;
    Matrix minv_at_;
    Eigen::LDLT<Matrix> comp_chol_;
    std::vector<std::vector<int>> slots_;
    std::vector<std::pair<int, double>> eq_slots_;
    int dim_ = 0;
    std::vector<Matrix> S_, Z_;
    Vector y_, lam_, rd_, re_;
    Metrics last_;
};

} // namespace detail

inline Solution solve(const Problem& problem, const Settings& settings = {})
{
    if (problem.lmis().empty())
        throw SolverError("problem has no semidefinite constraints");
    const detail::Compiled data = detail::compile(problem);
    detail::InteriorPoint ipm(data, settings);
    return ipm.run(problem);
}

} // namespace dpkf::sdp
