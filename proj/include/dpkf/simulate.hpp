#pragma once

// Monte Carlo runs of the full pipeline: trajectories of the global model,
// the Gaussian mechanism on D y_t, and the time-varying Kalman filter driven by
// the released signal. Empirical squared errors of the query estimate are
// compared with the analytic traces Tr(L_t Sigma_t L_t^T).

#include "dpkf/lin_model.hpp"
#include "dpkf/linalg.hpp"
#include "dpkf/privacy.hpp"
#include "dpkf/random.hpp"
#include "dpkf/riccati.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <thread>
#include <vector>

namespace dpkf {

struct Trajectory {
    std::vector<Vector> x;     ///< true states
    std::vector<Vector> y;     ///< stacked measurements
    std::vector<Vector> s;     ///< released signal D y_t + zeta_t
    std::vector<Vector> x_hat; ///< filtered state estimates
    std::vector<Vector> z;     ///< L_t x_t
    std::vector<Vector> z_hat; ///< L_t x_hat_t

    double squared_error(std::size_t t) const { return (z[t] - z_hat[t]).squaredNorm(); }
};

/// Model, mechanism and filter bundled with the covariance square roots, so
/// repeated runs only draw standard normals.
class Simulator {
public:
    Simulator(GlobalModel model, MechanismSpec mechanism)
        : model_(std::move(model)), mech_(std::move(mechanism))
    {
        if (mech_.shaping().cols() != model_.output_dim())
            throw DimensionError("shaping matrix has " + std::to_string(mech_.shaping().cols()) +
                                 " columns but the model has " + std::to_string(model_.output_dim()) +
                                 " outputs");
        filter_ = run_covariance_recursion(model_, mech_);
        chol_sigma0_ = linalg::cholesky_factor(model_.Sigma0());
        chol_v_ = linalg::cholesky_factor(model_.V());
        for (std::size_t t = 0; t < model_.horizon(); ++t)
            chol_w_.push_back(linalg::cholesky_factor(model_.W(t)));
    }

    const GlobalModel& model() const { return model_; }
    const MechanismSpec& mechanism() const { return mech_; }
    const FilterDesign& filter() const { return filter_; }

    /// One trajectory over t = 0..T. Draw order: x_0, then per step v_t, zeta_t, w_t.
    Trajectory run(Rng& rng) const
    {
        const auto T = model_.horizon();
        Trajectory tr;
        Vector x = rng.gaussian(model_.x0_mean(), chol_sigma0_);
        Vector x_pred = model_.x0_mean();
        const Vector zero_p = Vector::Zero(model_.output_dim());
        for (std::size_t t = 0; t <= T; ++t) {
            Vector y = model_.C(t) * x + chol_v_ * rng.normal_vector(model_.output_dim());
            Vector s = apply_mechanism(mech_, y, rng);
            Vector x_hat = x_pred + filter_.gains[t] * (s - filter_.DC[t] * x_pred);
            tr.z.push_back(model_.L(t) * x);
            tr.z_hat.push_back(model_.L(t) * x_hat);
            tr.x.push_back(x);
            tr.y.push_back(std::move(y));
            tr.s.push_back(std::move(s));
            if (t < T) {
                x = model_.A(t) * x + chol_w_[t] * rng.normal_vector(model_.state_dim());
                x_pred = model_.A(t) * x_hat;
            }
            tr.x_hat.push_back(std::move(x_hat));
        }
        return tr;
    }

private:
    GlobalModel model_;
    MechanismSpec mech_;
    FilterDesign filter_;
    Matrix chol_sigma0_;
    Matrix chol_v_;
    std::vector<Matrix> chol_w_;
};

inline Trajectory simulate_once(const GlobalModel& model, const MechanismSpec& mechanism, Rng& rng)
{
    return Simulator(model, mechanism).run(rng);
}

struct SimulationPlan {
    GlobalModel model;
    MechanismSpec mechanism;
    std::size_t replications = 1;
    std::uint64_t seed = 0;
    unsigned threads = 1; ///< 0 means one per hardware thread

    void validate() const
    {
        if (replications < 1)
            throw DomainError("replications must be at least 1");
    }
};

struct SimulationReport {
    std::size_t replications = 0;
    std::uint64_t seed = 0;
    std::vector<double> analytic_mse;    ///< Tr(L_t Sigma_t L_t^T)
    std::vector<double> empirical_mse;   ///< mean of ||z_t - z_hat_t||^2
    std::vector<double> standard_error;  ///< sample std / sqrt(replications)
    std::vector<Vector> mean_error;      ///< mean of z_t - z_hat_t
    std::vector<Vector> mean_error_se;
    double analytic_average = 0.0;
    double empirical_average = 0.0;
    double average_standard_error = 0.0; ///< of the per-replication time average
    double wall_seconds = 0.0;
};

namespace detail {

/// Running mean and sum of squared deviations, updated in a fixed order.
struct Moments {
    std::size_t count = 0;
    double mean = 0.0;
    double m2 = 0.0;

    void add(double v)
    {
        ++count;
        const double d = v - mean;
        mean += d / static_cast<double>(count);
        m2 += d * (v - mean);
    }

    double standard_error() const
    {
        if (count < 2)
            return std::numeric_limits<double>::quiet_NaN();
        return std::sqrt(m2 / static_cast<double>(count - 1) / static_cast<double>(count));
    }
};

} // namespace detail

/// Replication r uses Rng(seed, r). Replications are evaluated in batches, in
/// parallel if requested, and always accumulated in index order, so the report
/// does not depend on the thread count.
inline SimulationReport run_plan(const SimulationPlan& plan)
{
    plan.validate();
    const auto t0 = std::chrono::steady_clock::now();
    const Simulator sim(plan.model, plan.mechanism);
    const auto steps = plan.model.horizon() + 1;
    const auto zdim = plan.model.query_dim();

    std::vector<detail::Moments> mse(steps), avg(1);
    std::vector<std::vector<detail::Moments>> err(steps, std::vector<detail::Moments>(zdim));

    unsigned threads = plan.threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : plan.threads;
    constexpr std::size_t batch = 1024;
    struct Sample {
        std::vector<double> sq;
        std::vector<Vector> e;
    };
    std::vector<Sample> buf(batch);

    auto fill = [&](std::size_t first, std::size_t begin, std::size_t end) {
        for (std::size_t k = begin; k < end; ++k) {
            Rng rng(plan.seed, first + k);
            const Trajectory tr = sim.run(rng);
            Sample& out = buf[k];
            out.sq.resize(steps);
            out.e.resize(steps);
            for (std::size_t t = 0; t < steps; ++t) {
                out.e[t] = tr.z[t] - tr.z_hat[t];
                out.sq[t] = out.e[t].squaredNorm();
            }
        }
    };

    for (std::size_t first = 0; first < plan.replications; first += batch) {
        const std::size_t count = std::min(batch, plan.replications - first);
        const unsigned workers = std::min<unsigned>(threads, static_cast<unsigned>(count));
        if (workers <= 1) {
            fill(first, 0, count);
        }
        else {
            std::vector<std::thread> pool;
            const std::size_t chunk = (count + workers - 1) / workers;
            for (unsigned w = 0; w < workers; ++w) {
                const std::size_t b = w * chunk;
                const std::size_t e = std::min(count, b + chunk);
                if (b < e)
                    pool.emplace_back(fill, first, b, e);
            }
            for (auto& th : pool)
                th.join();
        }
        for (std::size_t k = 0; k < count; ++k) {
            double total = 0.0;
            for (std::size_t t = 0; t < steps; ++t) {
                mse[t].add(buf[k].sq[t]);
                total += buf[k].sq[t];
                for (Eigen::Index j = 0; j < zdim; ++j)
                    err[t][static_cast<std::size_t>(j)].add(buf[k].e[t](j));
            }
            avg[0].add(total / static_cast<double>(steps));
        }
    }

    SimulationReport rep;
    rep.replications = plan.replications;
    rep.seed = plan.seed;
    rep.analytic_mse = sim.filter().covariance.mse;
    rep.analytic_average = sim.filter().cost();
    for (std::size_t t = 0; t < steps; ++t) {
        rep.empirical_mse.push_back(mse[t].mean);
        rep.standard_error.push_back(mse[t].standard_error());
        Vector m(zdim), se(zdim);
        for (Eigen::Index j = 0; j < zdim; ++j) {
            m(j) = err[t][static_cast<std::size_t>(j)].mean;
            se(j) = err[t][static_cast<std::size_t>(j)].standard_error();
        }
        rep.mean_error.push_back(std::move(m));
        rep.mean_error_se.push_back(std::move(se));
    }
    rep.empirical_average = avg[0].mean;
    rep.average_standard_error = avg[0].standard_error();
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

} // namespace dpkf
