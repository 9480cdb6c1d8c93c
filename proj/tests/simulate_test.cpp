#include "dpkf/simulate.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace dpkf;

namespace {

MechanismSpec identity_mechanism(const GlobalModel& model, const AdjacencySpec& adj, const PrivacySpec& priv)
{
    return MechanismSpec(ShapingMatrix(Matrix::Identity(model.output_dim(), model.output_dim()),
                                       model.output_dims(), adj),
                         priv);
}

} // namespace

TEST(Simulator, TrajectoryShapes)
{
    std::mt19937_64 g(41);
    const auto inst = fixtures::random_instance(g, 3, 2, 7);
    const Simulator sim(inst.model, identity_mechanism(inst.model, inst.adj, calibrate(1.0, 0.05)));
    Rng rng(1);
    const auto tr = sim.run(rng);
    ASSERT_EQ(tr.x.size(), 8u);
    ASSERT_EQ(tr.z_hat.size(), 8u);
    EXPECT_EQ(tr.x[0].size(), inst.model.state_dim());
    EXPECT_EQ(tr.s[3].size(), inst.model.output_dim());
    EXPECT_EQ(tr.z[5].size(), inst.model.query_dim());
}

TEST(Simulator, RejectsMismatchedShaping)
{
    std::mt19937_64 g(42);
    const auto inst = fixtures::random_instance(g, 2, 2, 3);
    const auto p = inst.model.output_dim();
    const MechanismSpec wrong(ShapingMatrix(Matrix::Identity(p + 1, p + 1), {p, 1}, AdjacencySpec({1.0, 1.0})),
                              calibrate(1.0, 0.05));
    EXPECT_THROW(Simulator(inst.model, wrong), DimensionError);
}

TEST(RunPlan, EmpiricalErrorMatchesAnalyticTrace)
{
    std::mt19937_64 g(43);
    const auto inst = fixtures::random_instance(g, 3, 2, 20);
    const auto priv = calibrate(1.0, 0.05);
    SimulationPlan plan{inst.model, identity_mechanism(inst.model, inst.adj, priv)};
    plan.replications = 4000;
    plan.seed = 17;
    const auto rep = run_plan(plan);
    ASSERT_EQ(rep.empirical_mse.size(), 21u);
    EXPECT_LE(std::abs(rep.empirical_average - rep.analytic_average), 4.0 * rep.average_standard_error);
    // Per-step checks at a looser level since there are many of them.
    for (std::size_t t = 0; t <= 20; ++t) {
        EXPECT_LE(std::abs(rep.empirical_mse[t] - rep.analytic_mse[t]), 5.0 * rep.standard_error[t]) << "t=" << t;
        // The filter is unbiased.
        for (Eigen::Index j = 0; j < rep.mean_error[t].size(); ++j)
            EXPECT_LE(std::abs(rep.mean_error[t](j)), 5.0 * rep.mean_error_se[t](j));
    }
}

TEST(RunPlan, DeterministicAcrossThreadCounts)
{
    std::mt19937_64 g(44);
    const auto inst = fixtures::random_instance(g, 2, 2, 10);
    SimulationPlan plan{inst.model, identity_mechanism(inst.model, inst.adj, calibrate(1.0, 0.05))};
    plan.replications = 2500;
    plan.seed = 99;
    plan.threads = 1;
    const auto a = run_plan(plan);
    plan.threads = 4;
    const auto b = run_plan(plan);
    EXPECT_EQ(a.empirical_mse, b.empirical_mse);
    EXPECT_EQ(a.standard_error, b.standard_error);
    EXPECT_EQ(a.empirical_average, b.empirical_average);
    plan.seed = 100;
    EXPECT_NE(run_plan(plan).empirical_average, a.empirical_average);
}

TEST(RunPlan, SingleReplicationHasUndefinedError)
{
    std::mt19937_64 g(45);
    const auto inst = fixtures::random_instance(g, 1, 1, 2);
    SimulationPlan plan{inst.model, identity_mechanism(inst.model, inst.adj, calibrate(1.0, 0.05))};
    plan.replications = 1;
    const auto rep = run_plan(plan);
    EXPECT_TRUE(std::isnan(rep.standard_error[0]));
    EXPECT_TRUE(std::isnan(rep.average_standard_error));
    EXPECT_TRUE(std::isfinite(rep.empirical_mse[0]));
    plan.replications = 0;
    EXPECT_THROW(run_plan(plan), DomainError);
}
