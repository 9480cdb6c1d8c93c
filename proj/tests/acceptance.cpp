// Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.

#include "dpkf/cli.hpp"
#include "dpkf/design.hpp"
#include "dpkf/privacy.hpp"
#include "dpkf/riccati.hpp"
#include "test_support.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

using namespace dpkf;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;
};

struct Criterion {
    int id;
    std::string name;
    double time_limit; // seconds, <= 0 for none
    std::function<Outcome()> run;
};

std::string fmt(const char* f, double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double min_eig(const Matrix& m) { return linalg::min_eigenvalue(linalg::symmetrize(m)); }

// Designs shared by the tightness and round-trip criteria.
struct Solved {
    std::string name;
    GlobalModel model;
    PrivacySpec priv;
    DesignSolution sol;
};
std::vector<Solved> solved;

Outcome scalar_closed_forms()
{
    ScalarScenario s;
    s.a = 1.0;
    s.c = 1.0;
    s.sigma_w2 = 0.5;
    s.sigma_v2 = 0.9;
    s.rho = 50.0;
    s.n = 100;
    s.epsilon = std::log(3.0);
    s.delta = 0.05;
    const auto t0 = std::chrono::steady_clock::now();
    const double m1 = mse_input_perturbation_scalar(s).mse;
    const double m2 = mse_aggregated_scalar(s).mse;
    const double ms = 1e3 * seconds_since(t0);
    Outcome o;
    o.pass = std::abs(m1 - 6235.0) <= 0.01 * 6235.0 && std::abs(m2 - 650.0) <= 0.01 * 650.0 && ms < 1.0;
    o.detail = "MSE1 " + fmt("%.4f", m1) + " (6235 +/-1%), MSE2 " + fmt("%.4f", m2) + " (650 +/-1%), " +
               fmt("%.4f", ms) + " ms";
    return o;
}

Outcome closed_form_vs_riccati()
{
    std::mt19937_64 g(2002);
    double worst = 0.0;
    for (int k = 0; k < 20; ++k) {
        ScalarScenario s;
        s.a = fixtures::uniform(g, -1.2, 1.2);
        s.c = fixtures::log_uniform(g, 0.1, 10.0);
        s.sigma_w2 = fixtures::log_uniform(g, 0.01, 10.0);
        s.sigma_v2 = fixtures::log_uniform(g, 0.01, 10.0);
        s.rho = fixtures::log_uniform(g, 0.1, 100.0);
        s.n = static_cast<int>(std::lround(fixtures::log_uniform(g, 1.0, 1000.0)));
        s.epsilon = fixtures::log_uniform(g, 0.05, 5.0);
        s.delta = fixtures::log_uniform(g, 1e-8, 0.3);
        const double gam = s.gamma();
        const struct {
            double mse;
            double r;
        } cases[] = {{mse_input_perturbation_scalar(s).mse, s.sigma_v2 + gam * gam},
                     {mse_aggregated_scalar(s).mse, s.sigma_v2 + gam * gam / s.n}};
        for (const auto& c : cases) {
            const auto ss = steady_state_covariance(Matrix::Constant(1, 1, s.a), Matrix::Constant(1, 1, s.c),
                                                    Matrix::Constant(1, 1, s.sigma_w2),
                                                    Matrix::Constant(1, 1, 1.0 / c.r));
            worst = std::max(worst, std::abs(s.n * ss.predicted(0, 0) - c.mse) / c.mse);
        }
    }
    return {worst <= 1e-9, "20 scenarios, max relative difference " + fmt("%.3e", worst) + " (limit 1e-9)"};
}

Outcome syndromic()
{
    const auto model = fixtures::syndromic_model(1);
    const auto adj = fixtures::syndromic_adjacency();
    const auto priv = fixtures::syndromic_privacy();
    auto sol = design_pipeline(model, adj, priv, Horizon::stationary);
    const double obj = sol.sdp_objective;
    const auto eq =
        evaluate_design(model, input_perturbation(model, adj, InputPerturbation::equalized), priv, Horizon::stationary);
    const auto mx =
        evaluate_design(model, input_perturbation(model, adj, InputPerturbation::max_rho), priv, Horizon::stationary);
    const bool obj_ok = std::abs(obj - 4.91) <= 0.03 * 4.91;
    const bool ip_ok = std::abs(eq.posterior - 7.06) <= 0.03 * 7.06 || std::abs(mx.posterior - 7.06) <= 0.03 * 7.06;
    const bool order_ok = sol.riccati_cost < eq.posterior && sol.riccati_cost < mx.posterior && obj < eq.posterior &&
                          obj < mx.posterior;
    Outcome o{obj_ok && ip_ok && order_ok,
              "objective " + fmt("%.5f", obj) + " (4.91 +/-3%), input perturbation equalized " +
                  fmt("%.4f", eq.posterior) + " / max-rho " + fmt("%.4f", mx.posterior) + " (7.06 +/-3%), status " +
                  sdp::to_string(sol.status)};
    solved.push_back({"syndromic", model, priv, std::move(sol)});
    return o;
}

Outcome tightness()
{
    std::mt19937_64 g(4004);
    std::vector<double> gaps, acts;
    std::string failures;
    for (int k = 0; k < 10; ++k) {
        const std::size_t n = 1 + std::uniform_int_distribution<std::size_t>(1, 4)(g);
        const std::size_t T = std::uniform_int_distribution<std::size_t>(2, 15)(g);
        auto inst = fixtures::random_instance(g, n, 2, T);
        const auto priv = calibrate(fixtures::log_uniform(g, 0.2, 3.0), fixtures::log_uniform(g, 1e-4, 0.1));
        try {
            auto sol = design_pipeline(inst.model, inst.adj, priv, Horizon::finite);
            solved.push_back({"random " + std::to_string(k), inst.model, priv, std::move(sol)});
        }
        catch (const std::exception& e) {
            failures += " random " + std::to_string(k) + ": " + e.what() + ";";
        }
    }
    double worst_gap = 0.0, worst_act = 0.0;
    for (const auto& s : solved) {
        worst_gap = std::max(worst_gap, std::abs(s.sol.sdp_objective - s.sol.riccati_cost) / s.sol.sdp_objective);
        worst_act = std::max(worst_act, s.sol.activity_error);
    }
    const bool ok = failures.empty() && solved.size() == 11 && worst_gap <= 1e-4 && worst_act <= 1e-4;
    return {ok, std::to_string(solved.size()) + " instances, max |objective - Riccati cost| / objective " +
                    fmt("%.3e", worst_gap) + ", max activity error " + fmt("%.3e", worst_act) + " (limits 1e-4)" +
                    failures};
}

Outcome round_trip()
{
    double worst = 0.0;
    for (const auto& s : solved) {
        const auto rec = recover_d(s.sol.pi, s.model.V(), s.priv, s.sol.shaping().adjacency(), s.model.output_dims());
        worst = std::max(worst, linalg::relative_frobenius(pi_from_d(rec.shaping, s.model.V(), s.priv), s.sol.pi));
    }
    return {!solved.empty() && worst <= 1e-6,
            std::to_string(solved.size()) + " solved instances, max relative Frobenius error " + fmt("%.3e", worst) +
                " (limit 1e-6)"};
}

Outcome equalization()
{
    std::mt19937_64 g(6006);
    double eq_err = 0.0, sens_err = 0.0, pi_min = 0.0, cost_up = -1e300;
    int count = 0;
    while (count < 50) {
        auto inst = fixtures::random_instance(g, 2 + count % 4, 2, 6);
        const auto& model = inst.model;
        const auto q = 1 + count % 3;
        ShapingMatrix raw(fixtures::random_matrix(g, q, model.output_dim()), model.output_dims(), inst.adj);
        ShapingMatrix D(raw.matrix() / raw.sensitivity(), model.output_dims(), inst.adj); // Delta_2 D = 1
        const auto b = D.block_sensitivities();
        if (*std::min_element(b.begin(), b.end()) > 1.0 - 1e-3)
            continue; // already equalized
        ++count;
        const auto E = equalize_sensitivity(D);
        for (double v : E.block_sensitivities())
            eq_err = std::max(eq_err, std::abs(v - D.sensitivity()));
        sens_err = std::max(sens_err, std::abs(E.sensitivity() - D.sensitivity()));
        const auto priv = calibrate(1.0, 0.05);
        pi_min = std::min(pi_min, min_eig(pi_from_d(E, model.V(), priv) - pi_from_d(D, model.V(), priv)));
        cost_up = std::max(cost_up, run_covariance_recursion(model, E, priv).cost() -
                                        run_covariance_recursion(model, D, priv).cost());
    }
    const bool ok = eq_err <= 1e-8 && sens_err <= 1e-8 && pi_min >= -1e-9 && cost_up <= 1e-9;
    return {ok, "50 matrices, block equalization error " + fmt("%.2e", eq_err) + ", sensitivity change " +
                    fmt("%.2e", sens_err) + ", min eig of Pi gain " + fmt("%.2e", pi_min) + ", max cost increase " +
                    fmt("%.2e", cost_up)};
}

Outcome calibration()
{
    double worst_k = 0.0, worst_q = 0.0;
    for (int i = 0; i < 10; ++i)
        for (int j = 0; j < 10; ++j) {
            const double eps = 0.05 * std::pow(100.0, i / 9.0);
            const double delta = 1e-9 * std::pow(0.4e9, j / 9.0);
            const auto s = calibrate(eps, delta);
            worst_k = std::max(worst_k, std::abs(kappa_residual(s)));
            worst_q = std::max(worst_q, std::abs(q_function(s.mu) - delta));
        }
    return {worst_k <= 1e-12 && worst_q <= 1e-12,
            "100 (eps, delta) pairs, max |2 eps k^2 - 2 mu k - 1| " + fmt("%.2e", worst_k) + ", max |Q(Q^-1(d)) - d| " +
                fmt("%.2e", worst_q)};
}

Outcome monte_carlo()
{
    const std::string config = std::string(DPKF_SCENARIO_DIR) + "/syndromic.json";
    const auto cfg = load_config(config);
    const auto base = fs::temp_directory_path() / "dpkf_acceptance";
    std::vector<std::string> csv;
    SimulationReport rep;
    for (const char* run : {"a", "b"}) {
        const auto dir = base / run;
        fs::remove_all(dir);
        cli::Options o;
        o.command = "simulate";
        o.config = config;
        o.out = dir.string();
        std::ostringstream sink;
        rep = cli::cmd_simulate(cfg, o, sink);
        std::ifstream f(dir / "sim.csv", std::ios::binary);
        std::stringstream ss;
        ss << f.rdbuf();
        csv.push_back(ss.str());
    }
    const double z = (rep.empirical_average - rep.analytic_average) / rep.average_standard_error;
    const bool identical = csv[0] == csv[1] && !csv[0].empty();
    const bool ok = rep.replications == 10000 && rep.empirical_mse.size() == 51 && std::abs(z) <= 3.0 && identical;
    return {ok, std::to_string(rep.replications) + " replications over T = " +
                    std::to_string(rep.empirical_mse.size() - 1) + ": empirical " + fmt("%.5f", rep.empirical_average) +
                    " vs analytic " + fmt("%.5f", rep.analytic_average) + " (" + fmt("%.2f", z) + " SE), csv " +
                    (identical ? "bit-identical" : "differs") + " across runs"};
}

Outcome monotonicity()
{
    std::mt19937_64 g(9009);
    double worst = 0.0;
    for (int k = 0; k < 100; ++k) {
        auto inst = fixtures::random_instance(g, 1 + k % 4, 2, 10);
        const auto p = inst.model.output_dim();
        const Matrix Pi2 = fixtures::random_psd(g, p, 1 + k % p) * fixtures::log_uniform(g, 0.01, 10.0);
        const Matrix Pi1 = Pi2 + fixtures::random_psd(g, p, 1 + (k / 4) % p) * fixtures::log_uniform(g, 0.01, 10.0);
        const auto a = covariance_recursion(inst.model, Pi1);
        const auto b = covariance_recursion(inst.model, Pi2);
        for (std::size_t t = 0; t <= 10; ++t) {
            worst = std::min(worst, min_eig(b.posterior[t] - a.posterior[t]));
            worst = std::min(worst, min_eig(b.predicted[t] - a.predicted[t]));
        }
    }
    return {worst >= -1e-10, "100 pairs, t <= 10, min eigenvalue of Sigma(Pi2) - Sigma(Pi1) " + fmt("%.2e", worst) +
                                 " (limit -1e-10)"};
}

} // namespace

int main()
{
    const std::vector<Criterion> criteria{
        {1, "scalar closed forms", 0.0, scalar_closed_forms},
        {2, "closed form matches Riccati fixed point", 1.0, closed_form_vs_riccati},
        {3, "syndromic design and input perturbation", 30.0, syndromic},
        {4, "relaxation is tight", 300.0, tightness},
        {5, "Pi -> D -> Pi round trip", 0.0, round_trip},
        {6, "sensitivity equalization", 0.0, equalization},
        {7, "noise calibration", 0.0, calibration},
        {8, "Monte Carlo consistency", 120.0, monte_carlo},
        {9, "Riccati monotonicity", 0.0, monotonicity},
    };
    int failed = 0;
    for (const auto& c : criteria) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        }
        catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = seconds_since(t0);
        if (c.time_limit > 0.0 && secs > c.time_limit) {
            o.pass = false;
            o.detail += ", over the " + fmt("%.0f", c.time_limit) + " s limit";
        }
        failed += o.pass ? 0 : 1;
        std::printf("%s  %d. %s: %s [%.2f s]\n", o.pass ? "PASS" : "FAIL", c.id, c.name.c_str(), o.detail.c_str(), secs);
        std::fflush(stdout);
    }
    std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
    return failed == 0 ? 0 : 1;
}
