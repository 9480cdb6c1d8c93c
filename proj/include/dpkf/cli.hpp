#pragma once

// Commands behind the dpkf executable. Each command reads a ScenarioConfig,
// writes its files into the output directory and a short summary to `out`.

#include "dpkf/config.hpp"
#include "dpkf/design.hpp"
#include "dpkf/riccati.hpp"
#include "dpkf/sdp.hpp"
#include "dpkf/simulate.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace dpkf::cli {

enum ExitCode : int { ok = 0, internal_error = 1, validation_error = 2, solver_error = 3 };

struct Options {
    std::string command;
    std::string config;
    std::string out = ".";
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> replications;
    std::optional<double> gap;
};

/// 12 significant digits, the precision of every CSV cell.
inline std::string format_number(double v)
{
    if (std::isnan(v))
        return "nan";
    if (std::isinf(v))
        return v > 0 ? "inf" : "-inf";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return buf;
}

/// Optional cells stay empty.
inline std::string format_cell(const std::optional<double>& v) { return v ? format_number(*v) : ""; }

inline void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
                      const std::vector<std::vector<std::string>>& rows)
{
    std::ofstream f(path, std::ios::binary);
    if (!f)
        throw Error("cannot write " + path.string());
    auto line = [&](const std::vector<std::string>& cells) {
        for (std::size_t k = 0; k < cells.size(); ++k)
            f << (k ? "," : "") << cells[k];
        f << '\n';
    };
    line(header);
    for (const auto& r : rows)
        line(r);
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j)
{
    std::ofstream f(path, std::ios::binary);
    if (!f)
        throw Error("cannot write " + path.string());
    f << j.dump(2) << '\n';
}

/// Column labels of D: participant index and output component.
inline std::vector<std::string> d_column_labels(const GlobalModel& model)
{
    std::vector<std::string> out;
    for (std::size_t i = 0; i < model.participants(); ++i)
        for (Eigen::Index j = 0; j < model.output_dim(i); ++j)
            out.push_back("p" + std::to_string(i) + "_y" + std::to_string(j));
    return out;
}

/// The closed-form aggregation scenario, when every participant is the same
/// scalar system and the query is the plain sum.
inline std::optional<ScalarScenario> uniform_scalar(const ScenarioConfig& cfg)
{
    const auto& p0 = cfg.participants.front();
    for (const auto& p : cfg.participants) {
        if (p.A.size() != 1 || p.C.size() != 1 || p.L_row.size() != 1 || p.L_row(0, 0) != 1.0)
            return std::nullopt;
        if (p.A != p0.A || p.C != p0.C || p.W != p0.W || p.V != p0.V || p.rho != p0.rho)
            return std::nullopt;
    }
    ScalarScenario s;
    s.a = p0.A(0, 0);
    s.c = p0.C(0, 0);
    s.sigma_w2 = p0.W(0, 0);
    s.sigma_v2 = p0.V(0, 0);
    s.rho = p0.rho;
    s.n = static_cast<int>(cfg.participant_count());
    s.epsilon = cfg.privacy.epsilon;
    s.delta = cfg.privacy.delta;
    return s;
}

/// Steady-state predicted variance of the scalar sum, from the Riccati fixed
/// point of one participant with effective noise variance r_eff.
inline double scalar_are(const ScalarScenario& s, double r_eff)
{
    const Matrix a = Matrix::Constant(1, 1, s.a);
    const Matrix c = Matrix::Constant(1, 1, s.c);
    const Matrix w = Matrix::Constant(1, 1, s.sigma_w2);
    const Matrix pi = Matrix::Constant(1, 1, 1.0 / r_eff);
    return static_cast<double>(s.n) * steady_state_covariance(a, c, w, pi).predicted(0, 0);
}

inline nlohmann::json scalar_report(const ScalarScenario& s)
{
    const double g = s.gamma();
    const auto ip = mse_input_perturbation_scalar(s);
    const auto ag = mse_aggregated_scalar(s);
    return {{"n", s.n},
            {"gamma", g},
            {"input_perturbation", {{"mse", ip.mse}, {"beta", ip.beta}, {"riccati_fixed_point", scalar_are(s, s.sigma_v2 + g * g)}}},
            {"aggregated",
             {{"mse", ag.mse},
              {"beta", ag.beta},
              {"riccati_fixed_point", scalar_are(s, s.sigma_v2 + g * g / static_cast<double>(s.n))}}}};
}

/// A mechanism turned into a concrete shaping matrix.
struct Realized {
    std::string name;
    ShapingMatrix shaping;
    std::optional<DesignSolution> design;
};

struct Context {
    ScenarioConfig config;
    GlobalModel model;     ///< model the design is computed for
    Horizon horizon;
    AdjacencySpec adj;
    PrivacySpec priv;
    DesignOptions design_options;

    static Context make(const ScenarioConfig& cfg, const Options& opts)
    {
        DesignOptions d;
        if (opts.gap) {
            if (!(*opts.gap > 0.0))
                throw ConfigError("--gap", "must be positive");
            d.solver.gap = *opts.gap;
        }
        return Context{cfg,
                       cfg.model(cfg.horizon.value_or(1)),
                       cfg.stationary() ? Horizon::stationary : Horizon::finite,
                       cfg.adjacency(),
                       cfg.privacy_spec(),
                       d};
    }

    Realized realize(MechanismType type) const
    {
        switch (type) {
        case MechanismType::two_stage_sdp: {
            auto sol = design_pipeline(model, adj, priv, horizon, design_options);
            ShapingMatrix D = sol.shaping();
            return {to_string(type), std::move(D), std::move(sol)};
        }
        case MechanismType::input_perturbation:
            return {to_string(type), input_perturbation(model, adj, InputPerturbation::equalized), std::nullopt};
        case MechanismType::input_perturbation_maxrho:
            return {to_string(type), input_perturbation(model, adj, InputPerturbation::max_rho), std::nullopt};
        case MechanismType::fixed_D:
            return {to_string(type), ShapingMatrix(*config.mechanism.D, model.output_dims(), adj), std::nullopt};
        }
        throw Error("unknown mechanism");
    }

    SimulationPlan plan(const ShapingMatrix& D, const Options& opts) const
    {
        const auto sim = config.simulation_or_default();
        SimulationPlan p{config.model(config.evaluation_horizon()), MechanismSpec(D, priv)};
        p.replications = opts.replications.value_or(sim.replications);
        p.seed = opts.seed.value_or(sim.seed);
        p.threads = sim.threads;
        if (p.replications < 1)
            throw ConfigError("replications", "must be at least 1");
        return p;
    }
};

inline nlohmann::json horizon_json(const ScenarioConfig& cfg)
{
    if (cfg.horizon)
        return *cfg.horizon;
    return "stationary";
}

inline nlohmann::json solver_json(const sdp::Solution& s)
{
    return {{"status", sdp::to_string(s.status)},
            {"primal_objective", s.primal_objective},
            {"dual_objective", s.dual_objective},
            {"relative_gap", s.relative_gap},
            {"primal_infeasibility", s.primal_infeasibility},
            {"dual_infeasibility", s.dual_infeasibility},
            {"max_violation", s.max_violation},
            {"iterations", s.iterations},
            {"seconds", s.seconds},
            {"message", s.message}};
}

inline nlohmann::json cmd_design(const ScenarioConfig& cfg, const Options& opts, std::ostream& out)
{
    const auto ctx = Context::make(cfg, opts);
    const Realized r = ctx.realize(cfg.mechanism.type);
    const auto cost = r.design ? DesignCost{r.design->riccati_cost, r.design->predicted_cost}
                               : evaluate_design(ctx.model, r.shaping, ctx.priv, ctx.horizon);
    constexpr double activity_tol = 1e-4;
    const auto blocks = r.shaping.block_sensitivities();
    std::vector<bool> active;
    for (double b : blocks)
        active.push_back(std::abs(b - 1.0) <= activity_tol);

    nlohmann::json j;
    j["mechanism"] = r.name;
    j["horizon"] = horizon_json(cfg);
    j["participants"] = ctx.model.participants();
    j["privacy"] = {{"epsilon", ctx.priv.epsilon}, {"delta", ctx.priv.delta},
                    {"mu", ctx.priv.mu}, {"kappa", ctx.priv.kappa}};
    j["objective"] = r.design ? r.design->sdp_objective : cost.posterior;
    j["cost"] = {{"posterior", cost.posterior}, {"predicted", cost.predicted}};
    j["sensitivity"] = r.shaping.sensitivity();
    j["noise_std"] = ctx.priv.kappa * r.shaping.sensitivity();
    j["block_sensitivities"] = blocks;
    j["active"] = active;
    j["activity_tolerance"] = activity_tol;
    j["D"] = detail::write_matrix(r.shaping.matrix());
    if (r.design) {
        const auto& d = *r.design;
        j["status"] = sdp::to_string(d.status);
        j["solver"] = solver_json(d.solver);
        j["rank"] = d.recovery->rank;
        j["m_eigenvalues"] = detail::write_vector(d.recovery->m_eigenvalues);
        j["activity_error"] = d.activity_error;
        j["tightness_condition"] = d.tightness_condition;
        j["warnings"] = d.warnings;
    }
    if (const auto s = uniform_scalar(cfg))
        j["scalar_closed_form"] = scalar_report(*s);

    std::filesystem::create_directories(opts.out);
    write_json(std::filesystem::path(opts.out) / "design.json", j);
    std::vector<std::vector<std::string>> rows;
    for (Eigen::Index i = 0; i < r.shaping.rows(); ++i) {
        std::vector<std::string> row;
        for (Eigen::Index k = 0; k < r.shaping.cols(); ++k)
            row.push_back(format_number(r.shaping.matrix()(i, k)));
        rows.push_back(std::move(row));
    }
    write_csv(std::filesystem::path(opts.out) / "D.csv", d_column_labels(ctx.model), rows);

    out << "mechanism      " << r.name << "\n";
    if (r.design)
        out << "status         " << sdp::to_string(r.design->status) << "\n"
            << "objective      " << format_number(r.design->sdp_objective) << "\n"
            << "rank of D      " << r.shaping.rows() << "\n";
    out << "posterior mse  " << format_number(cost.posterior) << "\n"
        << "predicted mse  " << format_number(cost.predicted) << "\n"
        << "sensitivity    " << format_number(r.shaping.sensitivity()) << "\n"
        << "noise std      " << format_number(ctx.priv.kappa * r.shaping.sensitivity()) << "\n";
    if (j.contains("scalar_closed_form")) {
        const auto& s = j["scalar_closed_form"];
        out << "closed form    input perturbation " << format_number(s["input_perturbation"]["mse"])
            << ", aggregated " << format_number(s["aggregated"]["mse"]) << " (steady-state predicted)\n";
    }
    if (r.design)
        for (const auto& w : r.design->warnings)
            out << "warning: " << w << "\n";
    return j;
}

/// One row of the comparison table.
struct CompareRow {
    std::string mechanism;
    std::optional<double> analytic;
    std::optional<double> analytic_predicted;
    std::optional<double> horizon_analytic; ///< time average over the simulated horizon
    std::optional<double> empirical;
    std::optional<double> empirical_se;
};

inline std::vector<CompareRow> cmd_compare(const ScenarioConfig& cfg, const Options& opts, std::ostream& out)
{
    const auto ctx = Context::make(cfg, opts);
    std::vector<MechanismType> kinds{cfg.mechanism.type};
    for (auto k : {MechanismType::input_perturbation, MechanismType::input_perturbation_maxrho})
        if (k != cfg.mechanism.type)
            kinds.push_back(k);

    std::vector<CompareRow> rows;
    for (auto k : kinds) {
        const Realized r = ctx.realize(k);
        CompareRow row;
        row.mechanism = r.name;
        const auto c = r.design ? DesignCost{r.design->riccati_cost, r.design->predicted_cost}
                                : evaluate_design(ctx.model, r.shaping, ctx.priv, ctx.horizon);
        row.analytic = c.posterior;
        row.analytic_predicted = c.predicted;
        if (opts.replications) {
            const auto rep = run_plan(ctx.plan(r.shaping, opts));
            row.horizon_analytic = rep.analytic_average;
            row.empirical = rep.empirical_average;
            row.empirical_se = rep.average_standard_error;
        }
        rows.push_back(std::move(row));
    }
    if (const auto s = uniform_scalar(cfg)) {
        // Closed forms are steady-state predicted variances.
        rows.push_back({"closed_form_input_perturbation", std::nullopt,
                        mse_input_perturbation_scalar(*s).mse, std::nullopt, std::nullopt, std::nullopt});
        rows.push_back({"closed_form_aggregated", std::nullopt, mse_aggregated_scalar(*s).mse,
                        std::nullopt, std::nullopt, std::nullopt});
    }

    std::vector<std::vector<std::string>> cells;
    for (const auto& r : rows)
        cells.push_back({r.mechanism, format_cell(r.analytic), format_cell(r.analytic_predicted),
                         format_cell(r.horizon_analytic), format_cell(r.empirical),
                         format_cell(r.empirical_se)});
    std::filesystem::create_directories(opts.out);
    write_csv(std::filesystem::path(opts.out) / "compare.csv",
              {"mechanism", "analytic_mse", "analytic_mse_predicted", "horizon_analytic_mse",
               "empirical_mse", "empirical_se"},
              cells);

    out << std::left << std::setw(34) << "mechanism" << std::setw(16) << "posterior mse"
        << std::setw(16) << "predicted mse" << "empirical mse\n";
    for (const auto& r : rows) {
        out << std::setw(34) << r.mechanism << std::setw(16) << (r.analytic ? format_number(*r.analytic) : "-")
            << std::setw(16) << (r.analytic_predicted ? format_number(*r.analytic_predicted) : "-");
        if (r.empirical)
            out << format_number(*r.empirical) << " +/- " << format_number(*r.empirical_se) << " (analytic "
                << format_number(*r.horizon_analytic) << ")";
        else
            out << "-";
        out << "\n";
    }
    return rows;
}

inline SimulationReport cmd_simulate(const ScenarioConfig& cfg, const Options& opts, std::ostream& out)
{
    const auto ctx = Context::make(cfg, opts);
    // Validate the plan before paying for a design.
    const auto sim = cfg.simulation_or_default();
    if (opts.replications.value_or(sim.replications) < 1)
        throw ConfigError("replications", "must be at least 1");
    const Realized r = ctx.realize(cfg.mechanism.type);
    const auto rep = run_plan(ctx.plan(r.shaping, opts));

    std::vector<std::vector<std::string>> rows;
    for (std::size_t t = 0; t < rep.empirical_mse.size(); ++t)
        rows.push_back({std::to_string(t), format_number(rep.analytic_mse[t]),
                        format_number(rep.empirical_mse[t]), format_number(rep.standard_error[t])});
    std::filesystem::create_directories(opts.out);
    write_csv(std::filesystem::path(opts.out) / "sim.csv", {"t", "analytic_mse", "empirical_mse", "stderr"}, rows);

    const double z = (rep.empirical_average - rep.analytic_average) / rep.average_standard_error;
    nlohmann::json j{{"mechanism", r.name},
                     {"replications", rep.replications},
                     {"seed", rep.seed},
                     {"horizon", rep.empirical_mse.size() - 1},
                     {"analytic_average", rep.analytic_average},
                     {"empirical_average", rep.empirical_average},
                     {"average_standard_error", rep.average_standard_error},
                     {"z_score", std::isfinite(z) ? nlohmann::json(z) : nlohmann::json(nullptr)},
                     {"wall_seconds", rep.wall_seconds}};
    write_json(std::filesystem::path(opts.out) / "sim.json", j);

    out << "mechanism          " << r.name << "\n"
        << "replications       " << rep.replications << " (seed " << rep.seed << ")\n"
        << "analytic average   " << format_number(rep.analytic_average) << "\n"
        << "empirical average  " << format_number(rep.empirical_average) << " +/- "
        << format_number(rep.average_standard_error) << "\n";
    return rep;
}

inline nlohmann::json cmd_scalar_example(const ScenarioConfig& cfg, const Options& opts, std::ostream& out)
{
    const auto s = uniform_scalar(cfg);
    if (!s)
        throw ConfigError("participants", "scalar-example needs identical scalar participants with L_row [[1]]");
    nlohmann::json j = scalar_report(*s);
    std::filesystem::create_directories(opts.out);
    write_json(std::filesystem::path(opts.out) / "scalar.json", j);
    out << "n = " << s->n << ", gamma = " << format_number(j["gamma"]) << "\n"
        << "input perturbation  mse " << format_number(j["input_perturbation"]["mse"]) << "  (fixed point "
        << format_number(j["input_perturbation"]["riccati_fixed_point"]) << ")\n"
        << "aggregated          mse " << format_number(j["aggregated"]["mse"]) << "  (fixed point "
        << format_number(j["aggregated"]["riccati_fixed_point"]) << ")\n";
    return j;
}

/// Runs one command and maps failures to exit codes.
inline int run(const Options& opts, std::ostream& out, std::ostream& err)
{
    try {
        const auto cfg = load_config(opts.config);
        if (opts.command == "design")
            cmd_design(cfg, opts, out);
        else if (opts.command == "compare")
            cmd_compare(cfg, opts, out);
        else if (opts.command == "simulate")
            cmd_simulate(cfg, opts, out);
        else if (opts.command == "scalar-example")
            cmd_scalar_example(cfg, opts, out);
        else
            throw ConfigError("", "unknown command " + opts.command);
        return ok;
    }
    catch (const ConfigError& e) {
        err << "invalid configuration: " << e.what() << "\n";
        return validation_error;
    }
    catch (const DesignError& e) {
        err << "design failed: " << e.what() << "\n";
        return solver_error;
    }
    catch (const sdp::SolverError& e) {
        err << "solver failed: " << e.what() << "\n";
        return solver_error;
    }
    catch (const ConvergenceError& e) {
        err << "riccati iteration failed: " << e.what() << "\n";
        return solver_error;
    }
    catch (const NumericalError& e) {
        err << "numerical failure: " << e.what() << "\n";
        return solver_error;
    }
    catch (const DomainError& e) {
        err << "invalid input: " << e.what() << "\n";
        return validation_error;
    }
    catch (const DimensionError& e) {
        err << "invalid input: " << e.what() << "\n";
        return validation_error;
    }
    catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return internal_error;
    }
}

} // namespace dpkf::cli
