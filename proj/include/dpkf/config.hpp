#pragma once

// JSON scenario files. Matrices are row-major nested arrays, vectors flat
// arrays. Unknown keys are rejected and every error names the offending field.
//
// {
//   "participants": [ { "A": [[..]], "C": [[..]], "W": [[..]], "V": [[..]],
//                       "x0_mean": [..], "Sigma0": [[..]], "rho": 5,
//                       "L_row": [[..]], "repeat": 1 } ],
//   "privacy":    { "epsilon": 1.0986, "delta": 0.01 },
//   "horizon":    "stationary" | T,
//   "mechanism":  { "type": "two_stage_sdp" | "input_perturbation" |
//                           "input_perturbation_maxrho" | "fixed_D", "D": [[..]] },
//   "simulation": { "replications": 1000, "seed": 1, "steps": 50, "threads": 1 }
// }

#include "dpkf/lin_model.hpp"
#include "dpkf/linalg.hpp"
#include "dpkf/privacy.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace dpkf {

class ConfigError : public Error {
public:
    ConfigError(const std::string& path, const std::string& what)
        : Error(path.empty() ? what : path + ": " + what), path_(path)
    {
    }
    const std::string& path() const { return path_; }

private:
    std::string path_;
};

enum class MechanismType { two_stage_sdp, input_perturbation, input_perturbation_maxrho, fixed_D };

inline const char* to_string(MechanismType t)
{
    switch (t) {
    case MechanismType::two_stage_sdp: return "two_stage_sdp";
    case MechanismType::input_perturbation: return "input_perturbation";
    case MechanismType::input_perturbation_maxrho: return "input_perturbation_maxrho";
    case MechanismType::fixed_D: return "fixed_D";
    }
    return "unknown";
}

struct ParticipantConfig {
    Matrix A, C, W, V;
    Vector x0_mean;
    Matrix Sigma0;
    double rho = 1.0;
    Matrix L_row;
    std::size_t repeat = 1;
};

struct PrivacyConfig {
    double epsilon = 1.0;
    double delta = 0.05;
};

struct MechanismConfig {
    MechanismType type = MechanismType::two_stage_sdp;
    std::optional<Matrix> D;
};

struct SimulationConfig {
    std::size_t replications = 1000;
    std::uint64_t seed = 1;
    std::size_t steps = 50;
    unsigned threads = 1;
};

struct ScenarioConfig {
    std::vector<ParticipantConfig> participants;
    PrivacyConfig privacy;
    std::optional<std::size_t> horizon; ///< empty means stationary
    MechanismConfig mechanism;
    std::optional<SimulationConfig> simulation;

    bool stationary() const { return !horizon.has_value(); }

    SimulationConfig simulation_or_default() const { return simulation.value_or(SimulationConfig{}); }

    /// Participants after expanding `repeat`.
    std::vector<ParticipantConfig> expanded() const
    {
        std::vector<ParticipantConfig> out;
        for (const auto& p : participants)
            for (std::size_t k = 0; k < p.repeat; ++k)
                out.push_back(p);
        return out;
    }

    std::size_t participant_count() const
    {
        std::size_t n = 0;
        for (const auto& p : participants)
            n += p.repeat;
        return n;
    }

    /// Global model over t = 0..T.
    GlobalModel model(std::size_t T) const
    {
        std::vector<IndividualModel> models;
        std::vector<Matrix> rows;
        std::vector<Eigen::Index> dims;
        for (const auto& p : expanded()) {
            models.push_back(IndividualModel::constant(p.A, p.C, p.W, p.V, p.x0_mean, p.Sigma0, T));
            rows.push_back(p.L_row);
            dims.push_back(p.A.rows());
        }
        return build_global(std::move(models), query_from_rows(rows, dims, T));
    }

    /// Horizon used for finite-horizon evaluation and simulation.
    std::size_t evaluation_horizon() const
    {
        return horizon ? *horizon : simulation_or_default().steps;
    }

    AdjacencySpec adjacency() const
    {
        std::vector<double> rho;
        for (const auto& p : expanded())
            rho.push_back(p.rho);
        return AdjacencySpec(std::move(rho));
    }

    PrivacySpec privacy_spec() const { return calibrate(privacy.epsilon, privacy.delta); }
};

namespace detail {

using nlohmann::json;

inline void check_keys(const json& j, const std::string& path, const std::set<std::string>& allowed)
{
    if (!j.is_object())
        throw ConfigError(path, "expected an object");
    for (const auto& [key, value] : j.items())
        if (!allowed.count(key))
            throw ConfigError(path.empty() ? key : path + "." + key, "unknown field");
}

inline const json& require(const json& j, const std::string& key, const std::string& path)
{
    if (!j.contains(key))
        throw ConfigError(path.empty() ? key : path + "." + key, "missing required field");
    return j.at(key);
}

inline double read_number(const json& j, const std::string& path)
{
    if (!j.is_number())
        throw ConfigError(path, "expected a number");
    const double v = j.get<double>();
    if (!std::isfinite(v))
        throw ConfigError(path, "expected a finite number");
    return v;
}

inline std::uint64_t read_count(const json& j, const std::string& path)
{
    if (!j.is_number_integer())
        throw ConfigError(path, "expected a non-negative integer");
    if (j.is_number_unsigned())
        return j.get<std::uint64_t>();
    const auto v = j.get<std::int64_t>();
    if (v < 0)
        throw ConfigError(path, "expected a non-negative integer");
    return static_cast<std::uint64_t>(v);
}

inline Matrix read_matrix(const json& j, const std::string& path)
{
    if (!j.is_array() || j.empty())
        throw ConfigError(path, "expected a non-empty array of rows");
    const auto rows = static_cast<Eigen::Index>(j.size());
    Eigen::Index cols = -1;
    Matrix m;
    for (Eigen::Index r = 0; r < rows; ++r) {
        const auto& row = j[static_cast<std::size_t>(r)];
        const std::string rp = path + "[" + std::to_string(r) + "]";
        if (!row.is_array() || row.empty())
            throw ConfigError(rp, "expected a non-empty array of numbers");
        if (cols < 0) {
            cols = static_cast<Eigen::Index>(row.size());
            m.resize(rows, cols);
        }
        else if (static_cast<Eigen::Index>(row.size()) != cols) {
            throw ConfigError(rp, "row has " + std::to_string(row.size()) + " entries, expected " +
                                      std::to_string(cols));
        }
        for (Eigen::Index c = 0; c < cols; ++c)
            m(r, c) = read_number(row[static_cast<std::size_t>(c)], rp + "[" + std::to_string(c) + "]");
    }
    return m;
}

inline Vector read_vector(const json& j, const std::string& path)
{
    if (!j.is_array() || j.empty())
        throw ConfigError(path, "expected a non-empty array of numbers");
    Vector v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t k = 0; k < j.size(); ++k)
        v(static_cast<Eigen::Index>(k)) = read_number(j[k], path + "[" + std::to_string(k) + "]");
    return v;
}

inline json write_matrix(const Matrix& m)
{
    json out = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            row.push_back(m(r, c));
        out.push_back(std::move(row));
    }
    return out;
}

inline json write_vector(const Vector& v)
{
    json out = json::array();
    for (Eigen::Index k = 0; k < v.size(); ++k)
        out.push_back(v(k));
    return out;
}

inline void check_shape(const Matrix& m, Eigen::Index rows, Eigen::Index cols, const std::string& path)
{
    if (m.rows() != rows || m.cols() != cols)
        throw ConfigError(path, "expected a " + std::to_string(rows) + "x" + std::to_string(cols) +
                                    " matrix, got " + std::to_string(m.rows()) + "x" +
                                    std::to_string(m.cols()));
}

inline void check_pd(const Matrix& m, const std::string& path)
{
    if (!linalg::is_positive_definite(m))
        throw ConfigError(path, "must be symmetric positive definite");
}

inline ParticipantConfig read_participant(const json& j, const std::string& path)
{
    check_keys(j, path, {"A", "C", "W", "V", "x0_mean", "Sigma0", "rho", "L_row", "repeat"});
    ParticipantConfig p;
    p.A = read_matrix(require(j, "A", path), path + ".A");
    const auto m = p.A.rows();
    check_shape(p.A, m, m, path + ".A");
    p.C = read_matrix(require(j, "C", path), path + ".C");
    const auto q = p.C.rows();
    check_shape(p.C, q, m, path + ".C");
    p.W = read_matrix(require(j, "W", path), path + ".W");
    check_shape(p.W, m, m, path + ".W");
    check_pd(p.W, path + ".W");
    p.V = read_matrix(require(j, "V", path), path + ".V");
    check_shape(p.V, q, q, path + ".V");
    check_pd(p.V, path + ".V");
    p.x0_mean = read_vector(require(j, "x0_mean", path), path + ".x0_mean");
    if (p.x0_mean.size() != m)
        throw ConfigError(path + ".x0_mean", "expected " + std::to_string(m) + " entries");
    p.Sigma0 = read_matrix(require(j, "Sigma0", path), path + ".Sigma0");
    check_shape(p.Sigma0, m, m, path + ".Sigma0");
    check_pd(p.Sigma0, path + ".Sigma0");
    p.rho = read_number(require(j, "rho", path), path + ".rho");
    if (!(p.rho > 0.0))
        throw ConfigError(path + ".rho", "must be positive");
    p.L_row = read_matrix(require(j, "L_row", path), path + ".L_row");
    if (p.L_row.cols() != m)
        throw ConfigError(path + ".L_row", "expected " + std::to_string(m) + " columns");
    if (j.contains("repeat")) {
        p.repeat = read_count(j.at("repeat"), path + ".repeat");
        if (p.repeat < 1)
            throw ConfigError(path + ".repeat", "must be at least 1");
    }
    return p;
}

} // namespace detail

inline ScenarioConfig parse_config(const nlohmann::json& j)
{
    using detail::require;
    detail::check_keys(j, "", {"participants", "privacy", "horizon", "mechanism", "simulation"});
    ScenarioConfig cfg;

    const auto& parts = require(j, "participants", "");
    if (!parts.is_array() || parts.empty())
        throw ConfigError("participants", "expected a non-empty array");
    for (std::size_t i = 0; i < parts.size(); ++i)
        cfg.participants.push_back(
            detail::read_participant(parts[i], "participants[" + std::to_string(i) + "]"));
    const auto z = cfg.participants.front().L_row.rows();
    for (std::size_t i = 0; i < cfg.participants.size(); ++i)
        if (cfg.participants[i].L_row.rows() != z)
            throw ConfigError("participants[" + std::to_string(i) + "].L_row",
                              "all participants must use the same number of query rows");

    const auto& pj = require(j, "privacy", "");
    detail::check_keys(pj, "privacy", {"epsilon", "delta"});
    cfg.privacy.epsilon = detail::read_number(require(pj, "epsilon", "privacy"), "privacy.epsilon");
    cfg.privacy.delta = detail::read_number(require(pj, "delta", "privacy"), "privacy.delta");
    if (!(cfg.privacy.epsilon > 0.0))
        throw ConfigError("privacy.epsilon", "must be positive");
    if (!(cfg.privacy.delta > 0.0 && cfg.privacy.delta < 1.0))
        throw ConfigError("privacy.delta", "must lie in (0, 1)");

    const auto& hj = require(j, "horizon", "");
    if (hj.is_string()) {
        if (hj.get<std::string>() != "stationary")
            throw ConfigError("horizon", "expected \"stationary\" or a non-negative integer");
    }
    else {
        cfg.horizon = detail::read_count(hj, "horizon");
    }

    const auto& mj = require(j, "mechanism", "");
    detail::check_keys(mj, "mechanism", {"type", "D"});
    const auto& tj = require(mj, "type", "mechanism");
    const std::string type = tj.is_string() ? tj.get<std::string>() : "";
    if (type == "two_stage_sdp")
        cfg.mechanism.type = MechanismType::two_stage_sdp;
    else if (type == "input_perturbation")
        cfg.mechanism.type = MechanismType::input_perturbation;
    else if (type == "input_perturbation_maxrho")
        cfg.mechanism.type = MechanismType::input_perturbation_maxrho;
    else if (type == "fixed_D")
        cfg.mechanism.type = MechanismType::fixed_D;
    else
        throw ConfigError("mechanism.type", "expected one of two_stage_sdp, input_perturbation, "
                                            "input_perturbation_maxrho, fixed_D");
    if (mj.contains("D")) {
        if (cfg.mechanism.type != MechanismType::fixed_D)
            throw ConfigError("mechanism.D", "only allowed with type fixed_D");
        cfg.mechanism.D = detail::read_matrix(mj.at("D"), "mechanism.D");
        Eigen::Index p = 0;
        for (const auto& part : cfg.participants)
            p += part.C.rows() * static_cast<Eigen::Index>(part.repeat);
        if (cfg.mechanism.D->cols() != p)
            throw ConfigError("mechanism.D", "expected " + std::to_string(p) +
                                                 " columns (total output dimension)");
    }
    else if (cfg.mechanism.type == MechanismType::fixed_D) {
        throw ConfigError("mechanism.D", "missing required field");
    }

    if (j.contains("simulation")) {
        const auto& sj = j.at("simulation");
        detail::check_keys(sj, "simulation", {"replications", "seed", "steps", "threads"});
        SimulationConfig sim;
        if (sj.contains("replications"))
            sim.replications = detail::read_count(sj.at("replications"), "simulation.replications");
        if (sim.replications < 1)
            throw ConfigError("simulation.replications", "must be at least 1");
        if (sj.contains("seed"))
            sim.seed = detail::read_count(sj.at("seed"), "simulation.seed");
        if (sj.contains("steps"))
            sim.steps = detail::read_count(sj.at("steps"), "simulation.steps");
        if (sj.contains("threads"))
            sim.threads = static_cast<unsigned>(detail::read_count(sj.at("threads"), "simulation.threads"));
        cfg.simulation = sim;
    }

    // Remaining model invariants, with the participant named on failure.
    try {
        (void)cfg.model(cfg.horizon.value_or(1));
    }
    catch (const ModelError& e) {
        throw ConfigError("participants", e.what());
    }
    return cfg;
}

inline ScenarioConfig load_config(const std::string& path)
{
    std::ifstream in(path);
    if (!in)
        throw ConfigError("", "cannot open config file " + path);
    nlohmann::json j;
    try {
        in >> j;
    }
    catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("", std::string("invalid JSON: ") + e.what());
    }
    return parse_config(j);
}

inline nlohmann::json to_json(const ScenarioConfig& cfg)
{
    using detail::write_matrix;
    nlohmann::json j;
    j["participants"] = nlohmann::json::array();
    for (const auto& p : cfg.participants) {
        nlohmann::json pj{{"A", write_matrix(p.A)},
                          {"C", write_matrix(p.C)},
                          {"W", write_matrix(p.W)},
                          {"V", write_matrix(p.V)},
                          {"x0_mean", detail::write_vector(p.x0_mean)},
                          {"Sigma0", write_matrix(p.Sigma0)},
                          {"rho", p.rho},
                          {"L_row", write_matrix(p.L_row)}};
        if (p.repeat != 1)
            pj["repeat"] = p.repeat;
        j["participants"].push_back(std::move(pj));
    }
    j["privacy"] = {{"epsilon", cfg.privacy.epsilon}, {"delta", cfg.privacy.delta}};
    if (cfg.horizon)
        j["horizon"] = *cfg.horizon;
    else
        j["horizon"] = "stationary";
    j["mechanism"] = {{"type", to_string(cfg.mechanism.type)}};
    if (cfg.mechanism.D)
        j["mechanism"]["D"] = write_matrix(*cfg.mechanism.D);
    if (cfg.simulation)
        j["simulation"] = {{"replications", cfg.simulation->replications},
                           {"seed", cfg.simulation->seed},
                           {"steps", cfg.simulation->steps},
                           {"threads", cfg.simulation->threads}};
    return j;
}

} // namespace dpkf
