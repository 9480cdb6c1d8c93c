#include "dpkf/cli.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <sys/wait.h>

using namespace dpkf;
namespace fs = std::filesystem;

namespace {

const std::string scenario_dir = DPKF_SCENARIO_DIR;

nlohmann::json read_json(const fs::path& p)
{
    std::ifstream f(p);
    return nlohmann::json::parse(f);
}

std::string read_file(const fs::path& p)
{
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

fs::path scratch(const std::string& name)
{
    const auto dir = fs::temp_directory_path() / ("dpkf_cli_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

fs::path write_config(const fs::path& dir, const nlohmann::json& j)
{
    const auto p = dir / "config.json";
    std::ofstream(p) << j.dump(2);
    return p;
}

struct Run {
    int code;
    std::string err;
};

/// Runs the installed executable and returns its exit status and stderr.
Run run_binary(const std::string& args, const fs::path& dir)
{
    const auto err = dir / "stderr.txt";
    const std::string cmd = std::string(DPKF_CLI_PATH) + " " + args + " > " + (dir / "stdout.txt").string() +
                            " 2> " + err.string();
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_file(err)};
}

cli::Options options(const std::string& command, const fs::path& config, const fs::path& out)
{
    cli::Options o;
    o.command = command;
    o.config = config.string();
    o.out = out.string();
    return o;
}

std::map<std::string, std::vector<std::string>> read_compare(const fs::path& p)
{
    std::map<std::string, std::vector<std::string>> rows;
    std::istringstream in(read_file(p));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ','))
            cells.push_back(cell);
        rows[cells.at(0)] = cells;
    }
    return rows;
}

} // namespace

TEST(Config, BundledScenariosLoad)
{
    for (const auto* name : {"syndromic.json", "scalar_n100.json", "scalar_n100_averaging.json", "scalar_n1.json"}) {
        const auto cfg = load_config(scenario_dir + "/" + name);
        EXPECT_GE(cfg.participant_count(), 1u) << name;
    }
    const auto syn = load_config(scenario_dir + "/syndromic.json");
    EXPECT_EQ(syn.participant_count(), 10u);
    EXPECT_TRUE(syn.stationary());
    EXPECT_EQ(syn.adjacency().rho(1), 5.0);
    EXPECT_EQ(syn.adjacency().rho(2), 10.0);
}

TEST(Config, RoundTripIsValueIdentical)
{
    for (const auto* name : {"syndromic.json", "scalar_n100_averaging.json", "scalar_n1.json"}) {
        const auto original = read_json(scenario_dir + "/" + name);
        const auto again = to_json(parse_config(original));
        EXPECT_EQ(again, original) << name;
        EXPECT_EQ(to_json(parse_config(again)), again);
    }
}

TEST(Config, ErrorsNameTheField)
{
    const auto base = read_json(scenario_dir + "/syndromic.json");
    auto expect_path = [&](nlohmann::json j, const std::string& path) {
        try {
            parse_config(j);
            ADD_FAILURE() << "accepted invalid config, expected error at " << path;
        }
        catch (const ConfigError& e) {
            EXPECT_EQ(e.path(), path) << e.what();
        }
    };
    auto j = base;
    j["participants"][0]["rho"] = -1.0;
    expect_path(j, "participants[0].rho");
    j = base;
    j["participants"][1]["colour"] = "red";
    expect_path(j, "participants[1].colour");
    j = base;
    j["simulation"]["steps"] = "many";
    expect_path(j, "simulation.steps");
    j = base;
    j["participants"][0]["C"] = {{1.0, 0.0, 0.0}};
    expect_path(j, "participants[0].C");
    j = base;
    j["participants"][0]["V"] = {{1.0, 2.0}, {2.0, 1.0}};
    expect_path(j, "participants[0].V");
    j = base;
    j["participants"][0]["W"][1] = {0.3};
    expect_path(j, "participants[0].W[1]");
    j = base;
    j.erase("privacy");
    expect_path(j, "privacy");
    j = base;
    j["privacy"]["delta"] = 1.5;
    expect_path(j, "privacy.delta");
    j = base;
    j["horizon"] = "forever";
    expect_path(j, "horizon");
    j = base;
    j["mechanism"] = {{"type", "fixed_D"}};
    expect_path(j, "mechanism.D");
    j = base;
    j["mechanism"] = {{"type", "fixed_D"}, {"D", {{1.0, 2.0}}}};
    expect_path(j, "mechanism.D");
    j = base;
    j["simulation"]["replications"] = 0;
    expect_path(j, "simulation.replications");
}

TEST(Format, TwelveSignificantDigits)
{
    EXPECT_EQ(cli::format_number(4.905734399951234), "4.90573439995");
    EXPECT_EQ(cli::format_number(6235.0), "6235");
    EXPECT_EQ(cli::format_number(1.0 / 3.0e9), "3.33333333333e-10");
    EXPECT_EQ(cli::format_number(std::nan("")), "nan");
}

TEST(DesignCommand, ScalarInputPerturbationReportsClosedForm)
{
    const auto dir = scratch("design_scalar");
    std::ostringstream out;
    const auto j = cli::cmd_design(load_config(scenario_dir + "/scalar_n100.json"),
                                   options("design", scenario_dir + "/scalar_n100.json", dir), out);
    EXPECT_NEAR(j["scalar_closed_form"]["input_perturbation"]["mse"].get<double>(), 6235.0, 0.01 * 6235.0);
    // The framework's steady-state predicted cost reproduces the closed form.
    EXPECT_NEAR(j["cost"]["predicted"].get<double>(), j["scalar_closed_form"]["input_perturbation"]["mse"].get<double>(),
                1e-8 * 6235.0);
    const auto csv = read_file(dir / "D.csv");
    EXPECT_EQ(csv.find('\r'), std::string::npos);
    EXPECT_EQ(csv.rfind("p0_y0,p1_y0,", 0), 0u);
    EXPECT_NE(csv.find("\n0.02,0,0,"), std::string::npos);
    const auto report = read_json(dir / "design.json");
    EXPECT_EQ(report["block_sensitivities"].size(), 100u);
    EXPECT_TRUE(report["active"][0].get<bool>());
}

TEST(DesignCommand, SyndromicObjective)
{
    const auto dir = scratch("design_syndromic");
    const auto r = run_binary("design --config " + scenario_dir + "/syndromic.json --out " + dir.string(), dir);
    ASSERT_EQ(r.code, 0) << r.err;
    const auto j = read_json(dir / "design.json");
    EXPECT_NEAR(j["objective"].get<double>(), 4.91, 0.03 * 4.91);
    EXPECT_EQ(j["block_sensitivities"].size(), 10u);
    for (const auto& a : j["active"])
        EXPECT_TRUE(a.get<bool>());
    EXPECT_TRUE(j.contains("solver"));
}

TEST(CompareCommand, SyndromicRows)
{
    const auto dir = scratch("compare_syndromic");
    std::ostringstream out;
    cli::cmd_compare(load_config(scenario_dir + "/syndromic.json"),
                     options("compare", scenario_dir + "/syndromic.json", dir), out);
    const auto rows = read_compare(dir / "compare.csv");
    const double sdp = std::stod(rows.at("two_stage_sdp").at(1));
    const double ip = std::stod(rows.at("input_perturbation").at(1));
    const double ipmax = std::stod(rows.at("input_perturbation_maxrho").at(1));
    EXPECT_NEAR(sdp, 4.91, 0.03 * 4.91);
    EXPECT_NEAR(ipmax, 7.06, 0.03 * 7.06);
    EXPECT_LT(sdp, ip);
    EXPECT_LT(ip, ipmax);
    EXPECT_NE(out.str().find("two_stage_sdp"), std::string::npos);
}

TEST(CompareCommand, ScalarAveragingMatchesClosedForm)
{
    const auto dir = scratch("compare_scalar");
    std::ostringstream out;
    cli::cmd_compare(load_config(scenario_dir + "/scalar_n100_averaging.json"),
                     options("compare", scenario_dir + "/scalar_n100_averaging.json", dir), out);
    const auto rows = read_compare(dir / "compare.csv");
    const double closed = std::stod(rows.at("closed_form_aggregated").at(2));
    EXPECT_NEAR(closed, 650.0, 0.01 * 650.0);
    EXPECT_NEAR(std::stod(rows.at("fixed_D").at(2)), closed, 1e-8 * closed);
    EXPECT_NEAR(std::stod(rows.at("input_perturbation").at(2)),
                std::stod(rows.at("closed_form_input_perturbation").at(2)), 1e-8 * 6235.0);
}

TEST(CompareCommand, SingleParticipantRowsCoincide)
{
    const auto dir = scratch("compare_n1");
    std::ostringstream out;
    const auto rows = cli::cmd_compare(load_config(scenario_dir + "/scalar_n1.json"),
                                       options("compare", scenario_dir + "/scalar_n1.json", dir), out);
    ASSERT_GE(rows.size(), 2u);
    EXPECT_EQ(rows[0].mechanism, "two_stage_sdp");
    EXPECT_EQ(rows[1].mechanism, "input_perturbation");
    EXPECT_NEAR(*rows[0].analytic, *rows[1].analytic, 1e-6);
}

TEST(SimulateCommand, FixedSeedReproducesCsv)
{
    const auto a = scratch("sim_a");
    const auto b = scratch("sim_b");
    const std::string args = " --config " + scenario_dir + "/scalar_n1.json --replications 300 --seed 5 --out ";
    ASSERT_EQ(run_binary("simulate" + args + a.string(), a).code, 0);
    ASSERT_EQ(run_binary("simulate" + args + b.string(), b).code, 0);
    const auto csv = read_file(a / "sim.csv");
    EXPECT_EQ(csv, read_file(b / "sim.csv"));
    EXPECT_EQ(csv.rfind("t,analytic_mse,empirical_mse,stderr\n", 0), 0u);
    const auto j = read_json(a / "sim.json");
    EXPECT_EQ(j["replications"].get<int>(), 300);
    EXPECT_EQ(j["seed"].get<int>(), 5);
}

TEST(ExitCodes, ValidationAndSolverFailures)
{
    const auto dir = scratch("exit_codes");
    auto bad = read_json(scenario_dir + "/syndromic.json");
    bad["participants"][0]["rho"] = -5;
    auto r = run_binary("design --config " + write_config(dir, bad).string() + " --out " + dir.string(), dir);
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("participants[0].rho"), std::string::npos) << r.err;

    r = run_binary("simulate --config " + scenario_dir + "/scalar_n1.json --replications 0 --out " + dir.string(), dir);
    EXPECT_EQ(r.code, 2) << r.err;

    r = run_binary("design --config " + (dir / "missing.json").string(), dir);
    EXPECT_EQ(r.code, 2);

    r = run_binary("design", dir);
    EXPECT_EQ(r.code, 2);

    // An unstable mode that the release cannot see has no steady state.
    auto unstable = read_json(scenario_dir + "/scalar_n1.json");
    unstable["participants"][0]["A"] = {{2.0}};
    unstable["participants"][0]["C"] = {{0.0}};
    r = run_binary("design --config " + write_config(dir, unstable).string() + " --out " + dir.string(), dir);
    EXPECT_EQ(r.code, 3) << r.err;
}

TEST(ScalarExampleCommand, ClosedFormsAndFixedPoints)
{
    const auto dir = scratch("scalar_example");
    std::ostringstream out;
    const auto j = cli::cmd_scalar_example(load_config(scenario_dir + "/scalar_n100.json"),
                                           options("scalar-example", scenario_dir + "/scalar_n100.json", dir), out);
    EXPECT_NEAR(j["input_perturbation"]["mse"].get<double>(), 6235.0, 0.01 * 6235.0);
    EXPECT_NEAR(j["aggregated"]["mse"].get<double>(), 650.0, 0.01 * 650.0);
    EXPECT_NEAR(j["aggregated"]["riccati_fixed_point"].get<double>(), j["aggregated"]["mse"].get<double>(), 1e-6);
    std::ostringstream sink;
    EXPECT_THROW(cli::cmd_scalar_example(load_config(scenario_dir + "/syndromic.json"),
                                         options("scalar-example", scenario_dir + "/syndromic.json", dir), sink),
                 ConfigError);
}
