#include "defham/cli/runner.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

using namespace defham;
using cli::json;
namespace fs = std::filesystem;

namespace {

std::string parse_error(const json& doc) {
    try {
        cli::parse_scenario(doc);
    } catch (const cli::ScenarioError& e) {
        return e.what();
    }
    return "<accepted>";
}

json oscillator(json q, json checks = json::array()) {
    return {{"kind", "simulate"},
            {"hamiltonian", "(x1^2 + y1^2)/2"},
            {"q", std::move(q)},
            {"z0", {1, 2}},
            {"integrator", {{"method", "rk4"}, {"step", 1e-3}}},
            {"t_final", 1},
            {"sample_stride", 100},
            {"checks", std::move(checks)}};
}

json fibre_sweep(json q_list) {
    return {{"kind", "sweep"},
            {"n", 2},
            {"q_list", std::move(q_list)},
            {"observables", {"fibre_volume_ratio"}},
            {"checks", {{{"type", "fibre_volume"}, {"max", 1e-15}}}}};
}

const std::string& artifact(const cli::RunResult& r, const std::string& name) {
    for (const auto& [n, bytes] : r.artifacts)
        if (n == name) return bytes;
    throw std::runtime_error("no artifact " + name);
}

fs::path scenarios_dir() {
    const char* env = std::getenv("DEFHAM_SCENARIOS");
    return env ? fs::path(env) : fs::path("scenarios");
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("defham-test-" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                            "-" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST(Parse, ErrorsCarryJsonPointers) {
    EXPECT_EQ(parse_error(oscillator(0)), "/q: q must be nonzero");
    EXPECT_EQ(parse_error(oscillator("0/3")), "/q: q must be nonzero");
    EXPECT_EQ(parse_error(fibre_sweep(json::array())), "/q_list: q list must not be empty");

    json doc = oscillator(1);
    doc["bogus"] = true;
    EXPECT_EQ(parse_error(doc).rfind("/bogus: ", 0), 0u) << parse_error(doc);

    doc = oscillator(1);
    doc["z0"] = {1, 2, 3};
    EXPECT_EQ(parse_error(doc).rfind("/z0", 0), 0u) << parse_error(doc);

    doc = oscillator(1);
    doc["n"] = "two";
    EXPECT_EQ(parse_error(doc).rfind("/n: ", 0), 0u) << parse_error(doc);

    doc = oscillator(1);
    doc["integrator"]["step"] = -1;
    EXPECT_EQ(parse_error(doc).rfind("/integrator/step: ", 0), 0u) << parse_error(doc);

    doc = oscillator(1);
    doc["hamiltonian"] = "x1 +";
    EXPECT_EQ(parse_error(doc).rfind("/hamiltonian: ", 0), 0u) << parse_error(doc);

    doc = oscillator(1);
    doc["outputs"] = {{"report", "../escape.json"}};
    EXPECT_EQ(parse_error(doc).rfind("/outputs/report: ", 0), 0u) << parse_error(doc);

    EXPECT_EQ(parse_error(json{{"kind", "nope"}}).rfind("/kind: ", 0), 0u);
    EXPECT_EQ(parse_error(json::array()).rfind("/: ", 0), 0u);
}

TEST(Parse, MissingKeysPointAtTheChild) {
    json doc = oscillator(1);
    doc.erase("t_final");
    EXPECT_EQ(parse_error(doc).rfind("/t_final: ", 0), 0u) << parse_error(doc);
    json chk = oscillator(1, {{{"max", 1e-9}}});
    EXPECT_EQ(parse_error(chk).rfind("/checks/0/type: ", 0), 0u) << parse_error(chk);
    chk = oscillator(1, {{{"type", "energy_drift"}, {"max", -1}}});
    EXPECT_EQ(parse_error(chk).rfind("/checks/0/max: ", 0), 0u) << parse_error(chk);
    chk = oscillator(1, {{{"type", "symplectic"}, {"max", 1e-6}}});  // not allowed for simulate
    EXPECT_EQ(parse_error(chk).rfind("/checks/0/type: ", 0), 0u) << parse_error(chk);
}

TEST(Parse, RationalQAcceptedAsString) {
    const auto sc = cli::parse_scenario(oscillator("1/3"));
    const auto& body = std::get<cli::SimulateScenario>(sc.body);
    EXPECT_EQ(body.q.exact, Rational(1, 3));
    EXPECT_DOUBLE_EQ(body.q.value, 1.0 / 3.0);
}

TEST(Run, EnergyDriftPassesAtQOneAndFailsBelow) {
    const json check = {{{"type", "energy_drift"}, {"max", 1e-9}}};
    const auto ok = cli::run(cli::parse_scenario(oscillator(1, check)));
    EXPECT_TRUE(ok.pass);
    EXPECT_EQ(ok.exit_code(), 0);
    ASSERT_EQ(ok.checks.size(), 1u);
    EXPECT_EQ(ok.checks[0].name, "energy_drift");

    const auto bad = cli::run(cli::parse_scenario(oscillator("1/2", check)));
    EXPECT_FALSE(bad.pass);
    EXPECT_EQ(bad.exit_code(), 1);
    EXPECT_EQ(bad.report.at("pass"), false);
}

TEST(Run, ReportShape) {
    const auto r = cli::run(cli::parse_scenario(oscillator(1)));
    ASSERT_EQ(r.artifacts.size(), 2u);
    EXPECT_EQ(r.artifacts[0].first, "trajectory.csv");
    EXPECT_EQ(r.artifacts[1].first, "report.json");
    const json rep = json::parse(artifact(r, "report.json"));
    for (const char* key : {"name", "kind", "scenario", "checks", "warnings", "artifacts", "pass"})
        EXPECT_TRUE(rep.contains(key)) << key;
    EXPECT_FALSE(rep.contains("error"));
    EXPECT_EQ(rep.at("artifacts"), json::array({"trajectory.csv"}));
    EXPECT_EQ(artifact(r, "trajectory.csv").substr(0, 10), "t,x1,y1,H\n");
}

TEST(Run, ComputationErrorsFailWithMessage) {
    json doc = oscillator("1/2");
    doc["hamiltonian"] = "x1^2*y1^2";
    doc["z0"] = {1, 1};
    const auto r = cli::run(cli::parse_scenario(doc));
    EXPECT_FALSE(r.pass);
    EXPECT_NE(r.error.find("blow-up"), std::string::npos) << r.error;
    ASSERT_EQ(r.artifacts.size(), 1u);  // only the report survives
    EXPECT_EQ(r.report.at("error"), r.error);

    doc["expect_error"] = "blow-up";
    const auto expected = cli::run(cli::parse_scenario(doc));
    EXPECT_TRUE(expected.pass);
    EXPECT_EQ(expected.checks.back().name, "expected_error");

    json quiet = oscillator(1);
    quiet["expect_error"] = "blow-up";
    const auto missing = cli::run(cli::parse_scenario(quiet));
    EXPECT_FALSE(missing.pass);
}

TEST(Sweep, RowsSortedAndIndependentOfThreads) {
    const auto sc = cli::parse_scenario(fibre_sweep({"1/4", 1, "1/16", "1/2"}));
    const auto one = cli::run(sc, 1), two = cli::run(sc, 2), four = cli::run(sc, 4);
    EXPECT_TRUE(one.pass);
    const std::string& csv = artifact(one, "sweep.csv");
    EXPECT_EQ(csv,
              "q,fibre_volume_ratio,error\n"
              "0.0625,0.0625,\n"
              "0.25,0.25,\n"
              "0.5,0.5,\n"
              "1,1,\n");
    EXPECT_EQ(one.artifacts, two.artifacts);
    EXPECT_EQ(one.artifacts, four.artifacts);
}

TEST(Sweep, RowErrorsAreRecorded) {
    const auto r = cli::run(cli::parse_scenario(fibre_sweep({-1, 1})));
    EXPECT_FALSE(r.pass);  // the fibre-volume check needs every row
    const std::string& csv = artifact(r, "sweep.csv");
    EXPECT_NE(csv.find("\n-1,,fibre_volume_ratio: "), std::string::npos) << csv;
    EXPECT_NE(csv.find("\n1,1,\n"), std::string::npos) << csv;
    ASSERT_EQ(r.warnings.size(), 1u);
    EXPECT_EQ(r.warnings[0].rfind("q=-1: ", 0), 0u);
}

TEST(Files, AtomicWriteLeavesNoTemporaries) {
    TempDir dir;
    cli::write_atomic(dir.path, "a.txt", "first");
    cli::write_atomic(dir.path, "a.txt", "second");
    std::ifstream in(dir.path / "a.txt");
    std::string content((std::istreambuf_iterator<char>(in)), {});
    EXPECT_EQ(content, "second");
    EXPECT_EQ(std::distance(fs::directory_iterator(dir.path), fs::directory_iterator()), 1);
}

TEST(Files, RunCommandExitCodes) {
    TempDir dir;
    std::ostringstream out, err;
    const auto write = [&](const std::string& name, const json& doc) {
        std::ofstream(dir.path / name) << doc.dump();
        return dir.path / name;
    };
    const auto good = write("good.json", oscillator(1, {{{"type", "energy_drift"}, {"max", 1e-9}}}));
    EXPECT_EQ(cli::run_command(good, dir.path / "out", 1, out, err), 0);
    EXPECT_TRUE(fs::exists(dir.path / "out" / "report.json"));
    EXPECT_TRUE(fs::exists(dir.path / "out" / "trajectory.csv"));

    const auto failing = write("fail.json", oscillator("1/2", {{{"type", "energy_drift"}, {"max", 1e-9}}}));
    EXPECT_EQ(cli::run_command(failing, dir.path / "out2", 1, out, err), 1);

    const auto invalid = write("bad.json", oscillator(0));
    EXPECT_EQ(cli::run_command(invalid, dir.path / "out3", 1, out, err), 2);
    EXPECT_FALSE(fs::exists(dir.path / "out3"));
    EXPECT_NE(err.str().find("/q: q must be nonzero"), std::string::npos);

    std::ofstream(dir.path / "broken.json") << "{ not json";
    EXPECT_EQ(cli::validate_command(dir.path / "broken.json", out, err), 2);
    EXPECT_EQ(cli::validate_command(dir.path / "missing.json", out, err), 2);
    EXPECT_EQ(cli::validate_command(good, out, err), 0);
}

TEST(Golden, EveryScenarioValidates) {
    const fs::path dir = scenarios_dir();
    ASSERT_TRUE(fs::is_directory(dir)) << dir;
    int valid = 0, invalid = 0;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.path().extension() == ".json") {
            EXPECT_NO_THROW(cli::load_scenario(entry.path())) << entry.path();
            ++valid;
        }
    for (const auto& entry : fs::directory_iterator(dir / "invalid")) {
        EXPECT_THROW(cli::load_scenario(entry.path()), cli::ScenarioError) << entry.path();
        ++invalid;
    }
    EXPECT_GE(valid, 10);
    EXPECT_GE(invalid, 5);
}
