// defham: scenario-driven front end.
//
//   defham run <scenario.json> [--out-dir DIR] [--threads N]
//   defham validate <scenario.json>
//
// Exit codes: 0 all checks pass, 1 a check failed, 2 invalid input.

#include "defham/cli/runner.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <thread>

int main(int argc, char** argv) {
    CLI::App app{"Deformed Hamiltonian dynamics and Morse complexes"};
    app.require_subcommand(1);

    std::string scenario;
    std::string out_dir = ".";
    int threads = 1;

    auto* run = app.add_subcommand("run", "Run a scenario and write its artifacts");
    run->add_option("scenario", scenario, "Scenario JSON file")->required();
    run->add_option("--out-dir", out_dir, "Directory for artifacts")->capture_default_str();
    run->add_option("--threads", threads, "Worker threads for sweeps (0 = hardware concurrency)")
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();

    auto* validate = app.add_subcommand("validate", "Check a scenario file without running it");
    validate->add_option("scenario", scenario, "Scenario JSON file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    if (threads == 0) threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    if (*run) return defham::cli::run_command(scenario, out_dir, threads, std::cout, std::cerr);
    return defham::cli::validate_command(scenario, std::cout, std::cerr);
}
