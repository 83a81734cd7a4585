// icrm_lab: run, validate and list in-context risk minimization experiments.
//
// Exit codes: 0 success, 1 config error, 2 scenario failure.

#include "icrm/runner.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kScenarioFailure = 2;

}  // namespace

int main(int argc, char** argv) {
    using namespace icrm::runner;

    CLI::App app{"In-context risk minimization lab"};
    app.require_subcommand(1);

    std::string run_config;
    std::optional<std::uint64_t> seed;
    std::string out_dir;
    std::string format = "csv";
    std::optional<unsigned> threads;
    auto* run_cmd = app.add_subcommand("run", "Run an experiment and write its report");
    run_cmd->add_option("--config", run_config, "TOML experiment config")->required();
    run_cmd->add_option("--seed", seed, "Replace the config's seed list with this single seed");
    run_cmd->add_option("--out", out_dir, "Output directory (default: config 'output', then $ICRM_LAB_OUT_DIR, then .)");
    run_cmd->add_option("--format", format, "csv or json")->check(CLI::IsMember({"csv", "json"}));
    run_cmd->add_option("--threads", threads, "Worker threads; the report does not depend on this");

    std::string validate_config;
    auto* validate_cmd = app.add_subcommand("validate", "Check a config against the scenario schema");
    validate_cmd->add_option("--config", validate_config, "TOML experiment config")->required();

    auto* list_cmd = app.add_subcommand("list-scenarios", "Print the scenario catalog");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kOk : kConfigError;
    }

    if (list_cmd->parsed()) {
        std::cout << catalog_text();
        return kOk;
    }

    try {
        if (validate_cmd->parsed()) {
            validate(load_config(validate_config));
            std::cout << "ok\n";
            return kOk;
        }

        ExperimentConfig cfg = load_config(run_config);
        if (seed) cfg.seeds = {*seed};
        if (threads) cfg.threads = std::max(1u, *threads);
        const std::string dir = !out_dir.empty() ? out_dir : !cfg.output.empty() ? cfg.output : default_output_dir();
        validate(cfg);

        const RunReport report = run(cfg);
        const std::string path = emit(report, cfg.scenario, dir, parse_format(format));
        for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
        for (const auto& r : report.rows) {
            if (r.status.rfind("failed", 0) == 0) std::cerr << "seed " << r.seed << " t=" << r.context_len << ": " << r.status << "\n";
        }
        std::cout << path << "\n";
        return report.any_failed() ? kScenarioFailure : kOk;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kScenarioFailure;
    }
}
