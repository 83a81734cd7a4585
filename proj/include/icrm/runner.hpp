#pragma once

// Experiment orchestration: TOML configs, per-cell seeding, parallel execution
// with an order-independent merge, and CSV / JSON reports.
//
// A cell is one (seed, context length) pair, or one seed for scenarios that
// train a model once and evaluate it across the grid. Each cell draws its RNG
// streams from derive_seed(seed, context_len) and derive_seed(seed, tag), never
// from shared state, so the report does not depend on the thread count.

#include "icrm/common.hpp"

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace icrm::runner {

/// Schema violations, unreadable configs and unknown scenarios.
class ConfigError : public InvalidArgument {
public:
    using InvalidArgument::InvalidArgument;
};

struct ParamDoc {
    std::string name;
    /// number | integer | string | number_list | string_list
    std::string type;
    /// JSON rendering of the default; empty when the parameter is required.
    std::string default_value;
    std::string doc;
};

struct ScenarioInfo {
    std::string name;
    std::string description;
    std::vector<ParamDoc> params;
    /// Shipped example config, relative to the fixtures directory.
    std::string fixture;
};

/// Stable order: discrete-zoom, gaussian-ood, linear-invariance, rank-task, attention-train.
const std::vector<ScenarioInfo>& list_scenarios();

/// Human-readable catalog.
std::string catalog_text();

struct ExperimentConfig {
    std::string scenario;
    std::vector<int> context_grid{0, 25, 50, 75, 100};
    std::vector<std::uint64_t> seeds;
    /// Output directory; empty means "use the caller's default".
    std::string output;
    /// Scenario parameters with defaults filled in.
    nlohmann::json params = nlohmann::json::object();
    /// Directory that relative fixture paths resolve against.
    std::string base_dir = ".";
    unsigned threads = 1;

    /// Canonical JSON of everything that affects results (not output or threads).
    std::string canonical() const;
    /// FNV-1a of canonical().
    std::string hash() const;
};

/// Parses TOML text. Top-level keys: scenario, seeds, context_grid, output,
/// threads and a [params] table. Throws ConfigError.
ExperimentConfig parse_config(const std::string& toml_text, const std::string& base_dir = ".");
ExperimentConfig load_config(const std::string& path);

/// Full schema check, including that referenced fixture files load.
void validate(const ExperimentConfig& config);

struct ReportRow {
    std::string scenario;
    std::string predictor;
    int context_len = 0;
    std::uint64_t seed = 0;
    /// Test environment label.
    std::string env;
    std::string metric;
    double value = 0.0;
    /// "ok", "skipped: ..." or "failed: ...".
    std::string status = "ok";

    bool ok() const { return status == "ok"; }
    bool operator==(const ReportRow&) const = default;
};

struct Aggregate {
    std::string scenario;
    std::string predictor;
    int context_len = 0;
    std::string metric;
    /// Over ok rows across seeds and test environments.
    double mean = 0.0;
    /// Minimum for accuracy-type metrics, maximum otherwise.
    double worst = 0.0;
    std::size_t count = 0;
};

struct ReportProvenance {
    std::string config_hash;
    std::string version;
    std::uint64_t master_seed = 0;
};

struct RunReport {
    std::vector<ReportRow> rows;
    std::vector<Aggregate> aggregates;
    ReportProvenance provenance;
    std::vector<std::string> warnings;

    bool any_failed() const;
};

/// True for metrics where larger is better.
bool higher_is_better(const std::string& metric);

std::vector<Aggregate> aggregate(const std::vector<ReportRow>& rows);

/// Validates, then executes every cell. Scenario-level failures become
/// "failed" rows and the run continues.
RunReport run(const ExperimentConfig& config);

enum class Format { csv, json };
Format parse_format(const std::string& name);

/// Columns: scenario,predictor,context_len,seed,env,metric,value,status,config_hash
std::string to_csv(const RunReport& report);
std::string to_json(const RunReport& report);
RunReport report_from_json(const std::string& text);

/// Writes <dir>/<scenario>.<csv|json> through a temporary file and rename.
/// Returns the final path. Throws Error when the directory is unwritable.
std::string emit(const RunReport& report, const std::string& scenario, const std::string& dir, Format format);

/// Directory from ICRM_LAB_OUT_DIR, falling back to ".".
std::string default_output_dir();

}  // namespace icrm::runner
