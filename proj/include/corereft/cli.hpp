#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "corereft/config.hpp"

namespace corereft::cli {

enum ExitCode : int { exit_ok = 0, exit_runtime = 1, exit_config = 2, exit_verify = 3 };

// Command-line values that replace config-file keys.
struct Overrides {
    std::optional<std::string> out;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> rank;
    std::optional<std::vector<std::size_t>> layers;
    std::optional<double> alpha;
    std::optional<config::SweepAxis> axis;
};

void apply_overrides(config::ExperimentConfig& cfg, const Overrides& o);

// "a,b,c" -> {a, b, c}; throws ConfigError on anything else.
std::vector<std::size_t> parse_layer_list(const std::string& text);

// ---------------------------------------------------------------------------
// results.csv
// ---------------------------------------------------------------------------

struct ResultRow {
    std::string run_id;
    std::uint64_t seed = 0;
    std::string scenario;
    std::size_t rank = 0;
    std::vector<std::size_t> layers;
    double alpha = 1.0;
    std::size_t stage = 0;  // 1-based
    double last = 0.0;
    double avg = 0.0;
    std::size_t params = 0;
    double wall_time_s = 0.0;

    friend bool operator==(const ResultRow&, const ResultRow&) = default;
};

inline constexpr std::string_view results_header =
    "run_id,seed,scenario,rank,layers,alpha,stage,last,avg,params,wall_time_s";

// Shortest decimal text that reads back to the same double.
std::string format_double(double v);
// RFC 4180: quote when the field holds a comma, quote, CR or LF; double inner quotes.
std::string csv_field(std::string_view s);
std::string format_row(const ResultRow& r);
// Header plus rows; throws if any run's Avg column is not the running mean of its Last column.
std::string format_results(const std::vector<ResultRow>& rows);
std::vector<ResultRow> parse_results(std::string_view text);

// ---------------------------------------------------------------------------
// Commands. Each returns an exit code; structured errors propagate as exceptions.
// ---------------------------------------------------------------------------

struct PretrainOutput {
    std::string checkpoint_path;
    nlohmann::json summary;
};

PretrainOutput cmd_pretrain(const config::ExperimentConfig& cfg);

struct RunOutput {
    std::vector<ResultRow> rows;
    nlohmann::json summary;
};

RunOutput cmd_run(const config::ExperimentConfig& cfg);

struct SweepCell {
    double value = 0.0;
    std::string out_dir;
    bool ok = false;
    std::string message;
};

struct SweepOutput {
    std::vector<SweepCell> cells;
    std::vector<ResultRow> rows;
    bool all_ok() const;
};

// Thread count: CORE_REFT_THREADS when set (>= 1), else hardware concurrency.
std::size_t sweep_threads();

SweepOutput cmd_sweep(const config::ExperimentConfig& cfg);

// Writes report.txt into out_dir; returns exit_ok or exit_verify.
int cmd_verify(const std::string& out_dir, bool inject_gradcheck_fault);

// Full command-line entry point (argument parsing plus error -> exit code mapping).
int run_main(int argc, char** argv);

}  // namespace corereft::cli
