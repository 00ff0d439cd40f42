#pragma once

// Commands behind the toponets executable. Each command is usable directly
// from code; run_cli parses arguments and maps errors to exit codes.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "toponets/experiment.hpp"

namespace toponets {

/// Exit codes: 0 success, 1 runtime failure, 2 usage or input error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Refuses an existing non-empty directory unless force is set; creates it otherwise.
void prepare_output_dir(const std::filesystem::path& dir, bool force);

struct GenOptions {
    std::filesystem::path out;
    GeneratorConfig config;
    bool force = false;
};

struct GenOutput {
    Manifest manifest;
    std::uint64_t manifest_hash = 0;  // FNV-1a of manifest.json
};

GenOutput cmd_gen(const GenOptions& opt);

struct TrainOptions {
    std::filesystem::path corpus;
    std::filesystem::path out;
    ExperimentConfig config;
    bool force = false;
};

struct TrainOutput {
    std::uint64_t model_hash = 0;  // directory_hash of out/models
    TrainLog log;
};

/// Writes out/config.json, out/models/, one loss CSV per trained network
/// and out/model_hash.txt.
TrainOutput cmd_train(const TrainOptions& opt);

struct EvalOptions {
    std::filesystem::path corpus;
    std::filesystem::path models;  // output directory of cmd_train
    std::filesystem::path out;
    std::vector<Task> tasks{Task::Classify, Task::Placeholders, Task::Novelty};
    Engine engine = Engine::Toponet;
    unsigned jobs = 1;
    std::optional<std::uint32_t> swaps;
    std::optional<std::uint32_t> decompositions;
    bool force = false;
};

struct EvalOutput {
    nlohmann::json report;
    std::uint64_t report_hash = 0;  // FNV-1a of report.json
};

/// Writes report.json, report.csv, per_map.csv, and for novelty roc.csv and
/// novelty_scores.csv. Wall-clock timings go to timings.json so the reports
/// stay byte-identical across reruns.
EvalOutput cmd_eval(const EvalOptions& opt);

struct BenchOptions {
    std::filesystem::path models;
    std::vector<std::size_t> sizes{105, 155};
    std::uint32_t decompositions = 40;
    std::uint32_t repetitions = 10;
    std::uint64_t seed = 1;
    double budget_seconds = 10.0;
    std::filesystem::path out;  // optional JSON report
};

struct BenchSize {
    std::size_t size = 0;
    std::vector<double> seconds;
    double median = 0.0;
};

/// Times instantiate + one full evaluate per map size.
std::vector<BenchSize> cmd_bench(const BenchOptions& opt, nlohmann::json* report = nullptr);

struct SwapOptions {
    std::filesystem::path in;
    std::filesystem::path out;
    std::string class_a, class_b;  // class names or indices
    bool force = false;
};

void cmd_swap(const SwapOptions& opt);

int run_cli(int argc, char** argv);

}  // namespace toponets
