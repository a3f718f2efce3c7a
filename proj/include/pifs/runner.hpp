#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pifs/config.hpp"
#include "pifs/methods.hpp"

namespace pifs {

inline constexpr const char* kCodeVersion = "0.1.0";

struct ResultRow {
    std::string method;
    int fold = 0;
    int trial = 0;
    int step = 0;
    int shots = 1;
    std::string setting = "ss";
    bool strict = false;
    double miou_base = 0.0;
    double miou_new = 0.0;
    double hm = 0.0;
    std::uint64_t seed = 0;
    std::vector<std::optional<double>> iou_per_class;
    std::vector<int> base_classes;
    std::vector<int> new_classes;
};

struct AggregateRow {
    std::string method;
    int step = 0;  // 0 = average across steps
    double miou_base = 0.0;
    double miou_new = 0.0;
    double hm = 0.0;
};

struct RunOutputs {
    std::vector<ResultRow> rows;
    std::vector<AggregateRow> aggregates;
    std::vector<std::string> checkpoint_files;  // relative to the output dir
};

/// Deterministic train/validation pools from the config's synthetic spec.
Benchmark build_benchmark(const RunConfig& cfg);

/// Runs every (method, fold, trial) with a shared per-fold base-model cache,
/// fanned out over `jobs` worker threads. Output order is independent of
/// scheduling. When checkpoint_dir is nonempty, final models are saved there.
RunOutputs execute_runs(const RunConfig& cfg, const std::vector<std::string>& methods, int jobs,
                        const std::string& checkpoint_dir = "");

/// Fixed schema: header
/// method,fold,trial,step,shots,setting,strict,miou_base,miou_new,hm,seed
/// with six-decimal reals and LF line endings.
std::string results_csv(const std::vector<ResultRow>& rows);

std::string results_json(const RunConfig& cfg, const RunOutputs& outputs);

std::string manifest_json(const RunConfig& cfg, const std::vector<std::string>& outputs,
                          double wall_clock_seconds);

struct RunArgs {
    std::string config_path;
    std::vector<std::string> methods = {"pifs"};
    std::optional<int> shots;
    std::optional<std::string> setting;
    bool strict = false;
    std::optional<std::string> folds;
    std::optional<int> trials;
    std::optional<long long> seed;
    std::string out_dir;
    int jobs = 1;
};

// Exit codes: 0 success, 1 configuration error, 2 runtime failure.
int cmd_run(const RunArgs& args);
int cmd_ablate(RunArgs args);

struct GenDataArgs {
    std::string config_path;
    std::string out_dir;
    int images = 20;
    std::optional<long long> seed;
    std::string classes;  // comma list; empty = all shape classes
};
int cmd_gen_data(const GenDataArgs& args);

struct EvalArgs {
    std::string checkpoint;
    std::string manifest;
    std::string out_json;  // optional
};
int cmd_eval(const EvalArgs& args);

int cmd_print_defaults();

}  // namespace pifs
