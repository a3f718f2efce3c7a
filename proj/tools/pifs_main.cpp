#include <cstdlib>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pifs/runner.hpp"

namespace {

std::string env_out_dir() {
    const char* env = std::getenv("PIFS_OUT");
    return env ? env : "";
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    for (char c : s) {
        if (c == ',') {
            if (!item.empty()) out.push_back(item);
            item.clear();
        } else {
            item += c;
        }
    }
    if (!item.empty()) out.push_back(item);
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Incremental few-shot segmentation benchmark on synthetic shape data"};
    app.require_subcommand(1);

    pifs::RunArgs run_args;
    run_args.out_dir = env_out_dir();
    std::string method_list = "pifs";
    int shots_flag = 0;
    std::string setting_flag, folds_flag;
    int trials_flag = 0;
    long long seed_flag = 0;
    bool seed_given = false;

    auto add_run_flags = [&](CLI::App* cmd) {
        cmd->add_option("--config", run_args.config_path, "Configuration file");
        cmd->add_option("--shots", shots_flag, "Images per new class (1, 2 or 5)");
        cmd->add_option("--setting", setting_flag, "ss or ms");
        cmd->add_flag("--strict", run_args.strict, "Relabel old-class pixels as background");
        cmd->add_option("--folds", folds_flag, "Comma-separated fold indices");
        cmd->add_option("--trials", trials_flag, "Trials per fold");
        cmd->add_option("--seed", seed_flag, "Experiment seed")->each([&](const std::string&) {
            seed_given = true;
        });
        cmd->add_option("--out", run_args.out_dir, "Output directory (default $PIFS_OUT)");
        cmd->add_option("--jobs", run_args.jobs, "Worker threads for (fold, trial) fan-out");
    };

    CLI::App* run = app.add_subcommand("run", "Run one or more methods on the benchmark");
    add_run_flags(run);
    run->add_option("--method", method_list, "Comma-separated method names");

    CLI::App* ablate =
        app.add_subcommand("ablate", "Run the fixed component-ablation method matrix");
    add_run_flags(ablate);

    pifs::GenDataArgs gen_args;
    long long gen_seed = 0;
    bool gen_seed_given = false;
    CLI::App* gen = app.add_subcommand("gen-data", "Materialize a synthetic dataset");
    gen->add_option("--config", gen_args.config_path, "Configuration file");
    gen->add_option("--out", gen_args.out_dir, "Output directory")->required();
    gen->add_option("--images", gen_args.images, "Number of images");
    gen->add_option("--classes", gen_args.classes, "Comma-separated class labels");
    gen->add_option("--seed", gen_seed, "Generator seed")->each([&](const std::string&) {
        gen_seed_given = true;
    });

    pifs::EvalArgs eval_args;
    CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint against a dataset");
    eval->add_option("--checkpoint", eval_args.checkpoint, "Model checkpoint")->required();
    eval->add_option("--data", eval_args.manifest, "Dataset manifest")->required();
    eval->add_option("--out", eval_args.out_json, "Write the report as JSON here too");

    CLI::App* defaults =
        app.add_subcommand("print-defaults", "Print the default configuration");

    CLI11_PARSE(app, argc, argv);

    if (run->parsed() || ablate->parsed()) {
        if (shots_flag != 0) run_args.shots = shots_flag;
        if (!setting_flag.empty()) run_args.setting = setting_flag;
        if (!folds_flag.empty()) run_args.folds = folds_flag;
        if (trials_flag != 0) run_args.trials = trials_flag;
        if (seed_given) run_args.seed = seed_flag;
    }
    if (run->parsed()) {
        run_args.methods = split_csv(method_list);
        return pifs::cmd_run(run_args);
    }
    if (ablate->parsed()) return pifs::cmd_ablate(run_args);
    if (gen->parsed()) {
        if (gen_seed_given) gen_args.seed = gen_seed;
        return pifs::cmd_gen_data(gen_args);
    }
    if (eval->parsed()) return pifs::cmd_eval(eval_args);
    if (defaults->parsed()) return pifs::cmd_print_defaults();
    return 1;
}
