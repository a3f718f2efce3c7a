#include "pifs/runner.hpp"

#include <atomic>
#include <chrono>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace pifs {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt6(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

std::string hex64(std::uint64_t v) {
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    if (!file) throw std::runtime_error("cannot open " + path + " for writing");
    file.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!file) throw std::runtime_error("write failed for " + path);
}

MetricsReport row_to_report(const ResultRow& row) {
    MetricsReport r;
    r.miou_base = row.miou_base;
    r.miou_new = row.miou_new;
    r.hm = row.hm;
    r.fold_index = row.fold;
    r.trial_index = row.trial;
    r.step_index = row.step;
    r.base_classes = row.base_classes;
    r.new_classes = row.new_classes;
    return r;
}

std::vector<AggregateRow> compute_aggregates(const RunConfig& cfg,
                                             const std::vector<std::string>& methods,
                                             const std::vector<ResultRow>& rows) {
    std::vector<AggregateRow> out;
    for (const std::string& method : methods) {
        std::map<int, std::vector<MetricsReport>> by_step;
        for (const ResultRow& row : rows)
            if (row.method == method) by_step[row.step].push_back(row_to_report(row));
        if (by_step.empty()) continue;
        std::vector<MetricsReport> step_means;
        for (auto& [step, reports] : by_step) {
            MetricsReport mean = aggregate(reports, cfg.protocol.hm_policy);
            AggregateRow agg;
            agg.method = method;
            agg.step = step;
            agg.miou_base = mean.miou_base;
            agg.miou_new = mean.miou_new;
            agg.hm = mean.hm;
            out.push_back(agg);
            mean.base_classes = reports.front().base_classes;
            step_means.push_back(std::move(mean));
        }
        // across-steps average (meaningful for multi-step runs)
        MetricsReport overall = aggregate(step_means, cfg.protocol.hm_policy);
        AggregateRow agg;
        agg.method = method;
        agg.step = 0;
        agg.miou_base = overall.miou_base;
        agg.miou_new = overall.miou_new;
        agg.hm = overall.hm;
        out.push_back(agg);
    }
    return out;
}

}  // namespace

Benchmark build_benchmark(const RunConfig& cfg) {
    std::set<int> all;
    for (int c = 1; c < cfg.data.n_classes; ++c) all.insert(c);
    Benchmark bench;
    bench.train_pool = generate_dataset(cfg.data, cfg.n_base_images, all, 0);
    bench.val_pool = generate_dataset(cfg.data, cfg.n_val_images, all, 1 << 20);
    bench.n_classes = cfg.data.n_classes;
    return bench;
}

RunOutputs execute_runs(const RunConfig& cfg, const std::vector<std::string>& methods, int jobs,
                        const std::string& checkpoint_dir) {
    validate_config(cfg);
    for (const std::string& name : methods) (void)method_from_name(name, cfg.protocol.lambda);

    const Benchmark bench = build_benchmark(cfg);
    const ClassSplit split = make_folds(bench.n_classes, cfg.protocol.fold_size);
    BaseModelCache cache([&](int fold) {
        Rng rng(mix_seed(cfg.protocol.seed, 0xBA5Eu, static_cast<std::uint64_t>(fold)));
        return run_base_step(cfg.protocol, split, fold, bench.train_pool, rng);
    });

    struct Task {
        std::size_t method_index;
        int fold;
        int trial;
    };
    std::vector<Task> tasks;
    for (std::size_t m = 0; m < methods.size(); ++m)
        for (int fold : cfg.protocol.folds)
            for (int trial = 0; trial < cfg.protocol.trials; ++trial)
                tasks.push_back({m, fold, trial});

    struct TaskOutput {
        std::vector<MetricsReport> reports;
        std::optional<SegModel> final_model;
    };
    std::vector<TaskOutput> outputs(tasks.size());
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::string first_error;
    std::mutex error_mutex;

    auto worker = [&] {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= tasks.size() || failed.load()) break;
            const Task& task = tasks[i];
            try {
                MethodSpec method = method_from_name(methods[task.method_index],
                                                     cfg.protocol.lambda);
                TrialResult result = run_trial(cfg.protocol, method, bench, &cache, task.fold,
                                               task.trial, nullptr);
                outputs[i].reports = std::move(result.reports);
                outputs[i].final_model = std::move(result.final_model);
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!failed.exchange(true))
                    first_error = std::string(e.what()) + " (method " +
                                  methods[task.method_index] + ", fold " +
                                  std::to_string(task.fold) + ", trial " +
                                  std::to_string(task.trial) + ")";
            }
        }
    };

    const int n_threads = std::max(1, jobs);
    std::vector<std::thread> pool;
    for (int t = 1; t < n_threads; ++t) pool.emplace_back(worker);
    worker();
    for (std::thread& t : pool) t.join();
    if (failed.load()) throw std::runtime_error(first_error);

    RunOutputs run_outputs;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        const Task& task = tasks[i];
        for (const MetricsReport& report : outputs[i].reports) {
            ResultRow row;
            row.method = methods[task.method_index];
            row.fold = report.fold_index;
            row.trial = report.trial_index;
            row.step = report.step_index;
            row.shots = cfg.protocol.shots;
            row.setting = cfg.protocol.setting == Setting::SS ? "ss" : "ms";
            row.strict = cfg.protocol.strict;
            row.miou_base = report.miou_base;
            row.miou_new = report.miou_new;
            row.hm = report.hm;
            row.seed = cfg.protocol.seed;
            row.iou_per_class = report.iou_per_class;
            row.base_classes = report.base_classes;
            row.new_classes = report.new_classes;
            run_outputs.rows.push_back(std::move(row));
        }
        if (!checkpoint_dir.empty()) {
            const std::string name = methods[task.method_index] + "_fold" +
                                     std::to_string(task.fold) + "_trial" +
                                     std::to_string(task.trial) + ".ckpt";
            fs::create_directories(checkpoint_dir);
            save_checkpoint((fs::path(checkpoint_dir) / name).string(),
                            *outputs[i].final_model);
            run_outputs.checkpoint_files.push_back(name);
        }
    }
    run_outputs.aggregates = compute_aggregates(cfg, methods, run_outputs.rows);
    return run_outputs;
}

std::string results_csv(const std::vector<ResultRow>& rows) {
    std::string out = "method,fold,trial,step,shots,setting,strict,miou_base,miou_new,hm,seed\n";
    for (const ResultRow& r : rows) {
        out += r.method + "," + std::to_string(r.fold) + "," + std::to_string(r.trial) + "," +
               std::to_string(r.step) + "," + std::to_string(r.shots) + "," + r.setting + "," +
               (r.strict ? "true" : "false") + "," + fmt6(r.miou_base) + "," +
               fmt6(r.miou_new) + "," + fmt6(r.hm) + "," + std::to_string(r.seed) + "\n";
    }
    return out;
}

std::string results_json(const RunConfig& cfg, const RunOutputs& outputs) {
    json doc;
    doc["config_hash"] = hex64(config_hash(cfg));
    doc["seed"] = cfg.protocol.seed;
    doc["rows"] = json::array();
    for (const ResultRow& r : outputs.rows) {
        json row;
        row["method"] = r.method;
        row["fold"] = r.fold;
        row["trial"] = r.trial;
        row["step"] = r.step;
        row["shots"] = r.shots;
        row["setting"] = r.setting;
        row["strict"] = r.strict;
        row["miou_base"] = r.miou_base;
        row["miou_new"] = r.miou_new;
        row["hm"] = r.hm;
        row["base_classes"] = r.base_classes;
        row["new_classes"] = r.new_classes;
        json iou = json::object();
        for (std::size_t c = 0; c < r.iou_per_class.size(); ++c)
            if (r.iou_per_class[c]) iou[std::to_string(c)] = *r.iou_per_class[c];
        row["iou_per_class"] = std::move(iou);
        doc["rows"].push_back(std::move(row));
    }
    doc["aggregates"] = json::array();
    for (const AggregateRow& a : outputs.aggregates) {
        json row;
        row["method"] = a.method;
        row["step"] = a.step;
        row["miou_base"] = a.miou_base;
        row["miou_new"] = a.miou_new;
        row["hm"] = a.hm;
        doc["aggregates"].push_back(std::move(row));
    }
    return doc.dump(2) + "\n";
}

std::string manifest_json(const RunConfig& cfg, const std::vector<std::string>& outputs,
                          double wall_clock_seconds) {
    json doc;
    doc["config_hash"] = hex64(config_hash(cfg));
    doc["code_version"] = kCodeVersion;
    doc["seed"] = cfg.protocol.seed;
    doc["outputs"] = outputs;
    doc["wall_clock_seconds"] = wall_clock_seconds;
    doc["config"] = config_text(cfg);
    return doc.dump(2) + "\n";
}

namespace {

std::vector<int> parse_csv_ints(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(std::stoi(item));
    return out;
}

RunConfig config_from_args(const RunArgs& args) {
    RunConfig cfg =
        args.config_path.empty() ? default_run_config() : parse_config_file(args.config_path);
    if (args.shots) cfg.protocol.shots = *args.shots;
    if (args.setting) {
        if (*args.setting == "ss")
            cfg.protocol.setting = Setting::SS;
        else if (*args.setting == "ms")
            cfg.protocol.setting = Setting::MS;
        else
            throw std::invalid_argument("--setting must be ss or ms");
    }
    if (args.strict) cfg.protocol.strict = true;
    if (args.folds) cfg.protocol.folds = parse_csv_ints(*args.folds);
    if (args.trials) cfg.protocol.trials = *args.trials;
    if (args.seed) {
        cfg.protocol.seed = static_cast<std::uint64_t>(*args.seed);
        cfg.data.seed = cfg.protocol.seed;
    }
    validate_config(cfg);
    return cfg;
}

void print_summary_table(const RunOutputs& outputs, bool multi_step) {
    std::printf("%-14s %5s %8s %8s %8s\n", "method", "step", "mIoU-B", "mIoU-N", "HM");
    for (const AggregateRow& a : outputs.aggregates) {
        if (a.step == 0 && !multi_step) continue;  // redundant for single-step runs
        char step_label[16];
        if (a.step == 0)
            std::snprintf(step_label, sizeof(step_label), "avg");
        else
            std::snprintf(step_label, sizeof(step_label), "%d", a.step);
        std::printf("%-14s %5s %8.1f %8.1f %8.1f\n", a.method.c_str(), step_label,
                    100.0 * a.miou_base, 100.0 * a.miou_new, 100.0 * a.hm);
    }
}

int run_methods(const RunArgs& args, const std::vector<std::string>& methods) {
    RunConfig cfg;
    try {
        cfg = config_from_args(args);
        for (const std::string& m : methods) (void)method_from_name(m);
        if (args.out_dir.empty())
            throw std::invalid_argument("no output directory: pass --out or set PIFS_OUT");
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    }

    try {
        const auto start = std::chrono::steady_clock::now();
        fs::create_directories(args.out_dir);
        const std::string ckpt_dir = (fs::path(args.out_dir) / "checkpoints").string();
        RunOutputs outputs = execute_runs(cfg, methods, args.jobs, ckpt_dir);

        write_text_file((fs::path(args.out_dir) / "results.csv").string(),
                        results_csv(outputs.rows));
        write_text_file((fs::path(args.out_dir) / "results.json").string(),
                        results_json(cfg, outputs));
        std::vector<std::string> files = {"results.csv", "results.json"};
        for (const std::string& name : outputs.checkpoint_files)
            files.push_back("checkpoints/" + name);
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        write_text_file((fs::path(args.out_dir) / "manifest.json").string(),
                        manifest_json(cfg, files, wall));

        print_summary_table(outputs, cfg.protocol.setting == Setting::MS);
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "run failed: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace

int cmd_run(const RunArgs& args) { return run_methods(args, args.methods); }

int cmd_ablate(RunArgs args) {
    // the fixed ablation matrix, in presentation order
    return run_methods(args, ablation_method_order());
}

int cmd_gen_data(const GenDataArgs& args) {
    RunConfig cfg;
    std::set<int> classes;
    try {
        cfg = args.config_path.empty() ? default_run_config()
                                       : parse_config_file(args.config_path);
        if (args.seed) cfg.data.seed = static_cast<std::uint64_t>(*args.seed);
        if (args.classes.empty()) {
            for (int c = 1; c < cfg.data.n_classes; ++c) classes.insert(c);
        } else {
            for (int c : parse_csv_ints(args.classes)) classes.insert(c);
        }
        if (args.out_dir.empty()) throw std::invalid_argument("--out is required");
        if (args.images < 1) throw std::invalid_argument("--images must be positive");
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    }

    try {
        fs::create_directories(args.out_dir);
        const SegDataset dset = generate_dataset(cfg.data, args.images, classes);
        std::vector<std::tuple<int, std::string, std::string>> rows;
        for (const LabeledImage& img : dset.images) {
            const std::string img_name = "img_" + std::to_string(img.id) + ".ppm";
            const std::string mask_name = "mask_" + std::to_string(img.id) + ".pgm";
            write_ppm((fs::path(args.out_dir) / img_name).string(), dset.height, dset.width,
                      img.pixels);
            write_pgm((fs::path(args.out_dir) / mask_name).string(), dset.height, dset.width,
                      img.mask);
            rows.emplace_back(img.id, img_name, mask_name);
        }
        write_manifest((fs::path(args.out_dir) / "manifest.tsv").string(), rows);
        std::printf("wrote %d images to %s\n", args.images, args.out_dir.c_str());
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "generation failed: " << e.what() << "\n";
        return 2;
    }
}

int cmd_eval(const EvalArgs& args) {
    if (args.checkpoint.empty() || args.manifest.empty()) {
        std::cerr << "config error: --checkpoint and --data are required\n";
        return 1;
    }
    try {
        SegModel model = load_checkpoint(args.checkpoint);
        const SegDataset dset = load_dataset(args.manifest);

        std::vector<int> base_classes(model.class_ids.begin(),
                                      model.class_ids.begin() + model.n_base);
        std::vector<int> new_classes(model.class_ids.begin() + model.n_base,
                                     model.class_ids.end());
        MetricsReport report =
            evaluate_model(model, dset, base_classes, new_classes, true);

        json doc;
        doc["checkpoint"] = args.checkpoint;
        doc["images"] = dset.size();
        doc["miou_base"] = report.miou_base;
        doc["miou_new"] = report.miou_new;
        doc["hm"] = report.hm;
        json iou = json::object();
        for (std::size_t c = 0; c < report.iou_per_class.size(); ++c)
            if (report.iou_per_class[c]) iou[std::to_string(c)] = *report.iou_per_class[c];
        doc["iou_per_class"] = std::move(iou);
        const std::string text = doc.dump(2) + "\n";
        std::fputs(text.c_str(), stdout);
        if (!args.out_json.empty()) write_text_file(args.out_json, text);
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "eval failed: " << e.what() << "\n";
        return 2;
    }
}

int cmd_print_defaults() {
    std::fputs(config_text(default_run_config()).c_str(), stdout);
    return 0;
}

}  // namespace pifs
