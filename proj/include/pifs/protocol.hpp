#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "pifs/data.hpp"
#include "pifs/methods.hpp"
#include "pifs/metrics.hpp"
#include "pifs/nn.hpp"
#include "pifs/protolearn.hpp"

namespace pifs {

struct ClassSplit {
    std::vector<int> all_classes;        // shape classes, ascending (no background)
    std::vector<std::vector<int>> folds;

    int fold_size() const { return folds.empty() ? 0 : static_cast<int>(folds[0].size()); }
};

/// Contiguous ascending folds over classes 1..n_classes-1 (0 is background).
ClassSplit make_folds(int n_classes, int fold_size);

/// Keeps exactly the images with zero pixels of any class in new_classes.
SegDataset filter_base_dataset(const SegDataset& pool, const std::set<int>& new_classes);

/// `shots` distinct images containing at least one pixel of class k, sampled
/// uniformly without replacement.
SegDataset sample_fsl_dataset(const SegDataset& pool, int k, int shots, Rng& rng);

/// Old-class pixels become background. Idempotent.
std::vector<std::uint8_t> relabel_strict(const std::vector<std::uint8_t>& mask,
                                         const std::set<int>& old_classes);

double poly_lr(int iter, int max_iter, double lr_init);

/// SGD with momentum and weight decay folded into the velocity:
/// v <- m*v + (g + wd*p); p <- p - lr*v. Velocities persist across
/// iterations of one learning step and reset between steps.
class SgdOptimizer {
public:
    SgdOptimizer(std::vector<Tensor> params, double momentum, double weight_decay);
    void step(double lr);
    void zero_grad();

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> velocity_;
    double momentum_;
    double weight_decay_;
};

enum class Setting { SS, MS };

struct TrainerConfig {
    double lr_base = 1e-2;
    double lr_fsl = 1e-3;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int iters_base = 2000;
    int iters_fsl = 200;
    int batch_cap = 10;  // batch size = min(batch_cap, |D^t|)
    bool hflip = true;
};

struct ProtocolConfig {
    int shots = 1;  // 1 | 2 | 5
    Setting setting = Setting::SS;
    bool strict = false;
    std::vector<int> folds = {0, 1, 2, 3};
    int ms_steps = 0;  // 0 = one class per step
    int trials = 4;
    std::uint64_t seed = 1234;
    int fold_size = 2;
    TrainerConfig trainer;
    ModelConfig model;
    double lambda = 10.0;
    bool include_background_in_base = true;
    HmPolicy hm_policy = HmPolicy::RecomputeFromMeans;
};

struct ProtocolState {
    int step = 0;
    SegModel model;
    std::vector<int> current_classes;  // C^t, model column order
    std::vector<int> new_classes;      // K^t
    std::optional<SegModel> prev_model;
    bool norm_frozen = false;
};

/// Trains the base model on the filtered pool, then freezes the running
/// normalization statistics for every later step.
ProtocolState run_base_step(const ProtocolConfig& cfg, const ClassSplit& split, int fold,
                            const SegDataset& pool, Rng& rng);

/// One few-shot learning step. The dataset must already carry
/// protocol-conform labels (only C^t classes, strict relabeling applied).
ProtocolState run_fsl_step(const ProtocolState& state, const SegDataset& fsl_dataset,
                           const std::set<int>& new_classes, const MethodSpec& method,
                           const ProtocolConfig& cfg, Rng& rng);

MetricsReport evaluate_model(SegModel& model, const SegDataset& val,
                             const std::vector<int>& base_classes,
                             const std::vector<int>& new_classes,
                             bool include_background_in_base);

/// Test/inspection hook, called after every FSL step.
struct StepObservation {
    int fold = 0;
    int trial = 0;
    int step = 0;
    const SegDataset* train_dataset = nullptr;
    const ProtocolState* state = nullptr;
    int batch_size = 0;
};
using StepObserver = std::function<void(const StepObservation&)>;

struct Benchmark {
    SegDataset train_pool;
    SegDataset val_pool;
    int n_classes = 0;
};

/// Caches the fold-level base model so trials and methods reuse the same
/// deterministic training run. Thread-safe compute-once per fold.
class BaseModelCache {
public:
    using Builder = std::function<ProtocolState(int fold)>;
    explicit BaseModelCache(Builder builder) : builder_(std::move(builder)) {}

    /// Returns a deep copy of the cached state for the fold.
    ProtocolState get(int fold);

private:
    struct Slot {
        std::once_flag once;
        std::shared_ptr<ProtocolState> state;
    };
    Builder builder_;
    std::mutex mutex_;
    std::map<int, std::unique_ptr<Slot>> slots_;
};

struct TrialResult {
    std::vector<MetricsReport> reports;
    SegModel final_model;
};

/// One (fold, trial) run: base step (cached or fresh), the FSL schedule, and
/// an evaluation after every FSL step. Independent across (fold, trial).
TrialResult run_trial(const ProtocolConfig& cfg, const MethodSpec& method,
                      const Benchmark& bench, BaseModelCache* cache, int fold, int trial,
                      const StepObserver& observer = nullptr);

/// Runs base + FSL steps for every (fold, trial) of the config and evaluates
/// after each FSL step on the validation pool over all seen classes.
std::vector<MetricsReport> run_experiment(const ProtocolConfig& cfg, const MethodSpec& method,
                                          const Benchmark& bench, BaseModelCache* cache = nullptr,
                                          const StepObserver& observer = nullptr);

}  // namespace pifs
