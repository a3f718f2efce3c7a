#pragma once

#include <cstdint>
#include <optional>
#include <vector>

namespace pifs {

/// Per-class TP/FP/FN pixel counts; a mergeable monoid so parallel
/// evaluation shards can be combined by addition.
struct ConfusionAccumulator {
    std::vector<std::int64_t> tp, fp, fn;

    explicit ConfusionAccumulator(int n_classes = 0)
        : tp(n_classes, 0), fp(n_classes, 0), fn(n_classes, 0) {}

    int num_classes() const { return static_cast<int>(tp.size()); }
    void merge(const ConfusionAccumulator& other);
};

void confusion_update(ConfusionAccumulator& acc, const std::vector<std::uint8_t>& pred,
                      const std::vector<std::uint8_t>& gt, int ignore_index = 255);

/// IoU per class; nullopt marks a class absent from both prediction and
/// ground truth (excluded from means rather than scored 0).
std::vector<std::optional<double>> iou_per_class(const ConfusionAccumulator& acc);

double miou(const ConfusionAccumulator& acc, const std::vector<int>& class_subset);

double harmonic_mean(double a, double b);

struct MetricsReport {
    std::vector<std::optional<double>> iou_per_class;
    double miou_base = 0.0;
    double miou_new = 0.0;
    double hm = 0.0;
    int fold_index = 0;
    int step_index = 0;
    int trial_index = 0;
    std::vector<int> base_classes;
    std::vector<int> new_classes;
};

enum class HmPolicy { RecomputeFromMeans, AverageReports };

/// Arithmetic mean of miou_base / miou_new over the reports; hm either
/// recomputed from the averaged means (default) or averaged directly.
/// Reports must agree on their base-class subset.
MetricsReport aggregate(const std::vector<MetricsReport>& reports,
                        HmPolicy policy = HmPolicy::RecomputeFromMeans);

}  // namespace pifs
