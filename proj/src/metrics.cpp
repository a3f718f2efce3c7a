#include "pifs/metrics.hpp"

#include <stdexcept>
#include <string>

namespace pifs {

void ConfusionAccumulator::merge(const ConfusionAccumulator& other) {
    if (other.num_classes() != num_classes())
        throw std::invalid_argument("confusion merge: class counts differ");
    for (int c = 0; c < num_classes(); ++c) {
        tp[c] += other.tp[c];
        fp[c] += other.fp[c];
        fn[c] += other.fn[c];
    }
}

void confusion_update(ConfusionAccumulator& acc, const std::vector<std::uint8_t>& pred,
                      const std::vector<std::uint8_t>& gt, int ignore_index) {
    if (pred.size() != gt.size())
        throw std::invalid_argument("confusion update: prediction has " +
                                    std::to_string(pred.size()) + " pixels, ground truth " +
                                    std::to_string(gt.size()));
    const int n = acc.num_classes();
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const int g = gt[i];
        if (g == ignore_index) continue;
        const int p = pred[i];
        if (p < 0 || p >= n)
            throw std::invalid_argument("confusion update: predicted class " +
                                        std::to_string(p) + " outside 0.." +
                                        std::to_string(n - 1));
        if (g < 0 || g >= n)
            throw std::invalid_argument("confusion update: ground-truth class " +
                                        std::to_string(g) + " outside 0.." +
                                        std::to_string(n - 1));
        if (p == g) {
            ++acc.tp[p];
        } else {
            ++acc.fp[p];
            ++acc.fn[g];
        }
    }
}

std::vector<std::optional<double>> iou_per_class(const ConfusionAccumulator& acc) {
    std::vector<std::optional<double>> iou(acc.num_classes());
    for (int c = 0; c < acc.num_classes(); ++c) {
        const std::int64_t denom = acc.tp[c] + acc.fp[c] + acc.fn[c];
        if (denom > 0)
            iou[c] = static_cast<double>(acc.tp[c]) / static_cast<double>(denom);
    }
    return iou;
}

double miou(const ConfusionAccumulator& acc, const std::vector<int>& class_subset) {
    const auto iou = iou_per_class(acc);
    double sum = 0.0;
    int present = 0;
    for (int c : class_subset) {
        if (c < 0 || c >= acc.num_classes())
            throw std::invalid_argument("miou: class " + std::to_string(c) +
                                        " outside accumulator range");
        if (iou[c]) {
            sum += *iou[c];
            ++present;
        }
    }
    if (present == 0)
        throw std::invalid_argument("miou: no class of the subset is present");
    return sum / present;
}

double harmonic_mean(double a, double b) {
    if (a < 0.0 || b < 0.0) throw std::invalid_argument("harmonic_mean: negative input");
    if (a == 0.0 || b == 0.0) return 0.0;
    return 2.0 * a * b / (a + b);
}

MetricsReport aggregate(const std::vector<MetricsReport>& reports, HmPolicy policy) {
    if (reports.empty()) throw std::invalid_argument("aggregate: no reports");
    const MetricsReport& first = reports.front();
    for (const MetricsReport& r : reports)
        if (r.base_classes != first.base_classes)
            throw std::invalid_argument("aggregate: heterogeneous base-class subsets");

    MetricsReport out = first;
    double base = 0.0, nw = 0.0, hm_sum = 0.0;
    for (const MetricsReport& r : reports) {
        base += r.miou_base;
        nw += r.miou_new;
        hm_sum += r.hm;
    }
    const double n = static_cast<double>(reports.size());
    out.miou_base = base / n;
    out.miou_new = nw / n;
    out.hm = policy == HmPolicy::RecomputeFromMeans ? harmonic_mean(out.miou_base, out.miou_new)
                                                    : hm_sum / n;
    out.iou_per_class.clear();
    return out;
}

}  // namespace pifs
