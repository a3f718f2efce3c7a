#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <vector>

#include "pifs/metrics.hpp"
#include "pifs/rng.hpp"

using namespace pifs;

namespace {

std::vector<std::uint8_t> random_mask(Rng& rng, std::size_t n, int n_classes) {
    std::vector<std::uint8_t> m(n);
    for (auto& v : m) v = static_cast<std::uint8_t>(rand_below(rng, n_classes));
    return m;
}

// Brute-force IoU oracle: per class, explicit intersection and union pixel
// sets over the raw masks.
std::vector<std::optional<double>> iou_oracle(const std::vector<std::vector<std::uint8_t>>& preds,
                                              const std::vector<std::vector<std::uint8_t>>& gts,
                                              int n_classes, int ignore = 255) {
    std::vector<std::optional<double>> out(n_classes);
    for (int c = 0; c < n_classes; ++c) {
        long inter = 0, uni = 0;
        for (std::size_t m = 0; m < preds.size(); ++m)
            for (std::size_t i = 0; i < preds[m].size(); ++i) {
                if (gts[m][i] == ignore) continue;
                const bool in_pred = preds[m][i] == c;
                const bool in_gt = gts[m][i] == c;
                inter += in_pred && in_gt;
                uni += in_pred || in_gt;
            }
        if (uni > 0) out[c] = static_cast<double>(inter) / static_cast<double>(uni);
    }
    return out;
}

}  // namespace

TEST_CASE("confusion update examples") {
    SUBCASE("perfect prediction has no FP/FN") {
        ConfusionAccumulator acc(3);
        std::vector<std::uint8_t> m = {0, 1, 2, 1};
        confusion_update(acc, m, m);
        for (int c = 0; c < 3; ++c) {
            CHECK(acc.fp[c] == 0);
            CHECK(acc.fn[c] == 0);
        }
        CHECK(acc.tp[1] == 2);
    }
    SUBCASE("fully ignored mask leaves the accumulator unchanged") {
        ConfusionAccumulator acc(3);
        confusion_update(acc, {0, 1, 2}, {255, 255, 255});
        for (int c = 0; c < 3; ++c) {
            CHECK(acc.tp[c] == 0);
            CHECK(acc.fp[c] == 0);
            CHECK(acc.fn[c] == 0);
        }
    }
    SUBCASE("hand-counted 2x2 case") {
        ConfusionAccumulator acc(2);
        confusion_update(acc, {0, 1, 1, 1}, {0, 1, 0, 0});
        CHECK(acc.tp[0] == 1);
        CHECK(acc.tp[1] == 1);
        CHECK(acc.fp[0] == 0);
        CHECK(acc.fp[1] == 2);
        CHECK(acc.fn[0] == 2);
        CHECK(acc.fn[1] == 0);
    }
    SUBCASE("shape mismatch rejected") {
        ConfusionAccumulator acc(2);
        CHECK_THROWS(confusion_update(acc, {0, 1}, {0}));
    }
}

TEST_CASE("iou per class") {
    SUBCASE("perfect prediction scores one") {
        ConfusionAccumulator acc(2);
        confusion_update(acc, {1, 1}, {1, 1});
        CHECK(*iou_per_class(acc)[1] == 1.0);
        CHECK_FALSE(iou_per_class(acc)[0].has_value());  // absent class excluded
    }
    SUBCASE("disjoint equal-size prediction scores zero") {
        ConfusionAccumulator acc(3);
        confusion_update(acc, {1, 1, 0, 0}, {0, 0, 1, 1});
        CHECK(*iou_per_class(acc)[1] == 0.0);
    }
    SUBCASE("hand division") {
        ConfusionAccumulator acc(1);
        acc.tp[0] = 1;
        acc.fp[0] = 2;
        acc.fn[0] = 2;
        CHECK(*iou_per_class(acc)[0] == doctest::Approx(0.2).epsilon(1e-12));
    }
}

TEST_CASE("iou matches the brute-force oracle on random masks") {
    Rng rng(77);
    for (int trial = 0; trial < 30; ++trial) {
        const int n_classes = 4;
        std::vector<std::vector<std::uint8_t>> preds, gts;
        ConfusionAccumulator acc(n_classes);
        for (int m = 0; m < 3; ++m) {
            preds.push_back(random_mask(rng, 64, n_classes));
            gts.push_back(random_mask(rng, 64, n_classes));
            confusion_update(acc, preds.back(), gts.back());
        }
        const auto got = iou_per_class(acc);
        const auto want = iou_oracle(preds, gts, n_classes);
        for (int c = 0; c < n_classes; ++c) {
            CHECK(got[c].has_value() == want[c].has_value());
            if (got[c]) CHECK(*got[c] == *want[c]);
        }
    }
}

TEST_CASE("update order does not matter") {
    Rng rng(78);
    std::vector<std::vector<std::uint8_t>> preds, gts;
    for (int m = 0; m < 5; ++m) {
        preds.push_back(random_mask(rng, 64, 3));
        gts.push_back(random_mask(rng, 64, 3));
    }
    ConfusionAccumulator fwd(3), rev(3);
    for (std::size_t m = 0; m < preds.size(); ++m) confusion_update(fwd, preds[m], gts[m]);
    for (std::size_t m = preds.size(); m-- > 0;) confusion_update(rev, preds[m], gts[m]);
    CHECK(fwd.tp == rev.tp);
    CHECK(fwd.fp == rev.fp);
    CHECK(fwd.fn == rev.fn);
}

TEST_CASE("miou lies between min and max per-class IoU") {
    Rng rng(79);
    ConfusionAccumulator acc(5);
    for (int m = 0; m < 4; ++m)
        confusion_update(acc, random_mask(rng, 100, 5), random_mask(rng, 100, 5));
    const auto iou = iou_per_class(acc);
    double lo = 1.0, hi = 0.0;
    std::vector<int> all = {0, 1, 2, 3, 4};
    for (int c : all)
        if (iou[c]) {
            lo = std::min(lo, *iou[c]);
            hi = std::max(hi, *iou[c]);
        }
    const double m = miou(acc, all);
    CHECK(m >= lo);
    CHECK(m <= hi);

    CHECK_THROWS(miou(ConfusionAccumulator(2), {0, 1}));
}

TEST_CASE("harmonic mean") {
    CHECK(harmonic_mean(50, 50) == doctest::Approx(50.0));
    CHECK(harmonic_mean(42.0, 0.0) == 0.0);
    CHECK(harmonic_mean(0.0, 13.0) == 0.0);
    // consistent with published rounding of 60.9/18.6 -> 28.4
    const double hm = harmonic_mean(60.9, 18.6);
    CHECK(hm >= 28.4);
    CHECK(hm <= 28.6);
}

TEST_CASE("aggregate") {
    MetricsReport a;
    a.miou_base = 40;
    a.miou_new = 10;
    a.hm = harmonic_mean(40, 10);
    a.base_classes = {0, 1};
    a.new_classes = {2};
    MetricsReport b = a;
    b.miou_base = 60;
    b.miou_new = 30;
    b.hm = harmonic_mean(60, 30);

    SUBCASE("single report aggregates to itself") {
        MetricsReport out = aggregate({a});
        CHECK(out.miou_base == a.miou_base);
        CHECK(out.miou_new == a.miou_new);
        CHECK(out.hm == doctest::Approx(a.hm));
    }
    SUBCASE("hand computation with recomputed hm") {
        MetricsReport out = aggregate({a, b});
        CHECK(out.miou_base == doctest::Approx(50.0));
        CHECK(out.miou_new == doctest::Approx(20.0));
        CHECK(out.hm == doctest::Approx(2.0 * 50 * 20 / 70.0).epsilon(1e-9));
    }
    SUBCASE("direct averaging policy differs") {
        MetricsReport out = aggregate({a, b}, HmPolicy::AverageReports);
        CHECK(out.hm == doctest::Approx((a.hm + b.hm) / 2.0));
    }
    SUBCASE("nested and flat aggregation agree for equal group sizes") {
        MetricsReport c = a;
        c.miou_base = 20;
        c.miou_new = 5;
        MetricsReport d = a;
        d.miou_base = 80;
        d.miou_new = 45;
        MetricsReport nested = aggregate({aggregate({a, b}), aggregate({c, d})});
        MetricsReport flat = aggregate({a, b, c, d});
        CHECK(nested.miou_base == doctest::Approx(flat.miou_base));
        CHECK(nested.miou_new == doctest::Approx(flat.miou_new));
    }
    SUBCASE("heterogeneous base subsets rejected") {
        MetricsReport other = a;
        other.base_classes = {0, 3};
        CHECK_THROWS(aggregate({a, other}));
    }
}
