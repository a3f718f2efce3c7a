#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "pifs/protocol.hpp"

using namespace pifs;

namespace {

// Small benchmark: 4 shape classes, 2 folds of 2, quick to train.
struct TinySetup {
    ProtocolConfig cfg;
    Benchmark bench;

    TinySetup() {
        SyntheticSpec spec;
        spec.height = 16;
        spec.width = 16;
        spec.n_classes = 5;
        spec.min_pixels_per_shape = 8;
        spec.shapes_max = 2;
        spec.seed = 4242;
        bench.train_pool = generate_dataset(spec, 30, {1, 2, 3, 4});
        bench.val_pool = generate_dataset(spec, 8, {1, 2, 3, 4}, 100000);
        bench.n_classes = 5;

        cfg.fold_size = 2;
        cfg.folds = {0};
        cfg.trials = 1;
        cfg.shots = 1;
        cfg.seed = 99;
        cfg.model.channels = {6, 6};
        cfg.trainer.iters_base = 40;
        cfg.trainer.iters_fsl = 8;
        cfg.trainer.lr_base = 5e-3;
        cfg.trainer.lr_fsl = 1e-3;
    }
};

double batch_ce(SegModel& model, const SegDataset& dset, int n_images) {
    NoGradScope no_grad;
    std::vector<Tensor> images;
    std::vector<int> labels;
    for (int i = 0; i < n_images; ++i) {
        const LabeledImage& img = dset.images[i];
        images.push_back(image_tensor(dset, img));
        for (std::uint8_t v : img.mask) labels.push_back(model.column_of(v));
    }
    Tensor probs = model.forward_probs(stack0(images), false);
    return ce_loss(probs, labels).item();
}

}  // namespace

TEST_CASE("make_folds") {
    ClassSplit split = make_folds(21, 5);
    CHECK(split.folds.size() == 4);
    CHECK(split.folds[0] == std::vector<int>{1, 2, 3, 4, 5});

    std::set<int> all;
    for (const auto& fold : split.folds)
        for (int c : fold) CHECK(all.insert(c).second);  // disjoint
    CHECK(all.size() == 20);
    CHECK(*all.begin() == 1);
    CHECK(*all.rbegin() == 20);

    CHECK_THROWS(make_folds(21, 6));
}

TEST_CASE("filter_base_dataset") {
    SyntheticSpec spec;
    spec.height = 16;
    spec.width = 16;
    spec.min_pixels_per_shape = 8;
    spec.shapes_max = 2;
    SegDataset pool = generate_dataset(spec, 40, {1, 2, 3});

    SUBCASE("pool without new-class pixels is unchanged") {
        SegDataset kept = filter_base_dataset(pool, {7});
        CHECK(kept.size() == pool.size());
    }
    SUBCASE("images with any new-class pixel are dropped; order preserved") {
        SegDataset kept = filter_base_dataset(pool, {2});
        // brute-force scan oracle
        std::vector<int> expected_ids;
        for (const LabeledImage& img : pool.images) {
            bool has = false;
            for (std::uint8_t v : img.mask) has = has || v == 2;
            if (!has) expected_ids.push_back(img.id);
        }
        REQUIRE(kept.size() == expected_ids.size());
        for (std::size_t i = 0; i < kept.size(); ++i) CHECK(kept.images[i].id == expected_ids[i]);
        CHECK(kept.size() < pool.size());
    }
    SUBCASE("empty result is an error") {
        CHECK_THROWS(filter_base_dataset(pool, {1, 2, 3}));
    }
}

TEST_CASE("sample_fsl_dataset") {
    SyntheticSpec spec;
    spec.height = 16;
    spec.width = 16;
    spec.min_pixels_per_shape = 8;
    spec.shapes_max = 1;
    SegDataset pool = generate_dataset(spec, 10, {1});
    SegDataset background = generate_dataset(spec, 3, {}, 500);
    for (const LabeledImage& img : background.images) pool.images.push_back(img);

    SUBCASE("single eligible image is the sample") {
        SegDataset one;
        one.height = one.width = 16;
        one.images.push_back(pool.images[4]);
        one.images.push_back(background.images[0]);
        Rng rng(1);
        SegDataset got = sample_fsl_dataset(one, 1, 1, rng);
        CHECK(got.size() == 1);
        CHECK(got.images[0].id == pool.images[4].id);
    }
    SUBCASE("same seed gives the same selection") {
        Rng a(7), b(7);
        SegDataset s1 = sample_fsl_dataset(pool, 1, 5, a);
        SegDataset s2 = sample_fsl_dataset(pool, 1, 5, b);
        REQUIRE(s1.size() == s2.size());
        for (std::size_t i = 0; i < s1.size(); ++i) CHECK(s1.images[i].id == s2.images[i].id);
    }
    SUBCASE("insufficient images is an error naming the class") {
        Rng rng(1);
        CHECK_THROWS_WITH_AS(sample_fsl_dataset(pool, 3, 1, rng), doctest::Contains("class 3"),
                             std::runtime_error);
    }
    SUBCASE("selection frequencies are uniform within 3 sigma") {
        Rng rng(1234);
        std::map<int, int> counts;
        const int draws = 10000;
        for (int i = 0; i < draws; ++i) {
            SegDataset got = sample_fsl_dataset(pool, 1, 1, rng);
            ++counts[got.images[0].id];
        }
        const double p = 1.0 / 10.0;  // 10 eligible images
        const double sigma = std::sqrt(draws * p * (1 - p));
        for (const auto& [id, n] : counts)
            CHECK(std::abs(n - draws * p) <= 3.0 * sigma);
    }
}

TEST_CASE("relabel_strict") {
    std::vector<std::uint8_t> mask = {1, 16, 0, 16};
    std::vector<std::uint8_t> out = relabel_strict(mask, {1});
    CHECK(out == std::vector<std::uint8_t>{0, 16, 0, 16});

    std::vector<std::uint8_t> untouched = relabel_strict(mask, {9});
    CHECK(untouched == mask);

    CHECK(relabel_strict(out, {1}) == out);  // idempotent

    // background never changes even if listed
    CHECK(relabel_strict({0, 2}, {0, 2}) == std::vector<std::uint8_t>{0, 0});
}

TEST_CASE("poly_lr") {
    CHECK(poly_lr(0, 100, 0.5) == 0.5);
    CHECK(poly_lr(100, 100, 0.5) == 0.0);
    CHECK(poly_lr(50, 100, 1.0) ==
          doctest::Approx(std::pow(0.5, 0.9)).epsilon(1e-12));
    CHECK(std::abs(poly_lr(50, 100, 1.0) - 0.535887) < 1e-6);
    CHECK_THROWS(poly_lr(101, 100, 0.5));
}

TEST_CASE("sgd_step") {
    SUBCASE("zero grad, zero wd, zero velocity leaves parameters unchanged") {
        Tensor p = Tensor::from_data({2}, {1.0, -2.0}).set_requires_grad(true);
        SgdOptimizer opt({p}, 0.9, 0.0);
        opt.step(0.1);
        CHECK(p.value() == std::vector<double>{1.0, -2.0});
    }
    SUBCASE("hand update") {
        Tensor p = Tensor::scalar(1.0).set_requires_grad(true);
        p.impl()->grad[0] = 1.0;
        SgdOptimizer opt({p}, 0.9, 0.0);
        opt.step(0.1);
        CHECK(p.value()[0] == doctest::Approx(0.9).epsilon(1e-15));
    }
    SUBCASE("momentum accumulates across iterations") {
        Tensor p = Tensor::scalar(1.0).set_requires_grad(true);
        SgdOptimizer opt({p}, 0.9, 0.0);
        p.impl()->grad[0] = 1.0;
        opt.step(0.1);  // v=1, p=0.9
        p.zero_grad();
        p.impl()->grad[0] = 1.0;
        opt.step(0.1);  // v=1.9, p=0.9-0.19
        CHECK(p.value()[0] == doctest::Approx(0.71).epsilon(1e-12));
    }
    SUBCASE("weight decay pulls toward zero") {
        Tensor p = Tensor::scalar(2.0).set_requires_grad(true);
        SgdOptimizer opt({p}, 0.0, 0.5);
        opt.step(0.1);  // v = 0 + (0 + 0.5*2) = 1; p = 2 - 0.1
        CHECK(p.value()[0] == doctest::Approx(1.9).epsilon(1e-15));
    }
    SUBCASE("two identical runs are bit-identical") {
        auto run = [] {
            Rng rng(5);
            Tensor p = Tensor::from_data({3}, {0.5, -0.25, 1.5}).set_requires_grad(true);
            SgdOptimizer opt({p}, 0.9, 1e-4);
            for (int i = 0; i < 10; ++i) {
                p.zero_grad();
                for (std::size_t j = 0; j < 3; ++j) p.impl()->grad[j] = rand_normal(rng);
                opt.step(poly_lr(i, 10, 0.1));
            }
            return p.value();
        };
        CHECK(run() == run());
    }
}

TEST_CASE("run_base_step trains and freezes") {
    TinySetup su;
    ClassSplit split = make_folds(5, 2);
    Rng rng(mix_seed(su.cfg.seed, 0xBA5Eu, 0));

    // untrained reference: same init path as run_base_step
    Rng rng_init(mix_seed(su.cfg.seed, 0xBA5Eu, 0));
    SegModel fresh = build_model(su.cfg.model, {0, 3, 4}, rng_init);
    SegDataset base_pool = filter_base_dataset(su.bench.train_pool, {1, 2});
    const double initial = batch_ce(fresh, base_pool, 4);
    CHECK(initial == doctest::Approx(std::log(3.0)).epsilon(0.2));

    ProtocolState state = run_base_step(su.cfg, split, 0, su.bench.train_pool, rng);
    CHECK(state.step == 0);
    CHECK(state.norm_frozen);
    CHECK(state.current_classes == std::vector<int>{0, 3, 4});
    for (const ConvLayer& l : state.model.extractor.layers) CHECK(l.norm.frozen);

    const double final_loss = batch_ce(state.model, base_pool, 4);
    CHECK(final_loss < initial);
}

TEST_CASE("run_fsl_step method behaviors") {
    TinySetup su;
    ClassSplit split = make_folds(5, 2);
    Rng rng(mix_seed(su.cfg.seed, 0xBA5Eu, 0));
    ProtocolState base = run_base_step(su.cfg, split, 0, su.bench.train_pool, rng);

    Rng fsl_rng(777);
    SegDataset fsl = sample_fsl_dataset(su.bench.train_pool, 1, 1, fsl_rng);
    {
        SegDataset extra = sample_fsl_dataset(su.bench.train_pool, 2, 1, fsl_rng);
        for (LabeledImage& img : extra.images)
            if (img.id != fsl.images[0].id) fsl.images.push_back(std::move(img));
    }

    SUBCASE("wi leaves the extractor bit-identical") {
        Rng r(1);
        ProtocolState next = run_fsl_step(base, fsl, {1, 2}, method_from_name("wi"), su.cfg, r);
        CHECK(next.step == 1);
        CHECK(next.model.num_classes() == 5);
        for (std::size_t i = 0; i < base.model.extractor.layers.size(); ++i) {
            CHECK(next.model.extractor.layers[i].kernel.value() ==
                  base.model.extractor.layers[i].kernel.value());
            CHECK(next.model.extractor.layers[i].norm.gamma.value() ==
                  base.model.extractor.layers[i].norm.gamma.value());
        }
    }

    SUBCASE("pifs with lambda 0 matches wi_ft_br exactly under the same seed") {
        MethodSpec pifs0 = method_from_name("pifs", 0.0);
        MethodSpec wiftbr = method_from_name("wi_ft_br");
        Rng r1(42), r2(42);
        ProtocolState a = run_fsl_step(base, fsl, {1, 2}, pifs0, su.cfg, r1);
        ProtocolState b = run_fsl_step(base, fsl, {1, 2}, wiftbr, su.cfg, r2);
        CHECK(a.model.classifier.weight.value() == b.model.classifier.weight.value());
        for (std::size_t i = 0; i < a.model.extractor.layers.size(); ++i)
            CHECK(a.model.extractor.layers[i].kernel.value() ==
                  b.model.extractor.layers[i].kernel.value());
    }

    SUBCASE("ft appends random unit columns") {
        Rng r(43);
        ProtocolConfig cfg0 = su.cfg;
        cfg0.trainer.iters_fsl = 0;  // inspect the initialization itself
        ProtocolState next = run_fsl_step(base, fsl, {1, 2}, method_from_name("ft"), cfg0, r);
        CHECK(next.model.num_classes() == 5);
        const auto& w = next.model.classifier.weight.value();
        for (int c = 3; c < 5; ++c) {
            double sq = 0.0;
            for (int j = 0; j < 6; ++j) sq += w[j * 5 + c] * w[j * 5 + c];
            CHECK(std::sqrt(sq) == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
}

TEST_CASE("run_experiment schedules, determinism, wiring") {
    TinySetup su;

    SUBCASE("ss runs one step, ms runs fold_size steps") {
        MethodSpec wi = method_from_name("wi");
        std::vector<MetricsReport> ss = run_experiment(su.cfg, wi, su.bench);
        CHECK(ss.size() == 1);
        CHECK(ss[0].step_index == 1);

        ProtocolConfig ms_cfg = su.cfg;
        ms_cfg.setting = Setting::MS;
        std::vector<MetricsReport> ms = run_experiment(ms_cfg, wi, su.bench);
        CHECK(ms.size() == 2);
        CHECK(ms[0].step_index == 1);
        CHECK(ms[1].step_index == 2);
        // same union of classes learned in SS and MS
        std::set<int> ss_new(ss[0].new_classes.begin(), ss[0].new_classes.end());
        std::set<int> ms_new(ms[1].new_classes.begin(), ms[1].new_classes.end());
        CHECK(ss_new == ms_new);
    }

    SUBCASE("identical config and seed reproduce reports bit for bit") {
        MethodSpec m = method_from_name("wi_ft");
        std::vector<MetricsReport> a = run_experiment(su.cfg, m, su.bench);
        std::vector<MetricsReport> b = run_experiment(su.cfg, m, su.bench);
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].miou_base == b[i].miou_base);
            CHECK(a[i].miou_new == b[i].miou_new);
            CHECK(a[i].hm == b[i].hm);
        }
    }

    SUBCASE("base cache reproduces the uncached run bitwise") {
        MethodSpec m = method_from_name("wi");
        ClassSplit split = make_folds(su.bench.n_classes, su.cfg.fold_size);
        BaseModelCache cache([&](int fold) {
            Rng rng(mix_seed(su.cfg.seed, 0xBA5Eu, static_cast<std::uint64_t>(fold)));
            return run_base_step(su.cfg, split, fold, su.bench.train_pool, rng);
        });
        std::vector<MetricsReport> direct = run_experiment(su.cfg, m, su.bench);
        std::vector<MetricsReport> cached = run_experiment(su.cfg, m, su.bench, &cache);
        std::vector<MetricsReport> cached2 = run_experiment(su.cfg, m, su.bench, &cache);
        REQUIRE(direct.size() == cached.size());
        for (std::size_t i = 0; i < direct.size(); ++i) {
            CHECK(direct[i].miou_base == cached[i].miou_base);
            CHECK(direct[i].miou_new == cached[i].miou_new);
            CHECK(cached2[i].miou_base == cached[i].miou_base);
        }
    }

    SUBCASE("strict mode scrubs old classes from every training mask") {
        ProtocolConfig cfg = su.cfg;
        cfg.strict = true;
        cfg.setting = Setting::MS;  // second step has old classes beyond the base set
        MethodSpec m = method_from_name("pifs");
        bool saw_step = false;
        std::vector<int> base_ids;
        run_experiment(cfg, m, su.bench, nullptr, [&](const StepObservation& obs) {
            saw_step = true;
            if (base_ids.empty())
                base_ids = {0, 3, 4};
            std::set<int> old_allowed(obs.state->new_classes.begin(),
                                      obs.state->new_classes.end());
            for (const LabeledImage& img : obs.train_dataset->images)
                for (std::uint8_t v : img.mask) {
                    if (v == 0 || v == kIgnoreIndex) continue;
                    CHECK(old_allowed.count(v) > 0);  // only this step's classes remain
                }
        });
        CHECK(saw_step);
    }

    SUBCASE("batch size follows min(cap, dataset size) and stats stay frozen") {
        ProtocolConfig cfg = su.cfg;
        cfg.setting = Setting::MS;
        MethodSpec m = method_from_name("pifs");
        std::vector<std::vector<double>> stat_snapshots;
        run_experiment(cfg, m, su.bench, nullptr, [&](const StepObservation& obs) {
            CHECK(obs.batch_size ==
                  std::min<int>(cfg.trainer.batch_cap,
                                static_cast<int>(obs.train_dataset->size())));
            std::vector<double> stats;
            for (const ConvLayer& l : obs.state->model.extractor.layers) {
                stats.insert(stats.end(), l.norm.mu_r.begin(), l.norm.mu_r.end());
                stats.insert(stats.end(), l.norm.sigma_r.begin(), l.norm.sigma_r.end());
            }
            stat_snapshots.push_back(std::move(stats));
        });
        REQUIRE(stat_snapshots.size() == 2);
        CHECK(stat_snapshots[0] == stat_snapshots[1]);  // bit-identical across steps
    }

    SUBCASE("class set grows and prototype count tracks it") {
        ProtocolConfig cfg = su.cfg;
        cfg.setting = Setting::MS;
        MethodSpec m = method_from_name("wi_ft");
        std::vector<int> class_counts;
        run_experiment(cfg, m, su.bench, nullptr, [&](const StepObservation& obs) {
            CHECK(obs.state->model.num_classes() ==
                  static_cast<int>(obs.state->current_classes.size()));
            class_counts.push_back(obs.state->model.num_classes());
        });
        CHECK(class_counts == std::vector<int>{4, 5});
    }
}
