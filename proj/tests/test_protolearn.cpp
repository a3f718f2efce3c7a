#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "pifs/data.hpp"
#include "pifs/nn.hpp"
#include "pifs/protolearn.hpp"
#include "pifs/rng.hpp"

using namespace pifs;

namespace {

// Extractor whose eval-mode output reproduces the first `d` input channels
// pixel for pixel (center-only kernels, identity normalization).
FeatureExtractor passthrough_extractor(int d) {
    FeatureExtractor fx;
    ConvLayer layer;
    std::vector<double> k(static_cast<std::size_t>(d) * 3 * 9, 0.0);
    for (int j = 0; j < d; ++j) k[(static_cast<std::size_t>(j) * 3 + j) * 9 + 4] = 1.0;
    layer.kernel = Tensor::from_data({d, 3, 3, 3}, std::move(k)).set_requires_grad(true);
    layer.bias = Tensor::zeros({d}).set_requires_grad(true);
    layer.norm = NormLayer::make(d);
    fx.layers.push_back(std::move(layer));
    return fx;
}

SegModel tiny_model(Rng& rng, const std::vector<int>& class_ids,
                    std::vector<int> channels = {4, 4}) {
    ModelConfig cfg;
    cfg.channels = std::move(channels);
    return build_model(cfg, class_ids, rng);
}

SegDataset small_synthetic(const std::set<int>& classes, int n, std::uint64_t seed,
                           int id_offset = 0) {
    SyntheticSpec spec;
    spec.height = 16;
    spec.width = 16;
    spec.min_pixels_per_shape = 8;
    spec.shapes_max = 2;
    spec.seed = seed;
    return generate_dataset(spec, n, classes, id_offset);
}

// Independent restatement of the prototype formula as a plain double loop.
std::vector<double> map_oracle(const SegDataset& dset, int k, FeatureExtractor& fx) {
    NoGradScope no_grad;
    const int d = fx.feature_dim();
    std::vector<std::vector<double>> per_image_means;
    for (const LabeledImage& img : dset.images) {
        bool has = false;
        for (std::uint8_t v : img.mask) has = has || v == k;
        if (!has) continue;
        Tensor f = fx.forward(stack0({image_tensor(dset, img)}), false);
        std::vector<double> mean(d, 0.0);
        long n = 0;
        for (std::size_t p = 0; p < img.mask.size(); ++p) {
            if (img.mask[p] != k) continue;
            double sq = 0.0;
            for (int j = 0; j < d; ++j) sq += f.value()[p * d + j] * f.value()[p * d + j];
            const double norm = std::sqrt(sq);
            for (int j = 0; j < d; ++j) mean[j] += f.value()[p * d + j] / norm;
            ++n;
        }
        for (double& v : mean) v /= static_cast<double>(n);
        per_image_means.push_back(std::move(mean));
    }
    std::vector<double> out(d, 0.0);
    for (const auto& mean : per_image_means)
        for (int j = 0; j < d; ++j) out[j] += mean[j];
    for (double& v : out) v /= static_cast<double>(per_image_means.size());
    return out;
}

std::vector<int> mask_to_columns(const SegModel& model, const std::vector<std::uint8_t>& mask) {
    std::vector<int> labels(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i)
        labels[i] = mask[i] == kIgnoreIndex ? kIgnoreIndex : model.column_of(mask[i]);
    return labels;
}

}  // namespace

TEST_CASE("map_prototype hand cases") {
    FeatureExtractor fx = passthrough_extractor(2);

    SUBCASE("two unit-feature pixels average to (0.5, 0.5)") {
        SegDataset d;
        d.height = 1;
        d.width = 2;
        LabeledImage img;
        img.id = 0;
        img.pixels = {1, 0, /*ch1*/ 0, 1, /*ch2*/ 0, 0};
        img.mask = {5, 5};
        d.images.push_back(img);
        const std::vector<double> w = map_prototype(d, 5, fx);
        CHECK(w[0] == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(w[1] == doctest::Approx(0.5).epsilon(1e-12));
    }

    SUBCASE("per-image means are averaged across images") {
        SegDataset d;
        d.height = 1;
        d.width = 1;
        LabeledImage a;  // feature (1,0)
        a.id = 0;
        a.pixels = {1, 0, 0};
        a.mask = {3};
        LabeledImage b;  // feature (0,1)
        b.id = 1;
        b.pixels = {0, 1, 0};
        b.mask = {3};
        d.images = {a, b};
        const std::vector<double> w = map_prototype(d, 3, fx);
        // (p + q) / 2 with p=(1,0), q=(0,1)
        CHECK(w[0] == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(w[1] == doctest::Approx(0.5).epsilon(1e-12));
    }

    SUBCASE("missing class is an error naming the class") {
        SegDataset d;
        d.height = 1;
        d.width = 1;
        d.images.push_back({0, {1, 0, 0}, {0}});
        CHECK_THROWS_WITH_AS(map_prototype(d, 7, fx), doctest::Contains("class 7"),
                             std::invalid_argument);
    }
}

TEST_CASE("map_prototype equals the double-loop oracle bitwise") {
    Rng rng(41);
    for (int trial = 0; trial < 20; ++trial) {
        SyntheticSpec spec;
        spec.height = 8;
        spec.width = 8;
        spec.min_pixels_per_shape = 8;
        spec.shapes_max = 1;
        spec.seed = 1000 + trial;
        SegDataset d = generate_dataset(spec, 1 + trial % 5, {1, 2, 3});
        SegModel model = tiny_model(rng, {0, 1, 2, 3});
        for (int k : {1, 2, 3}) {
            bool present = false;
            for (const LabeledImage& img : d.images)
                present = present || image_contains_class(img, k);
            if (!present) continue;
            CHECK(map_prototype(d, k, model.extractor) == map_oracle(d, k, model.extractor));
        }
    }
}

TEST_CASE("imprint") {
    Rng rng(43);
    SegModel model = tiny_model(rng, {0, 1, 2, 3, 4, 5});  // |C| = 6
    // post-base-step shape: frozen, non-trivial running statistics
    model.set_norm_frozen(true);
    for (ConvLayer& l : model.extractor.layers) {
        for (double& v : l.norm.mu_r) v = rand_uniform(rng, -0.3, 0.3);
        for (double& v : l.norm.sigma_r) v = rand_uniform(rng, 0.6, 1.5);
    }
    SegDataset fsl = small_synthetic({6, 7}, 4, 77);

    SegModel grown = imprint(model, fsl, {6, 7});

    SUBCASE("column count grows six to eight") {
        CHECK(grown.classifier.num_classes() == 8);
        CHECK(grown.class_ids == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7});
    }

    SUBCASE("old-class scores are bit-identical on a probe set") {
        SegDataset probe = small_synthetic({1, 2, 3}, 6, 91, 500);
        for (const LabeledImage& img : probe.images) {
            Tensor x = stack0({image_tensor(probe, img)});
            Tensor s_old = model.forward_scores(x, false);
            Tensor s_new = grown.forward_scores(x, false);
            const std::size_t pixels = s_old.size() / 6;
            for (std::size_t p = 0; p < pixels; ++p)
                for (int c = 0; c < 6; ++c)
                    CHECK(s_old.value()[p * 6 + c] == s_new.value()[p * 8 + c]);
        }
    }

    SUBCASE("new columns equal the MAP output exactly") {
        const std::vector<double> w6 = map_prototype(fsl, 6, model.extractor);
        const std::vector<double> w7 = map_prototype(fsl, 7, model.extractor);
        const auto& w = grown.classifier.weight.value();
        for (int j = 0; j < 4; ++j) {
            CHECK(w[j * 8 + 6] == w6[j]);
            CHECK(w[j * 8 + 7] == w7[j]);
        }
    }

    SUBCASE("re-imprinting an existing class is an error") {
        CHECK_THROWS(imprint(grown, fsl, {6}));
    }
}

TEST_CASE("teacher snapshot") {
    Rng rng(47);
    SegModel model = tiny_model(rng, {0, 1, 2});
    SegDataset fsl = small_synthetic({3, 4}, 10, 131);
    REQUIRE(std::any_of(fsl.images.begin(), fsl.images.end(),
                        [](const LabeledImage& i) { return image_contains_class(i, 3); }));
    REQUIRE(std::any_of(fsl.images.begin(), fsl.images.end(),
                        [](const LabeledImage& i) { return image_contains_class(i, 4); }));
    TeacherSnapshot teacher = build_teacher(model, fsl, {3, 4});

    SUBCASE("teacher equals the imprinted student at step start") {
        SegModel student = imprint(model, fsl, {3, 4});
        Tensor x = stack0({image_tensor(fsl, fsl.images[0])});
        CHECK(teacher.probs(x).value() == student.forward_probs(x, false).value());
    }

    SUBCASE("old-class probability ratios match the pre-step model") {
        SegDataset probe = small_synthetic({1, 2}, 2, 171, 900);
        Tensor x = stack0({image_tensor(probe, probe.images[0])});
        Tensor p_old = model.forward_probs(x, false);    // 3 classes
        Tensor p_teach = teacher.probs(x);               // 5 classes
        const std::size_t pixels = p_old.size() / 3;
        for (std::size_t p = 0; p < pixels; ++p) {
            const double r_old = p_old.value()[p * 3 + 1] / p_old.value()[p * 3 + 2];
            const double r_new = p_teach.value()[p * 5 + 1] / p_teach.value()[p * 5 + 2];
            CHECK(r_old == doctest::Approx(r_new).epsilon(1e-9));
        }
    }

    SUBCASE("mutating the student leaves the teacher unchanged") {
        Tensor x = stack0({image_tensor(fsl, fsl.images[0])});
        const std::vector<double> before = teacher.probs(x).value();
        for (double& v : model.classifier.weight.raw_value()) v += 0.25;
        for (double& v : model.extractor.layers[0].kernel.raw_value()) v -= 0.1;
        CHECK(teacher.probs(x).value() == before);
    }

    SUBCASE("teacher parameters never accumulate gradients") {
        SegModel student = imprint(model, fsl, {3, 4});
        TeacherSet teachers;
        teachers.snapshot = build_teacher(model, fsl, {3, 4});
        LossConfig cfg;
        cfg.variant = DistillVariant::PD;
        Tensor x = stack0(
            {image_tensor(fsl, fsl.images[0]), image_tensor(fsl, fsl.images[1])});
        std::vector<int> labels = mask_to_columns(student, fsl.images[0].mask);
        const std::vector<int> second = mask_to_columns(student, fsl.images[1].mask);
        labels.insert(labels.end(), second.begin(), second.end());
        for (int pass = 0; pass < 3; ++pass) {
            Tape tape;
            TapeScope scope(tape);
            tape.backward(total_loss(x, labels, student, teachers, cfg));
        }
        for (Tensor& p : teachers.snapshot->model.parameters()) {
            CHECK_FALSE(p.requires_grad());
            for (double g : p.grad()) CHECK(g == 0.0);
        }
    }
}

TEST_CASE("ce_loss") {
    SUBCASE("uniform over two classes gives ln 2") {
        Tensor probs = Tensor::full({1, 1, 2}, 0.5);
        CHECK(ce_loss(probs, {0}).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    }
    SUBCASE("one-hot correct gives zero") {
        Tensor probs = Tensor::from_data({1, 1, 2}, {1.0, 0.0});
        CHECK(ce_loss(probs, {0}).item() == 0.0);
    }
    SUBCASE("hand two-pixel value") {
        Tensor probs = Tensor::from_data({1, 2, 2}, {0.5, 0.5, 0.25, 0.75});
        CHECK(ce_loss(probs, {0, 0}).item() ==
              doctest::Approx((std::log(2.0) + std::log(4.0)) / 2.0).epsilon(1e-12));
    }
    SUBCASE("ignored pixels contribute nothing to value or gradient") {
        Tensor probs = Tensor::from_data({1, 2, 2}, {0.5, 0.5, 0.9, 0.1}).set_requires_grad(true);
        Tape tape;
        TapeScope scope(tape);
        Tensor loss = ce_loss(probs, {0, kIgnoreIndex});
        CHECK(loss.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
        tape.backward(loss);
        CHECK(probs.grad()[2] == 0.0);
        CHECK(probs.grad()[3] == 0.0);
        CHECK(probs.grad()[0] != 0.0);
    }
    SUBCASE("invalid label reports pixel coordinates") {
        Tensor probs = Tensor::full({1, 2, 2}, 0.5);
        CHECK_THROWS_WITH_AS(ce_loss(probs, {0, 9}), doctest::Contains("(0, 1)"),
                             std::invalid_argument);
    }
}

TEST_CASE("pd_loss") {
    SUBCASE("student equal to uniform teacher gives teacher entropy ln 4") {
        Tensor probs = Tensor::full({2, 1, 4}, 0.25);
        CHECK(pd_loss(probs, probs).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    }
    SUBCASE("bounded below by teacher entropy (Gibbs)") {
        Rng rng(53);
        Tensor teacher = class_probabilities(Tensor::from_data(
            {1, 2, 3}, {rand_normal(rng), rand_normal(rng), rand_normal(rng),
                        rand_normal(rng), rand_normal(rng), rand_normal(rng)}));
        const double floor = pd_loss(teacher, teacher).item();
        for (int trial = 0; trial < 100; ++trial) {
            std::vector<double> raw(6);
            for (double& v : raw) v = rand_normal(rng);
            Tensor psi = class_probabilities(Tensor::from_data({1, 2, 3}, std::move(raw)));
            CHECK(pd_loss(psi, teacher).item() >= floor - 1e-12);
        }
    }
    SUBCASE("one-hot teacher reduces to cross-entropy on its argmax") {
        Tensor teacher = Tensor::from_data({1, 1, 3}, {0.0, 1.0, 0.0});
        Tensor student = Tensor::from_data({1, 1, 3}, {0.2, 0.5, 0.3});
        CHECK(pd_loss(student, teacher).item() ==
              doctest::Approx(ce_loss(student, {1}).item()).epsilon(1e-12));
    }
    SUBCASE("class-count mismatch rejected") {
        CHECK_THROWS(pd_loss(Tensor::full({1, 1, 3}, 1.0 / 3), Tensor::full({1, 1, 4}, 0.25)));
    }
}

TEST_CASE("kd_old_loss") {
    SUBCASE("matching renormalized distribution gives teacher entropy") {
        // student over 3 classes, first two renormalize to (0.5, 0.5)
        Tensor student = Tensor::from_data({1, 1, 3}, {0.3, 0.3, 0.4});
        Tensor teacher = Tensor::from_data({1, 1, 2}, {0.5, 0.5});
        CHECK(kd_old_loss(student, teacher, 2).item() ==
              doctest::Approx(std::log(2.0)).epsilon(1e-12));
    }
    SUBCASE("single old class is zero") {
        Tensor student = Tensor::from_data({1, 1, 3}, {0.6, 0.2, 0.2});
        Tensor teacher = Tensor::from_data({1, 1, 1}, {1.0});
        CHECK(kd_old_loss(student, teacher, 1).item() == 0.0);
    }
    SUBCASE("hand value for (0.5,0.5) vs renormalized (0.25,0.75)") {
        Tensor student = Tensor::from_data({1, 1, 4}, {0.1, 0.3, 0.5, 0.1});
        Tensor teacher = Tensor::from_data({1, 1, 2}, {0.5, 0.5});
        CHECK(kd_old_loss(student, teacher, 2).item() ==
              doctest::Approx(-0.5 * (std::log(0.25) + std::log(0.75))).epsilon(1e-12));
    }
    SUBCASE("superset violation rejected") {
        CHECK_THROWS(kd_old_loss(Tensor::full({1, 1, 2}, 0.5), Tensor::full({1, 1, 3}, 1.0 / 3), 3));
    }
}

TEST_CASE("l2_feature_loss") {
    Tensor a = Tensor::from_data({1, 1, 2}, {1.0, 2.0});
    CHECK(l2_feature_loss(a, a).item() == 0.0);

    Tensor b = Tensor::from_data({1, 1, 2}, {4.0, 6.0});  // difference (3,4)
    CHECK(l2_feature_loss(a, b).item() == doctest::Approx(25.0).epsilon(1e-12));
    CHECK(l2_feature_loss(a, b).item() == l2_feature_loss(b, a).item());

    CHECK_THROWS(l2_feature_loss(a, Tensor::zeros({1, 2, 2})));
}

TEST_CASE("total_loss composition") {
    Rng rng(59);
    SegModel model = tiny_model(rng, {0, 1});
    model.set_norm_frozen(true);
    SegDataset d = small_synthetic({1}, 2, 201);
    Tensor x = stack0({image_tensor(d, d.images[0]), image_tensor(d, d.images[1])});
    std::vector<int> labels;
    for (const LabeledImage& img : d.images)
        for (std::uint8_t v : img.mask) labels.push_back(model.column_of(v));

    TeacherSet none;
    SUBCASE("lambda zero equals plain cross-entropy bit-exactly") {
        LossConfig cfg;
        cfg.variant = DistillVariant::PD;
        cfg.lambda = 0.0;
        TeacherSet teachers;
        teachers.snapshot = build_teacher(model, small_synthetic({2}, 2, 205, 40), {2});
        const double with_cfg = total_loss(x, labels, model, teachers, cfg).item();
        LossConfig plain;  // variant None
        const double ce_only = total_loss(x, labels, model, none, plain).item();
        CHECK(with_cfg == ce_only);
    }
    SUBCASE("default lambda is 10") {
        CHECK(LossConfig{}.lambda == 10.0);
    }
    SUBCASE("missing teacher is an error") {
        LossConfig cfg;
        cfg.variant = DistillVariant::PD;
        TeacherSet empty;
        CHECK_THROWS(total_loss(x, labels, model, empty, cfg));
        cfg.variant = DistillVariant::KD;
        CHECK_THROWS(total_loss(x, labels, model, empty, cfg));
    }
}

TEST_CASE("pifs objective at step start equals ce plus lambda times teacher entropy") {
    Rng rng(61);
    SegModel prev = tiny_model(rng, {0, 1, 2});
    prev.set_norm_frozen(true);
    prev.set_norm_mode(NormMode::BatchRenorm);
    // realistic running stats
    for (ConvLayer& l : prev.extractor.layers) {
        for (double& v : l.norm.mu_r) v = rand_uniform(rng, -0.3, 0.3);
        for (double& v : l.norm.sigma_r) v = rand_uniform(rng, 0.6, 1.4);
    }
    SegDataset fsl = small_synthetic({3}, 2, 301);
    SegModel student = imprint(prev, fsl, {3});
    TeacherSet teachers;
    teachers.snapshot = build_teacher(prev, fsl, {3});

    Tensor x = stack0({image_tensor(fsl, fsl.images[0]), image_tensor(fsl, fsl.images[1])});
    std::vector<int> labels;
    for (const LabeledImage& img : fsl.images)
        for (std::uint8_t v : img.mask) labels.push_back(student.column_of(v));

    LossConfig cfg;
    cfg.variant = DistillVariant::PD;

    // student == teacher, and renorm training output equals eval output, so
    // the distillation term is the mean teacher entropy
    Tensor tprobs = teachers.snapshot->probs(x);
    const double entropy = pd_loss(tprobs, tprobs).item();
    Tensor student_train_probs = student.forward_probs(x, true);
    const double ce = ce_loss(student_train_probs, labels).item();
    const double total = total_loss(x, labels, student, teachers, cfg).item();
    CHECK(total == doctest::Approx(ce + cfg.lambda * entropy).epsilon(1e-9));
}

TEST_CASE("total_loss gradient matches finite differences on a 4x4 toy") {
    Rng rng(67);
    SyntheticSpec spec;
    spec.height = 4;
    spec.width = 4;
    spec.min_pixels_per_shape = 2;
    spec.shapes_max = 1;
    spec.seed = 9000;
    SegDataset d = generate_dataset(spec, 2, {1});

    // class-2 support images, drawn by hand (a circle cannot fit a 4x4 canvas)
    SegDataset support;
    support.height = 4;
    support.width = 4;
    for (int i = 0; i < 2; ++i) {
        LabeledImage img;
        img.id = 100 + i;
        img.pixels.resize(48);
        Rng prng(500 + i);
        for (double& v : img.pixels) v = rand_uniform(prng, 0.1, 0.9);
        img.mask.assign(16, 0);
        img.mask[5] = img.mask[6] = img.mask[9 + i] = 2;
        support.images.push_back(std::move(img));
    }

    for (DistillVariant variant :
         {DistillVariant::None, DistillVariant::PD, DistillVariant::KD, DistillVariant::L2}) {
        SegModel prev = tiny_model(rng, {0, 1}, {3, 3});
        prev.set_norm_frozen(true);
        SegModel model = variant == DistillVariant::PD ? imprint(prev, support, {2})
                                                       : prev.clone();
        TeacherSet teachers;
        LossConfig cfg;
        cfg.variant = variant;
        cfg.lambda = 3.0;
        if (variant == DistillVariant::PD) teachers.snapshot = build_teacher(prev, support, {2});
        if (variant == DistillVariant::KD || variant == DistillVariant::L2)
            teachers.prev_model = prev.clone();

        Tensor x = stack0({image_tensor(d, d.images[0]), image_tensor(d, d.images[1])});
        std::vector<int> labels;
        for (const LabeledImage& img : d.images)
            for (std::uint8_t v : img.mask) labels.push_back(model.column_of(v));

        auto loss_value = [&]() {
            NoGradScope no_grad;
            return total_loss(x, labels, model, teachers, cfg).item();
        };

        std::vector<Tensor> params = model.parameters();
        std::vector<std::vector<double>> analytic;
        {
            Tape tape;
            TapeScope scope(tape);
            model.zero_grad();
            tape.backward(total_loss(x, labels, model, teachers, cfg));
            for (Tensor& p : params) analytic.push_back(p.grad());
        }
        // Coordinates that agree to within the central-difference noise floor
        // (~|f|*ulp/eps) count as exact; the relative test applies above it.
        const double eps = 1e-6;
        double max_rel = 0.0;
        for (std::size_t pi = 0; pi < params.size(); ++pi) {
            auto& value = params[pi].raw_value();
            for (std::size_t i = 0; i < value.size(); ++i) {
                const double keep = value[i];
                value[i] = keep + eps;
                const double fp = loss_value();
                value[i] = keep - eps;
                const double fm = loss_value();
                value[i] = keep;
                const double central = (fp - fm) / (2 * eps);
                const double a = analytic[pi][i];
                if (std::abs(a - central) < 1e-8) continue;
                max_rel = std::max(max_rel, std::abs(a - central) /
                                                std::max({std::abs(a), std::abs(central), 1e-8}));
            }
        }
        CHECK(max_rel < 1e-5);
    }
}
