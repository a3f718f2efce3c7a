#include "pifs/protolearn.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace pifs {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void check(bool cond, const std::string& msg) {
    if (!cond) fail(msg);
}

std::string pixel_coords(const Shape& probs_shape, std::size_t flat_pixel) {
    // probs_shape is [...,C]; decode the pixel index over the leading axes.
    std::ostringstream os;
    os << "(";
    std::vector<std::size_t> coords(probs_shape.size() - 1);
    std::size_t rem = flat_pixel;
    for (std::size_t ax = probs_shape.size() - 1; ax-- > 0;) {
        coords[ax] = rem % static_cast<std::size_t>(probs_shape[ax]);
        rem /= static_cast<std::size_t>(probs_shape[ax]);
    }
    for (std::size_t ax = 0; ax < coords.size(); ++ax) os << (ax ? ", " : "") << coords[ax];
    os << ")";
    return os.str();
}

}  // namespace

std::vector<std::uint8_t> binary_mask(const std::vector<std::uint8_t>& labels, int k) {
    std::vector<std::uint8_t> out(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) out[i] = labels[i] == k ? 1 : 0;
    return out;
}

std::vector<double> map_prototype(const SegDataset& dataset, int k, FeatureExtractor& fx) {
    NoGradScope no_grad;
    const int d = fx.feature_dim();
    std::vector<double> sum(d, 0.0);
    int images_with_class = 0;

    for (const LabeledImage& img : dataset.images) {
        if (!image_contains_class(img, k)) continue;
        Tensor feats = fx.forward(stack0({image_tensor(dataset, img)}), false);  // [1,H,W,d]
        const auto& fv = feats.value();
        const std::size_t pixels = img.mask.size();

        std::vector<double> image_sum(d, 0.0);
        long count = 0;
        for (std::size_t p = 0; p < pixels; ++p) {
            if (img.mask[p] != k) continue;
            double sq = 0.0;
            for (int j = 0; j < d; ++j) sq += fv[p * d + j] * fv[p * d + j];
            const double norm = std::sqrt(sq);
            if (!(norm >= kEpsilonNorm))
                fail("map_prototype: degenerate feature norm at a pixel of class " +
                     std::to_string(k) + " (image id " + std::to_string(img.id) + ")");
            for (int j = 0; j < d; ++j) image_sum[j] += fv[p * d + j] / norm;
            ++count;
        }
        for (int j = 0; j < d; ++j) sum[j] += image_sum[j] / static_cast<double>(count);
        ++images_with_class;
    }

    if (images_with_class == 0)
        fail("map_prototype: no image contains class " + std::to_string(k));
    for (double& v : sum) v /= static_cast<double>(images_with_class);
    return sum;
}

SegModel imprint(const SegModel& model, const SegDataset& dataset,
                 const std::set<int>& new_classes) {
    check(!new_classes.empty(), "imprint: empty class set");
    for (int k : new_classes)
        if (model.has_class(k))
            fail("imprint: class " + std::to_string(k) + " already present");

    SegModel out = model.clone();
    const int d = out.classifier.feature_dim();
    const int old_cols = out.classifier.num_classes();
    const int new_cols = old_cols + static_cast<int>(new_classes.size());

    std::vector<std::vector<double>> prototypes;
    prototypes.reserve(new_classes.size());
    for (int k : new_classes)  // std::set iterates ascending
        prototypes.push_back(map_prototype(dataset, k, out.extractor));

    const auto& old_w = model.classifier.weight.value();
    std::vector<double> w(static_cast<std::size_t>(d) * new_cols);
    for (int j = 0; j < d; ++j) {
        for (int c = 0; c < old_cols; ++c)
            w[static_cast<std::size_t>(j) * new_cols + c] =
                old_w[static_cast<std::size_t>(j) * old_cols + c];
        for (std::size_t n = 0; n < prototypes.size(); ++n)
            w[static_cast<std::size_t>(j) * new_cols + old_cols + n] = prototypes[n][j];
    }
    out.classifier.weight = Tensor::from_data({d, new_cols}, std::move(w))
                                .set_requires_grad(model.classifier.weight.requires_grad());
    for (int k : new_classes) out.class_ids.push_back(k);
    return out;
}

Tensor TeacherSnapshot::probs(const Tensor& images) const {
    NoGradScope no_grad;
    SegModel& m = const_cast<SegModel&>(model);  // eval forward does not mutate
    return m.forward_probs(images, false);
}

Tensor TeacherSnapshot::features(const Tensor& images) const {
    NoGradScope no_grad;
    SegModel& m = const_cast<SegModel&>(model);
    return m.features(images, false);
}

TeacherSnapshot build_teacher(const SegModel& prev_model, const SegDataset& dataset,
                              const std::set<int>& new_classes) {
    TeacherSnapshot teacher{imprint(prev_model, dataset, new_classes)};
    teacher.model.set_trainable(false);
    return teacher;
}

Tensor ce_loss(const Tensor& probs, const std::vector<int>& labels, int ignore_index) {
    check(probs.rank() >= 1, "ce_loss: scalar probabilities");
    const int n_classes = probs.shape().back();
    const std::size_t pixels = probs.size() / static_cast<std::size_t>(n_classes);
    check(labels.size() == pixels, "ce_loss: " + std::to_string(labels.size()) +
                                       " labels for " + std::to_string(pixels) + " pixels");

    const auto& pv = probs.value();
    double acc = 0.0;
    long kept = 0;
    for (std::size_t p = 0; p < pixels; ++p) {
        const int y = labels[p];
        if (y == ignore_index) continue;
        if (y < 0 || y >= n_classes)
            fail("ce_loss: label " + std::to_string(y) + " outside the class set at pixel " +
                 pixel_coords(probs.shape(), p));
        acc -= std::log(pv[p * n_classes + y]);
        ++kept;
    }
    check(kept > 0, "ce_loss: every pixel is ignored");
    Tensor out = Tensor::scalar(acc / static_cast<double>(kept));

    if (Tape* tape = active_tape(); tape && probs.requires_grad()) {
        out.set_requires_grad(true);
        const double inv_n = 1.0 / static_cast<double>(kept);
        tape->record("ce_loss", {probs}, out,
                     [labels, n_classes, pixels, inv_n, ignore_index](Tape::Node& node) {
                         auto* pi = node.inputs[0].get();
                         const double g = node.output->grad[0];
                         for (std::size_t p = 0; p < pixels; ++p) {
                             const int y = labels[p];
                             if (y == ignore_index) continue;
                             const std::size_t idx = p * n_classes + y;
                             pi->grad[idx] -= g * inv_n / pi->value[idx];
                         }
                     });
    }
    return out;
}

namespace {

// -mean_i sum_c target_c log(probs_c); targets carry no gradient.
Tensor cross_entropy_mean(const Tensor& target_probs, const Tensor& probs) {
    Tensor ll = mul(target_probs, log(probs));
    Tensor per_pixel = reduce_sum(ll, ll.rank() - 1);
    return scale(reduce_mean(per_pixel), -1.0);
}

}  // namespace

Tensor pd_loss(const Tensor& student_probs, const Tensor& teacher_probs) {
    check(student_probs.shape() == teacher_probs.shape(),
          "pd_loss: class-count mismatch, student " + shape_str(student_probs.shape()) +
              " vs teacher " + shape_str(teacher_probs.shape()) +
              " (teacher built before imprinting?)");
    return cross_entropy_mean(teacher_probs, student_probs);
}

Tensor kd_old_loss(const Tensor& student_probs, const Tensor& teacher_old_probs, int n_old) {
    check(n_old >= 1, "kd_old_loss: empty old-class set");
    check(student_probs.shape().back() >= n_old,
          "kd_old_loss: old classes are not a subset of the student's " +
              std::to_string(student_probs.shape().back()) + " classes");
    check(teacher_old_probs.shape().back() == n_old,
          "kd_old_loss: teacher emits " + std::to_string(teacher_old_probs.shape().back()) +
              " classes, expected " + std::to_string(n_old));
    Tensor sliced = slice_last(student_probs, 0, n_old);
    Tensor renorm = renormalize_last(sliced);
    return cross_entropy_mean(teacher_old_probs, renorm);
}

Tensor l2_feature_loss(const Tensor& student_features, const Tensor& teacher_features) {
    check(student_features.shape() == teacher_features.shape(),
          "l2_feature_loss: shape mismatch " + shape_str(student_features.shape()) + " vs " +
              shape_str(teacher_features.shape()));
    Tensor diff = sub(student_features, teacher_features);
    Tensor sq = mul(diff, diff);
    return reduce_mean(reduce_sum(sq, sq.rank() - 1));
}

Tensor total_loss(const Tensor& images, const std::vector<int>& labels, SegModel& model,
                  TeacherSet& teachers, const LossConfig& cfg) {
    Tensor features = model.features(images, true);
    Tensor probs = class_probabilities(model.classifier.scores(features));
    Tensor ce = ce_loss(probs, labels);
    if (cfg.variant == DistillVariant::None || cfg.lambda == 0.0) return ce;

    Tensor distill;
    switch (cfg.variant) {
        case DistillVariant::PD: {
            check(teachers.snapshot.has_value(), "total_loss: PD requires a teacher snapshot");
            distill = pd_loss(probs, teachers.snapshot->probs(images));
            break;
        }
        case DistillVariant::KD: {
            check(teachers.prev_model.has_value(),
                  "total_loss: KD requires the previous-step model");
            Tensor tprobs;
            {
                NoGradScope no_grad;
                tprobs = teachers.prev_model->forward_probs(images, false);
            }
            distill = kd_old_loss(probs, tprobs, teachers.prev_model->num_classes());
            break;
        }
        case DistillVariant::L2: {
            check(teachers.prev_model.has_value(),
                  "total_loss: L2 requires the previous-step model");
            Tensor tfeats;
            {
                NoGradScope no_grad;
                tfeats = teachers.prev_model->features(images, false);
            }
            distill = l2_feature_loss(features, tfeats);
            break;
        }
        default:
            fail("total_loss: unknown distillation variant");
    }
    return add(ce, scale(distill, cfg.lambda));
}

}  // namespace pifs
