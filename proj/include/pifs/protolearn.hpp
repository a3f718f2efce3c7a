#pragma once

#include <optional>
#include <set>
#include <vector>

#include "pifs/data.hpp"
#include "pifs/nn.hpp"
#include "pifs/tensor.hpp"

namespace pifs {

/// Indicator of class k over a label mask.
std::vector<std::uint8_t> binary_mask(const std::vector<std::uint8_t>& labels, int k);

/// Masked-average-pooled prototype for class k: per image, the mean of
/// unit-normalized pixel features over the class pixels, then the mean over
/// the images that contain the class. Features run in eval mode.
std::vector<double> map_prototype(const SegDataset& dataset, int k, FeatureExtractor& fx);

/// Extends the classifier with one MAP column per new class (ascending class
/// index). Old columns are preserved bit for bit.
SegModel imprint(const SegModel& model, const SegDataset& dataset,
                 const std::set<int>& new_classes);

/// The previous extractor with the classifier extended by imprinted
/// prototypes. Deep-copied and gradient-isolated.
struct TeacherSnapshot {
    SegModel model;

    Tensor probs(const Tensor& images) const;
    Tensor features(const Tensor& images) const;
};

TeacherSnapshot build_teacher(const SegModel& prev_model, const SegDataset& dataset,
                              const std::set<int>& new_classes);

/// Mean of -log p(true class) over non-ignored pixels. Labels are column
/// indices into the probability axis, flattened in pixel order.
Tensor ce_loss(const Tensor& probs, const std::vector<int>& labels,
               int ignore_index = kIgnoreIndex);

/// Mean per-pixel cross-entropy H(teacher, student) over the full class set.
Tensor pd_loss(const Tensor& student_probs, const Tensor& teacher_probs);

/// Cross-entropy between the teacher distribution over old classes and the
/// student renormalized over those classes (old classes = leading columns).
Tensor kd_old_loss(const Tensor& student_probs, const Tensor& teacher_old_probs, int n_old);

/// Mean over pixels of the squared feature distance.
Tensor l2_feature_loss(const Tensor& student_features, const Tensor& teacher_features);

enum class DistillVariant { None, PD, KD, L2 };

struct LossConfig {
    double lambda = 10.0;
    DistillVariant variant = DistillVariant::None;
};

struct TeacherSet {
    std::optional<TeacherSnapshot> snapshot;  // PD target
    std::optional<SegModel> prev_model;       // KD / L2 target
};

/// Combined objective on one batch: CE plus lambda times the configured
/// distillation term.
Tensor total_loss(const Tensor& images, const std::vector<int>& labels, SegModel& model,
                  TeacherSet& teachers, const LossConfig& cfg);

}  // namespace pifs
