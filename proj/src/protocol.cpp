#include "pifs/protocol.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace pifs {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void check(bool cond, const std::string& msg) {
    if (!cond) fail(msg);
}

}  // namespace

ClassSplit make_folds(int n_classes, int fold_size) {
    check(n_classes >= 2, "make_folds: need at least one shape class");
    check(fold_size >= 1, "make_folds: fold size must be positive");
    const int shape_classes = n_classes - 1;
    check(shape_classes % fold_size == 0,
          "make_folds: " + std::to_string(shape_classes) + " shape classes not divisible by fold size " +
              std::to_string(fold_size));
    ClassSplit split;
    for (int c = 1; c < n_classes; ++c) split.all_classes.push_back(c);
    for (int start = 1; start < n_classes; start += fold_size) {
        std::vector<int> fold;
        for (int c = start; c < start + fold_size; ++c) fold.push_back(c);
        split.folds.push_back(std::move(fold));
    }
    return split;
}

SegDataset filter_base_dataset(const SegDataset& pool, const std::set<int>& new_classes) {
    SegDataset out;
    out.height = pool.height;
    out.width = pool.width;
    for (const LabeledImage& img : pool.images) {
        bool has_new = false;
        for (std::uint8_t v : img.mask) has_new = has_new || new_classes.count(v) > 0;
        if (!has_new) out.images.push_back(img);
    }
    if (out.images.empty())
        throw std::runtime_error("filter_base_dataset: no image is free of new classes; "
                                 "base step untrainable");
    return out;
}

SegDataset sample_fsl_dataset(const SegDataset& pool, int k, int shots, Rng& rng) {
    std::vector<std::size_t> eligible;
    for (std::size_t i = 0; i < pool.images.size(); ++i)
        if (image_contains_class(pool.images[i], k)) eligible.push_back(i);
    if (eligible.size() < static_cast<std::size_t>(shots))
        throw std::runtime_error("sample_fsl_dataset: class " + std::to_string(k) + " has " +
                                 std::to_string(eligible.size()) + " eligible image(s), need " +
                                 std::to_string(shots));
    const std::vector<std::size_t> picks =
        sample_without_replacement(rng, eligible.size(), static_cast<std::size_t>(shots));
    SegDataset out;
    out.height = pool.height;
    out.width = pool.width;
    for (std::size_t p : picks) out.images.push_back(pool.images[eligible[p]]);
    return out;
}

std::vector<std::uint8_t> relabel_strict(const std::vector<std::uint8_t>& mask,
                                         const std::set<int>& old_classes) {
    std::vector<std::uint8_t> out = mask;
    for (std::uint8_t& v : out)
        if (v != 0 && v != kIgnoreIndex && old_classes.count(v)) v = 0;
    return out;
}

double poly_lr(int iter, int max_iter, double lr_init) {
    check(max_iter > 0, "poly_lr: max_iter must be positive");
    check(iter >= 0 && iter <= max_iter,
          "poly_lr: iter " + std::to_string(iter) + " outside [0, " + std::to_string(max_iter) + "]");
    return lr_init * std::pow(1.0 - static_cast<double>(iter) / max_iter, 0.9);
}

SgdOptimizer::SgdOptimizer(std::vector<Tensor> params, double momentum, double weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    velocity_.reserve(params_.size());
    for (const Tensor& p : params_) velocity_.emplace_back(p.size(), 0.0);
}

void SgdOptimizer::step(double lr) {
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
        Tensor& p = params_[pi];
        check(p.grad().size() == p.size(),
              "sgd: parameter " + std::to_string(pi) + " has no gradient");
        auto& value = p.raw_value();
        const auto& grad = p.grad();
        auto& vel = velocity_[pi];
        for (std::size_t i = 0; i < value.size(); ++i) {
            vel[i] = momentum_ * vel[i] + (grad[i] + weight_decay_ * value[i]);
            value[i] -= lr * vel[i];
        }
    }
}

void SgdOptimizer::zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
}

namespace {

std::vector<int> columns_of_batch(const SegModel& model, const SegDataset& dset,
                                  const std::vector<std::size_t>& indices,
                                  const std::vector<bool>& flips) {
    std::vector<int> labels;
    labels.reserve(indices.size() * dset.height * dset.width);
    for (std::size_t b = 0; b < indices.size(); ++b) {
        const std::vector<std::uint8_t> mask = mask_of(dset, dset.images[indices[b]], flips[b]);
        for (std::uint8_t v : mask) {
            if (v == kIgnoreIndex) {
                labels.push_back(kIgnoreIndex);
                continue;
            }
            const int col = model.column_of(v);
            if (col < 0)
                fail("training: mask label " + std::to_string(v) +
                     " is not in the model's class set");
            labels.push_back(col);
        }
    }
    return labels;
}

// One learning step's optimization loop; a fresh optimizer per call keeps
// velocity buffers step-local.
void train_model(SegModel& model, const SegDataset& dset, TeacherSet& teachers,
                 const LossConfig& loss_cfg, const TrainerConfig& trainer, int iters,
                 double lr_init, Rng& rng) {
    check(!dset.empty(), "training: empty dataset");
    const std::size_t batch =
        std::min<std::size_t>(static_cast<std::size_t>(trainer.batch_cap), dset.size());
    SgdOptimizer opt(model.parameters(), trainer.momentum, trainer.weight_decay);
    for (int iter = 0; iter < iters; ++iter) {
        const std::vector<std::size_t> indices =
            sample_without_replacement(rng, dset.size(), batch);
        std::vector<bool> flips(batch, false);
        if (trainer.hflip)
            for (std::size_t b = 0; b < batch; ++b) flips[b] = rand_unit(rng) < 0.5;

        std::vector<Tensor> images;
        images.reserve(batch);
        for (std::size_t b = 0; b < batch; ++b)
            images.push_back(image_tensor(dset, dset.images[indices[b]], flips[b]));
        Tensor x = stack0(images);
        const std::vector<int> labels = columns_of_batch(model, dset, indices, flips);

        Tape tape;
        TapeScope scope(tape);
        opt.zero_grad();
        Tensor loss = total_loss(x, labels, model, teachers, loss_cfg);
        tape.backward(loss);
        opt.step(poly_lr(iter, iters, lr_init));
    }
}

std::vector<double> random_unit_column(int d, Rng& rng) {
    std::vector<double> col(d);
    double sq = 0.0;
    for (double& v : col) {
        v = rand_normal(rng);
        sq += v * v;
    }
    const double norm = std::sqrt(sq);
    for (double& v : col) v /= norm;
    return col;
}

SegModel append_random_columns(const SegModel& model, const std::set<int>& new_classes,
                               Rng& rng) {
    SegModel out = model.clone();
    const int d = out.classifier.feature_dim();
    const int old_cols = out.classifier.num_classes();
    const int new_cols = old_cols + static_cast<int>(new_classes.size());
    std::vector<std::vector<double>> cols;
    for (int k : new_classes) {
        check(!model.has_class(k), "ft init: class " + std::to_string(k) + " already present");
        cols.push_back(random_unit_column(d, rng));
    }
    const auto& old_w = model.classifier.weight.value();
    std::vector<double> w(static_cast<std::size_t>(d) * new_cols);
    for (int j = 0; j < d; ++j) {
        for (int c = 0; c < old_cols; ++c)
            w[static_cast<std::size_t>(j) * new_cols + c] =
                old_w[static_cast<std::size_t>(j) * old_cols + c];
        for (std::size_t n = 0; n < cols.size(); ++n)
            w[static_cast<std::size_t>(j) * new_cols + old_cols + n] = cols[n][j];
    }
    out.classifier.weight = Tensor::from_data({d, new_cols}, std::move(w))
                                .set_requires_grad(model.classifier.weight.requires_grad());
    for (int k : new_classes) out.class_ids.push_back(k);
    return out;
}

}  // namespace

ProtocolState run_base_step(const ProtocolConfig& cfg, const ClassSplit& split, int fold,
                            const SegDataset& pool, Rng& rng) {
    check(fold >= 0 && fold < static_cast<int>(split.folds.size()),
          "run_base_step: fold " + std::to_string(fold) + " out of range");
    const std::set<int> new_classes(split.folds[fold].begin(), split.folds[fold].end());
    const SegDataset base_pool = filter_base_dataset(pool, new_classes);

    std::vector<int> base_ids = {0};
    for (int c : split.all_classes)
        if (!new_classes.count(c)) base_ids.push_back(c);

    SegModel model = build_model(cfg.model, base_ids, rng);
    TeacherSet no_teachers;
    LossConfig ce_only;
    train_model(model, base_pool, no_teachers, ce_only, cfg.trainer, cfg.trainer.iters_base,
                cfg.trainer.lr_base, rng);

    // Running statistics are frozen from here on; FSL steps must not shift
    // them toward the new classes.
    model.set_norm_frozen(true);

    ProtocolState state;
    state.step = 0;
    state.model = std::move(model);
    state.current_classes = base_ids;
    state.new_classes = base_ids;
    state.norm_frozen = true;
    return state;
}

ProtocolState run_fsl_step(const ProtocolState& state, const SegDataset& fsl_dataset,
                           const std::set<int>& new_classes, const MethodSpec& method,
                           const ProtocolConfig& cfg, Rng& rng) {
    check(!new_classes.empty(), "run_fsl_step: no new classes");

    SegModel prev = state.model.clone();
    prev.set_trainable(false);

    SegModel model = state.model.clone();
    model.set_norm_mode(method.norm_mode);
    model.set_norm_frozen(true);

    if (method.imprint)
        model = imprint(model, fsl_dataset, new_classes);
    else
        model = append_random_columns(model, new_classes, rng);

    TeacherSet teachers;
    if (method.distill == DistillVariant::PD)
        teachers.snapshot = build_teacher(prev, fsl_dataset, new_classes);
    if (method.distill == DistillVariant::KD || method.distill == DistillVariant::L2)
        teachers.prev_model = prev.clone();

    if (method.finetune) {
        LossConfig loss_cfg;
        loss_cfg.variant = method.distill;
        loss_cfg.lambda = method.lambda;
        train_model(model, fsl_dataset, teachers, loss_cfg, cfg.trainer, cfg.trainer.iters_fsl,
                    cfg.trainer.lr_fsl, rng);
    }

    ProtocolState next;
    next.step = state.step + 1;
    next.model = std::move(model);
    next.current_classes = state.current_classes;
    for (int k : new_classes) next.current_classes.push_back(k);
    next.new_classes.assign(new_classes.begin(), new_classes.end());
    next.prev_model = std::move(prev);
    next.norm_frozen = true;
    return next;
}

MetricsReport evaluate_model(SegModel& model, const SegDataset& val,
                             const std::vector<int>& base_classes,
                             const std::vector<int>& new_classes,
                             bool include_background_in_base) {
    NoGradScope no_grad;
    int n_classes = 1;
    for (int c : base_classes) n_classes = std::max(n_classes, c + 1);
    for (int c : new_classes) n_classes = std::max(n_classes, c + 1);

    std::set<int> seen(model.class_ids.begin(), model.class_ids.end());
    ConfusionAccumulator acc(n_classes);
    const int n_cols = model.num_classes();
    for (const LabeledImage& img : val.images) {
        Tensor probs = model.forward_probs(stack0({image_tensor(val, img)}), false);
        const auto& pv = probs.value();
        const std::size_t pixels = img.mask.size();
        std::vector<std::uint8_t> pred(pixels);
        for (std::size_t p = 0; p < pixels; ++p) {
            int best = 0;
            double best_v = pv[p * n_cols];
            for (int c = 1; c < n_cols; ++c)
                if (pv[p * n_cols + c] > best_v) {
                    best_v = pv[p * n_cols + c];
                    best = c;
                }
            pred[p] = static_cast<std::uint8_t>(model.class_ids[best]);
        }
        std::vector<std::uint8_t> gt = img.mask;
        for (std::uint8_t& v : gt)
            if (v != kIgnoreIndex && !seen.count(v)) v = kIgnoreIndex;
        confusion_update(acc, pred, gt);
    }

    MetricsReport report;
    report.iou_per_class = iou_per_class(acc);
    std::vector<int> base_eval;
    for (int c : base_classes)
        if (c != 0 || include_background_in_base) base_eval.push_back(c);
    report.miou_base = miou(acc, base_eval);
    report.miou_new = new_classes.empty() ? 0.0 : miou(acc, new_classes);
    report.hm = harmonic_mean(report.miou_base, report.miou_new);
    report.base_classes = base_classes;
    report.new_classes = new_classes;
    return report;
}

ProtocolState BaseModelCache::get(int fold) {
    Slot* slot;
    {
        std::lock_guard<std::mutex> lock(mutex_);
        auto& entry = slots_[fold];
        if (!entry) entry = std::make_unique<Slot>();
        slot = entry.get();
    }
    std::call_once(slot->once, [&] { slot->state = std::make_shared<ProtocolState>(builder_(fold)); });

    const ProtocolState& cached = *slot->state;
    ProtocolState copy;
    copy.step = cached.step;
    copy.model = cached.model.clone();
    copy.current_classes = cached.current_classes;
    copy.new_classes = cached.new_classes;
    if (cached.prev_model) copy.prev_model = cached.prev_model->clone();
    copy.norm_frozen = cached.norm_frozen;
    return copy;
}

namespace {

// Protocol annotation of a few-shot dataset: new classes keep their labels,
// previous classes stay (or become background under strict), classes the
// model has never seen are unannotated background.
SegDataset annotate_fsl_dataset(const SegDataset& sampled, const std::set<int>& current,
                                const std::set<int>& new_classes, bool strict) {
    SegDataset out = sampled;
    for (LabeledImage& img : out.images) {
        for (std::uint8_t& v : img.mask) {
            if (v == kIgnoreIndex || v == 0) continue;
            if (new_classes.count(v)) continue;
            if (current.count(v)) {
                if (strict) v = 0;
                continue;
            }
            v = 0;
        }
    }
    return out;
}

}  // namespace

TrialResult run_trial(const ProtocolConfig& cfg, const MethodSpec& method,
                      const Benchmark& bench, BaseModelCache* cache, int fold, int trial,
                      const StepObserver& observer) {
    const ClassSplit split = make_folds(bench.n_classes, cfg.fold_size);
    check(cfg.shots == 1 || cfg.shots == 2 || cfg.shots == 5,
          "run_experiment: shots must be 1, 2 or 5");
    check(fold >= 0 && fold < static_cast<int>(split.folds.size()),
          "run_experiment: fold " + std::to_string(fold) + " out of range");

    int steps = 1;
    int classes_per_step = cfg.fold_size;
    if (cfg.setting == Setting::MS) {
        steps = cfg.ms_steps > 0 ? cfg.ms_steps : cfg.fold_size;
        check(cfg.fold_size % steps == 0,
              "run_experiment: ms_steps " + std::to_string(steps) +
                  " does not divide fold size " + std::to_string(cfg.fold_size));
        classes_per_step = cfg.fold_size / steps;
    }

    ProtocolState state;
    if (cache) {
        state = cache->get(fold);
    } else {
        Rng rng(mix_seed(cfg.seed, 0xBA5Eu, static_cast<std::uint64_t>(fold)));
        state = run_base_step(cfg, split, fold, bench.train_pool, rng);
    }
    const std::vector<int> base_ids = state.current_classes;
    Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(fold),
                     static_cast<std::uint64_t>(trial), 0xF51u));

    TrialResult result;
    std::vector<int> seen_new;
    for (int s = 0; s < steps; ++s) {
        std::set<int> step_classes;
        for (int i = 0; i < classes_per_step; ++i)
            step_classes.insert(split.folds[fold][s * classes_per_step + i]);

        // Union of the per-class samples, deduplicated by image id.
        SegDataset sampled;
        sampled.height = bench.train_pool.height;
        sampled.width = bench.train_pool.width;
        std::set<int> taken;
        for (int k : step_classes) {
            SegDataset per_class = sample_fsl_dataset(bench.train_pool, k, cfg.shots, rng);
            for (LabeledImage& img : per_class.images)
                if (taken.insert(img.id).second) sampled.images.push_back(std::move(img));
        }

        const std::set<int> current(state.current_classes.begin(),
                                    state.current_classes.end());
        SegDataset fsl = annotate_fsl_dataset(sampled, current, step_classes, cfg.strict);
        if (cfg.strict) {
            for (const LabeledImage& img : fsl.images)
                for (std::uint8_t v : img.mask)
                    if (v != 0 && v != kIgnoreIndex && current.count(v) &&
                        !step_classes.count(v))
                        throw std::logic_error(
                            "strict mode: old-class label survived relabeling");
        }

        state = run_fsl_step(state, fsl, step_classes, method, cfg, rng);
        for (int k : step_classes) seen_new.push_back(k);

        if (observer) {
            StepObservation obs;
            obs.fold = fold;
            obs.trial = trial;
            obs.step = s + 1;
            obs.train_dataset = &fsl;
            obs.state = &state;
            obs.batch_size = static_cast<int>(std::min<std::size_t>(
                static_cast<std::size_t>(cfg.trainer.batch_cap), fsl.size()));
            observer(obs);
        }

        MetricsReport report = evaluate_model(state.model, bench.val_pool, base_ids, seen_new,
                                              cfg.include_background_in_base);
        report.fold_index = fold;
        report.trial_index = trial;
        report.step_index = s + 1;
        result.reports.push_back(std::move(report));
    }
    result.final_model = std::move(state.model);
    return result;
}

std::vector<MetricsReport> run_experiment(const ProtocolConfig& cfg, const MethodSpec& method,
                                          const Benchmark& bench, BaseModelCache* cache,
                                          const StepObserver& observer) {
    std::vector<MetricsReport> reports;
    for (int fold : cfg.folds)
        for (int trial = 0; trial < cfg.trials; ++trial) {
            TrialResult trial_result =
                run_trial(cfg, method, bench, cache, fold, trial, observer);
            for (MetricsReport& r : trial_result.reports) reports.push_back(std::move(r));
        }
    return reports;
}

}  // namespace pifs
