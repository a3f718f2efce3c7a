#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pifs/rng.hpp"
#include "pifs/tensor.hpp"

namespace pifs {

enum class NormMode { BatchNorm, BatchRenorm };

/// Per-channel normalization with learnable affine and running statistics.
/// In eval mode both modes normalize by the running statistics; the modes
/// differ only in training behavior.
struct NormLayer {
    Tensor gamma;                 // [C], learnable
    Tensor beta;                  // [C], learnable
    std::vector<double> mu_r;     // running mean, one per channel
    std::vector<double> sigma_r;  // running std, one per channel, > 0
    double momentum = 0.1;
    NormMode mode = NormMode::BatchNorm;
    bool frozen = false;

    // Renorm ratio clipping (off by default; the renorm forward is used
    // unclipped unless configured otherwise).
    bool clip_rd = false;
    double r_max = 3.0;
    double d_max = 5.0;

    // Test hooks: when set, the renorm correction terms are taken from here
    // instead of the batch, so finite differences can hold them constant.
    // last_r/last_d capture what the latest renorm training forward used.
    std::optional<std::vector<double>> pin_r;
    std::optional<std::vector<double>> pin_d;
    std::vector<double> last_r;
    std::vector<double> last_d;

    static NormLayer make(int channels);

    int channels() const { return gamma.shape()[0]; }

    /// z is [B,C,H,W]. Training behavior depends on `mode`; running stats
    /// update by EMA only when training and not frozen.
    Tensor forward(const Tensor& z, bool training);

    NormLayer clone() const;
};

constexpr double kVarianceEps = 1e-5;

struct ConvLayer {
    Tensor kernel;  // [Cout,Cin,3,3], learnable
    Tensor bias;    // [Cout], learnable
    NormLayer norm;
    bool use_relu = true;

    static ConvLayer make(int in_channels, int out_channels, Rng& rng);

    Tensor forward(const Tensor& x4, bool training);  // [B,Cin,H,W]->[B,Cout,H,W]
    ConvLayer clone() const;
};

/// Stack of padded 3x3 conv blocks; output spatial size equals input size.
struct FeatureExtractor {
    std::vector<ConvLayer> layers;

    int in_channels() const { return layers.front().kernel.shape()[1]; }
    int feature_dim() const { return layers.back().kernel.shape()[0]; }

    /// [B,C,H,W] -> per-pixel features [B,H,W,d].
    Tensor forward(const Tensor& images, bool training);

    FeatureExtractor clone() const;
};

/// Prototype columns in a cosine-similarity space, scores scaled into
/// [-tau, tau].
struct CosineClassifier {
    Tensor weight;  // [d, C], column c is the prototype of class c
    double tau = 10.0;

    int feature_dim() const { return weight.shape()[0]; }
    int num_classes() const { return weight.shape()[1]; }

    Tensor scores(const Tensor& features) const;  // [...,d] -> [...,C]
    CosineClassifier clone() const;
};

Tensor class_probabilities(const Tensor& scores);

struct SegModel {
    FeatureExtractor extractor;
    CosineClassifier classifier;
    std::vector<int> class_ids;  // column -> dataset label, class_ids[0] == 0
    int n_base = 0;              // |C^0|, set after the base step

    int num_classes() const { return classifier.num_classes(); }
    bool has_class(int label) const;
    int column_of(int label) const;  // -1 when unknown

    Tensor features(const Tensor& images, bool training) {
        return extractor.forward(images, training);
    }
    Tensor forward_scores(const Tensor& images, bool training);
    Tensor forward_probs(const Tensor& images, bool training);

    std::vector<Tensor> parameters();
    std::vector<std::pair<std::string, Tensor>> named_parameters();
    void set_trainable(bool trainable);
    void zero_grad();

    void set_norm_mode(NormMode mode);
    void set_norm_frozen(bool frozen);

    SegModel clone() const;
};

struct ModelConfig {
    std::vector<int> channels = {16, 16, 16};  // conv widths; last is d
    double tau = 10.0;
    double bn_momentum = 0.1;
    bool br_clip = false;
};

/// Fresh model over `class_ids` with near-uniform initial predictions: conv
/// stacks are He-initialized, prototype columns start as small jitters of a
/// shared direction so initial class scores are almost equal.
SegModel build_model(const ModelConfig& cfg, const std::vector<int>& class_ids, Rng& rng);

// Checkpoint file: magic "PIFS1", then per entry: u32 name length, name
// bytes, u32 rank, u64 dims, little-endian f64 payload. Bit-exact round-trip.
void save_checkpoint(const std::string& path, SegModel& model);
SegModel load_checkpoint(const std::string& path);

}  // namespace pifs
