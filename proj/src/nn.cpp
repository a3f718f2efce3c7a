#include "pifs/nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace pifs {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void check(bool cond, const std::string& msg) {
    if (!cond) fail(msg);
}

Tensor constant_vec(const std::vector<double>& v) {
    return Tensor::from_data({static_cast<int>(v.size())}, v);
}

}  // namespace

// --- NormLayer ---

NormLayer NormLayer::make(int channels) {
    NormLayer layer;
    layer.gamma = Tensor::full({channels}, 1.0).set_requires_grad(true);
    layer.beta = Tensor::zeros({channels}).set_requires_grad(true);
    layer.mu_r.assign(channels, 0.0);
    layer.sigma_r.assign(channels, 1.0);
    return layer;
}

Tensor NormLayer::forward(const Tensor& z, bool training) {
    check(z.rank() == 4, "norm: expected [B,C,H,W], got " + shape_str(z.shape()));
    const int c = z.shape()[1];
    check(c == channels(), "norm: channel mismatch, input has " + std::to_string(c) +
                               ", layer has " + std::to_string(channels()));

    if (!training) {
        Tensor centered = bcast_sub(z, constant_vec(mu_r), 1);
        Tensor xhat = bcast_div(centered, constant_vec(sigma_r), 1);
        return bcast_add(bcast_mul(xhat, gamma, 1), beta, 1);
    }

    const std::size_t per_channel =
        static_cast<std::size_t>(z.shape()[0]) * z.shape()[2] * z.shape()[3];
    check(per_channel >= 2, "norm: training batch has " + std::to_string(per_channel) +
                                " element(s) per channel; batch statistics undefined");

    // Batch statistics as graph nodes: gradient flows through them.
    Tensor mu = reduce_mean(reduce_mean(reduce_mean(z, 3), 2), 0);
    Tensor centered = bcast_sub(z, mu, 1);
    Tensor var = reduce_mean(reduce_mean(reduce_mean(mul(centered, centered), 3), 2), 0);
    Tensor sigma = sqrt(add_scalar(var, kVarianceEps));
    Tensor xhat = bcast_div(centered, sigma, 1);

    Tensor normalized;
    if (mode == NormMode::BatchNorm) {
        normalized = xhat;
    } else {
        // Renorm correction: r and d carry no gradient, so the value equals
        // running-stat normalization while the gradient keeps the batch path.
        std::vector<double> r(c), d(c);
        for (int i = 0; i < c; ++i) {
            r[i] = sigma.value()[i] / sigma_r[i];
            d[i] = (mu.value()[i] - mu_r[i]) / sigma_r[i];
            if (clip_rd) {
                r[i] = std::clamp(r[i], 1.0 / r_max, r_max);
                d[i] = std::clamp(d[i], -d_max, d_max);
            }
        }
        if (pin_r) r = *pin_r;
        if (pin_d) d = *pin_d;
        last_r = r;
        last_d = d;
        normalized = bcast_add(bcast_mul(xhat, constant_vec(r), 1), constant_vec(d), 1);
    }

    if (!frozen) {
        for (int i = 0; i < c; ++i) {
            mu_r[i] = (1.0 - momentum) * mu_r[i] + momentum * mu.value()[i];
            sigma_r[i] = (1.0 - momentum) * sigma_r[i] + momentum * sigma.value()[i];
        }
    }
    return bcast_add(bcast_mul(normalized, gamma, 1), beta, 1);
}

NormLayer NormLayer::clone() const {
    NormLayer copy = *this;
    copy.gamma = gamma.clone();
    copy.beta = beta.clone();
    return copy;
}

// --- ConvLayer / FeatureExtractor ---

ConvLayer ConvLayer::make(int in_channels, int out_channels, Rng& rng) {
    ConvLayer layer;
    const double stddev = std::sqrt(2.0 / (9.0 * in_channels));
    std::vector<double> k(static_cast<std::size_t>(out_channels) * in_channels * 9);
    for (double& v : k) v = stddev * rand_normal(rng);
    layer.kernel =
        Tensor::from_data({out_channels, in_channels, 3, 3}, std::move(k)).set_requires_grad(true);
    // The following normalization cancels any constant shift, so the conv
    // bias is redundant here; it stays zero and untrainable.
    layer.bias = Tensor::zeros({out_channels});
    layer.norm = NormLayer::make(out_channels);
    return layer;
}

Tensor ConvLayer::forward(const Tensor& x4, bool training) {
    check(x4.rank() == 4, "conv layer: expected [B,C,H,W], got " + shape_str(x4.shape()));
    const int batch = x4.shape()[0];
    std::vector<Tensor> outs;
    outs.reserve(batch);
    for (int b = 0; b < batch; ++b) outs.push_back(conv2d(select0(x4, b), kernel, bias));
    Tensor y = norm.forward(stack0(outs), training);
    return use_relu ? relu(y) : y;
}

ConvLayer ConvLayer::clone() const {
    ConvLayer copy;
    copy.kernel = kernel.clone();
    copy.bias = bias.clone();
    copy.norm = norm.clone();
    copy.use_relu = use_relu;
    return copy;
}

Tensor FeatureExtractor::forward(const Tensor& images, bool training) {
    Tensor x = images;
    for (ConvLayer& layer : layers) x = layer.forward(x, training);
    return permute(x, {0, 2, 3, 1});  // [B,C,H,W] -> [B,H,W,d]
}

FeatureExtractor FeatureExtractor::clone() const {
    FeatureExtractor copy;
    copy.layers.reserve(layers.size());
    for (const ConvLayer& l : layers) copy.layers.push_back(l.clone());
    return copy;
}

// --- CosineClassifier ---

Tensor CosineClassifier::scores(const Tensor& features) const {
    check(features.rank() >= 2,
          "cosine scores: features must have a trailing feature axis, got " +
              shape_str(features.shape()));
    const int d = features.shape().back();
    check(d == feature_dim(), "cosine scores: feature dim " + std::to_string(d) +
                                  " does not match prototypes of dim " +
                                  std::to_string(feature_dim()));

    // Degenerate pixels get reported in image coordinates before the
    // normalization op sees them.
    {
        const auto& v = features.value();
        const std::size_t pixels = features.size() / static_cast<std::size_t>(d);
        for (std::size_t p = 0; p < pixels; ++p) {
            double sq = 0.0;
            for (int j = 0; j < d; ++j) sq += v[p * d + j] * v[p * d + j];
            if (!(std::sqrt(sq) >= kEpsilonNorm)) {
                std::ostringstream os;
                os << "cosine scores: degenerate feature norm at pixel (";
                const Shape& s = features.shape();
                std::size_t rem = p;
                std::vector<std::size_t> coords(s.size() - 1);
                for (std::size_t ax = s.size() - 1; ax-- > 0;) {
                    coords[ax] = rem % static_cast<std::size_t>(s[ax]);
                    rem /= static_cast<std::size_t>(s[ax]);
                }
                for (std::size_t ax = 0; ax < coords.size(); ++ax)
                    os << (ax ? ", " : "") << coords[ax];
                os << ")";
                fail(os.str());
            }
        }
    }

    Tensor fhat = l2_normalize(features, features.rank() - 1);
    Tensor what = l2_normalize(weight, 0);
    const std::size_t pixels = features.size() / static_cast<std::size_t>(d);
    Tensor flat = reshape(fhat, {static_cast<int>(pixels), d});
    Tensor s = scale(matmul(flat, what), tau);
    Shape out_shape(features.shape().begin(), features.shape().end() - 1);
    out_shape.push_back(num_classes());
    return reshape(s, std::move(out_shape));
}

CosineClassifier CosineClassifier::clone() const {
    CosineClassifier copy;
    copy.weight = weight.clone();
    copy.tau = tau;
    return copy;
}

Tensor class_probabilities(const Tensor& scores) {
    return softmax(scores, scores.rank() - 1);
}

// --- SegModel ---

bool SegModel::has_class(int label) const {
    return std::find(class_ids.begin(), class_ids.end(), label) != class_ids.end();
}

int SegModel::column_of(int label) const {
    auto it = std::find(class_ids.begin(), class_ids.end(), label);
    return it == class_ids.end() ? -1 : static_cast<int>(it - class_ids.begin());
}

Tensor SegModel::forward_scores(const Tensor& images, bool training) {
    return classifier.scores(extractor.forward(images, training));
}

Tensor SegModel::forward_probs(const Tensor& images, bool training) {
    return class_probabilities(forward_scores(images, training));
}

std::vector<Tensor> SegModel::parameters() {
    std::vector<Tensor> params;
    for (ConvLayer& l : extractor.layers) {
        params.push_back(l.kernel);
        params.push_back(l.norm.gamma);
        params.push_back(l.norm.beta);
    }
    params.push_back(classifier.weight);
    return params;
}

std::vector<std::pair<std::string, Tensor>> SegModel::named_parameters() {
    std::vector<std::pair<std::string, Tensor>> named;
    for (std::size_t i = 0; i < extractor.layers.size(); ++i) {
        const std::string prefix = "layer" + std::to_string(i) + ".";
        ConvLayer& l = extractor.layers[i];
        named.emplace_back(prefix + "kernel", l.kernel);
        named.emplace_back(prefix + "bias", l.bias);
        named.emplace_back(prefix + "gamma", l.norm.gamma);
        named.emplace_back(prefix + "beta", l.norm.beta);
    }
    named.emplace_back("classifier.weight", classifier.weight);
    return named;
}

void SegModel::set_trainable(bool trainable) {
    for (Tensor& p : parameters()) p.set_requires_grad(trainable);
}

void SegModel::zero_grad() {
    for (Tensor& p : parameters()) p.zero_grad();
}

void SegModel::set_norm_mode(NormMode mode) {
    for (ConvLayer& l : extractor.layers) l.norm.mode = mode;
}

void SegModel::set_norm_frozen(bool frozen) {
    for (ConvLayer& l : extractor.layers) l.norm.frozen = frozen;
}

SegModel SegModel::clone() const {
    SegModel copy;
    copy.extractor = extractor.clone();
    copy.classifier = classifier.clone();
    copy.class_ids = class_ids;
    copy.n_base = n_base;
    return copy;
}

SegModel build_model(const ModelConfig& cfg, const std::vector<int>& class_ids, Rng& rng) {
    check(!cfg.channels.empty(), "model: channel list is empty");
    check(!class_ids.empty() && class_ids[0] == 0, "model: class_ids must start with background");

    SegModel model;
    int in_ch = 3;
    for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
        const int out_ch = cfg.channels[i];
        ConvLayer layer = ConvLayer::make(in_ch, out_ch, rng);
        layer.norm.momentum = cfg.bn_momentum;
        layer.norm.clip_rd = cfg.br_clip;
        // The feature head stays pre-relu: rectified features can be exactly
        // zero at dead pixels, which the cosine classifier must reject.
        layer.use_relu = i + 1 < cfg.channels.size();
        model.extractor.layers.push_back(std::move(layer));
        in_ch = out_ch;
    }

    // Prototype columns: a shared random direction plus a small per-class
    // jitter. Cosine scores are scale-invariant, so only the angular spread
    // matters; keeping it small makes initial predictions near-uniform.
    const int d = cfg.channels.back();
    const int n_classes = static_cast<int>(class_ids.size());
    std::vector<double> base(d);
    for (double& v : base) v = rand_normal(rng);
    std::vector<double> w(static_cast<std::size_t>(d) * n_classes);
    const double jitter = 0.05;
    for (int c = 0; c < n_classes; ++c) {
        std::vector<double> col(d);
        double sq = 0.0;
        for (int j = 0; j < d; ++j) {
            col[j] = base[j] + jitter * rand_normal(rng);
            sq += col[j] * col[j];
        }
        const double norm = std::sqrt(sq);
        for (int j = 0; j < d; ++j)
            w[static_cast<std::size_t>(j) * n_classes + c] = col[j] / norm;
    }
    model.classifier.weight =
        Tensor::from_data({d, n_classes}, std::move(w)).set_requires_grad(true);
    model.classifier.tau = cfg.tau;
    model.class_ids = class_ids;
    model.n_base = n_classes;
    return model;
}

// --- checkpoint io ---

namespace {

constexpr char kMagic[5] = {'P', 'I', 'F', 'S', '1'};

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }

struct Reader {
    std::string data;
    std::size_t pos = 0;

    [[noreturn]] void fail_at(const std::string& what) const {
        throw std::runtime_error("checkpoint: " + what + " at byte offset " +
                                 std::to_string(pos));
    }
    bool eof() const { return pos >= data.size(); }
    void need(std::size_t n, const char* what) {
        if (pos + n > data.size()) fail_at(std::string("truncated ") + what);
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data[pos + i]))
                 << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data[pos + i]))
                 << (8 * i);
        pos += 8;
        return v;
    }
    double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
    std::string bytes(std::size_t n, const char* what) {
        need(n, what);
        std::string s = data.substr(pos, n);
        pos += n;
        return s;
    }
};

struct Entry {
    Shape shape;
    std::vector<double> data;
};

void append_entry(std::string& out, const std::string& name, const Shape& shape,
                  const std::vector<double>& data) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    put_u32(out, static_cast<std::uint32_t>(shape.size()));
    for (int dim : shape) put_u64(out, static_cast<std::uint64_t>(dim));
    for (double v : data) put_f64(out, v);
}

}  // namespace

void save_checkpoint(const std::string& path, SegModel& model) {
    std::string out;
    out.append(kMagic, sizeof(kMagic));
    for (auto& [name, tensor] : model.named_parameters())
        append_entry(out, name, tensor.shape(), tensor.value());
    for (std::size_t i = 0; i < model.extractor.layers.size(); ++i) {
        const std::string prefix = "layer" + std::to_string(i) + ".";
        const ConvLayer& layer = model.extractor.layers[i];
        append_entry(out, prefix + "mu_r", {static_cast<int>(layer.norm.mu_r.size())},
                     layer.norm.mu_r);
        append_entry(out, prefix + "sigma_r", {static_cast<int>(layer.norm.sigma_r.size())},
                     layer.norm.sigma_r);
        append_entry(out, prefix + "relu", {}, {layer.use_relu ? 1.0 : 0.0});
    }
    const NormLayer& first = model.extractor.layers.front().norm;
    append_entry(out, "meta.tau", {}, {model.classifier.tau});
    append_entry(out, "meta.n_base", {}, {static_cast<double>(model.n_base)});
    append_entry(out, "meta.norm_mode", {}, {first.mode == NormMode::BatchRenorm ? 1.0 : 0.0});
    append_entry(out, "meta.frozen", {}, {first.frozen ? 1.0 : 0.0});
    append_entry(out, "meta.momentum", {}, {first.momentum});
    append_entry(out, "meta.clip_rd", {}, {first.clip_rd ? 1.0 : 0.0});
    std::vector<double> ids(model.class_ids.begin(), model.class_ids.end());
    append_entry(out, "meta.class_ids", {static_cast<int>(ids.size())}, ids);

    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    if (!file) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    file.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!file) throw std::runtime_error("checkpoint: write failed for " + path);
}

SegModel load_checkpoint(const std::string& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) throw std::runtime_error("checkpoint: cannot open " + path);
    std::ostringstream buf;
    buf << file.rdbuf();

    Reader reader{buf.str()};
    if (reader.bytes(sizeof(kMagic), "magic") != std::string(kMagic, sizeof(kMagic)))
        throw std::runtime_error("checkpoint: bad magic in " + path);

    std::map<std::string, Entry> entries;
    while (!reader.eof()) {
        const std::uint32_t name_len = reader.u32("name length");
        const std::string name = reader.bytes(name_len, "name");
        const std::uint32_t rank = reader.u32("rank");
        Entry entry;
        for (std::uint32_t i = 0; i < rank; ++i)
            entry.shape.push_back(static_cast<int>(reader.u64("dimension")));
        const std::size_t count = numel(entry.shape);
        entry.data.reserve(count);
        for (std::size_t i = 0; i < count; ++i) entry.data.push_back(reader.f64("payload"));
        entries[name] = std::move(entry);
    }

    auto get = [&](const std::string& name) -> Entry& {
        auto it = entries.find(name);
        if (it == entries.end())
            throw std::runtime_error("checkpoint: missing entry '" + name + "' in " + path);
        return it->second;
    };

    SegModel model;
    for (int i = 0;; ++i) {
        const std::string prefix = "layer" + std::to_string(i) + ".";
        if (!entries.count(prefix + "kernel")) break;
        ConvLayer layer;
        Entry& k = get(prefix + "kernel");
        layer.kernel = Tensor::from_data(k.shape, k.data).set_requires_grad(true);
        Entry& b = get(prefix + "bias");
        layer.bias = Tensor::from_data(b.shape, b.data);
        Entry& g = get(prefix + "gamma");
        layer.norm.gamma = Tensor::from_data(g.shape, g.data).set_requires_grad(true);
        Entry& be = get(prefix + "beta");
        layer.norm.beta = Tensor::from_data(be.shape, be.data).set_requires_grad(true);
        layer.norm.mu_r = get(prefix + "mu_r").data;
        layer.norm.sigma_r = get(prefix + "sigma_r").data;
        layer.use_relu = get(prefix + "relu").data[0] != 0.0;
        model.extractor.layers.push_back(std::move(layer));
    }
    if (model.extractor.layers.empty())
        throw std::runtime_error("checkpoint: no layers found in " + path);

    Entry& w = get("classifier.weight");
    model.classifier.weight = Tensor::from_data(w.shape, w.data).set_requires_grad(true);
    model.classifier.tau = get("meta.tau").data[0];
    model.n_base = static_cast<int>(get("meta.n_base").data[0]);
    const NormMode mode =
        get("meta.norm_mode").data[0] != 0.0 ? NormMode::BatchRenorm : NormMode::BatchNorm;
    const bool frozen = get("meta.frozen").data[0] != 0.0;
    const double momentum = get("meta.momentum").data[0];
    const bool clip_rd = get("meta.clip_rd").data[0] != 0.0;
    for (ConvLayer& l : model.extractor.layers) {
        l.norm.mode = mode;
        l.norm.frozen = frozen;
        l.norm.momentum = momentum;
        l.norm.clip_rd = clip_rd;
    }
    for (double v : get("meta.class_ids").data) model.class_ids.push_back(static_cast<int>(v));
    return model;
}

}  // namespace pifs
