#include "pifs/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <utility>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace pifs {

namespace {

// Activation buffers are megabyte-sized and recreated every iteration; keep
// them on the heap instead of per-allocation mmap/munmap round trips.
struct AllocatorTune {
    AllocatorTune() {
#ifdef __GLIBC__
        mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
        mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
#endif
    }
};
const AllocatorTune g_allocator_tune;

}  // namespace

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void check(bool cond, const std::string& msg) {
    if (!cond) fail(msg);
}

std::shared_ptr<detail::TensorImpl> make_impl(Shape shape, std::vector<double> data) {
    auto impl = std::make_shared<detail::TensorImpl>();
    if (data.size() != numel(shape))
        fail("tensor: data length " + std::to_string(data.size()) + " does not match shape " +
             shape_str(shape));
    impl->shape = std::move(shape);
    impl->value = std::move(data);
    return impl;
}

thread_local Tape* g_active_tape = nullptr;

void ensure_grad(detail::TensorImpl* t) {
    if (t->grad.size() != t->value.size()) t->grad.assign(t->value.size(), 0.0);
}

// Records the op when a tape is active and gradient can flow from any input.
template <typename Backward>
void maybe_record(const char* tag, std::initializer_list<Tensor> inputs, Tensor& out,
                  Backward&& backward) {
    Tape* tape = g_active_tape;
    if (!tape) return;
    bool needs = false;
    for (const Tensor& in : inputs) needs = needs || in.requires_grad();
    if (!needs) return;
    out.set_requires_grad(true);
    tape->record(tag, std::vector<Tensor>(inputs), out, std::forward<Backward>(backward));
}

void maybe_record_vec(const char* tag, std::vector<Tensor> inputs, Tensor& out,
                      std::function<void(Tape::Node&)> backward) {
    Tape* tape = g_active_tape;
    if (!tape) return;
    bool needs = false;
    for (const Tensor& in : inputs) needs = needs || in.requires_grad();
    if (!needs) return;
    out.set_requires_grad(true);
    tape->record(tag, std::move(inputs), out, std::move(backward));
}

// Kink tracking for grad_check: relu raises the flag when an input lies
// within `tol` of its non-differentiable point.
struct KinkWatchState {
    bool active = false;
    double tol = 0.0;
    bool hit = false;
};
thread_local KinkWatchState g_kink_watch;

class KinkWatch {
public:
    explicit KinkWatch(double tol) : prev_(g_kink_watch) {
        g_kink_watch.active = true;
        g_kink_watch.tol = tol;
        g_kink_watch.hit = false;
    }
    ~KinkWatch() { g_kink_watch = prev_; }
    bool hit() const { return g_kink_watch.hit; }

private:
    KinkWatchState prev_;
};

}  // namespace

Tensor wrap_impl(std::shared_ptr<detail::TensorImpl> impl) { return Tensor(std::move(impl)); }

Tensor Tensor::zeros(Shape shape) {
    std::vector<double> data(numel(shape), 0.0);
    return wrap_impl(make_impl(std::move(shape), std::move(data)));
}

Tensor Tensor::full(Shape shape, double v) {
    std::vector<double> data(numel(shape), v);
    return wrap_impl(make_impl(std::move(shape), std::move(data)));
}

Tensor Tensor::scalar(double v) { return wrap_impl(make_impl({}, {v})); }

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
    return wrap_impl(make_impl(std::move(shape), std::move(data)));
}

double Tensor::item() const {
    check(size() == 1, "item: tensor is not scalar, shape " + shape_str(shape()));
    return impl_->value[0];
}

Tensor& Tensor::set_requires_grad(bool b) {
    impl_->requires_grad = b;
    if (b) ensure_grad(impl_.get());
    return *this;
}

const std::vector<double>& Tensor::grad() const {
    static const std::vector<double> empty;
    return impl_->grad.empty() ? empty : impl_->grad;
}

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
    return wrap_impl(make_impl(impl_->shape, impl_->value));
}

Tensor Tensor::clone() const {
    Tensor t = wrap_impl(make_impl(impl_->shape, impl_->value));
    if (impl_->requires_grad) t.set_requires_grad(true);
    return t;
}

// --- tape ---

void Tape::record(const char* tag, std::vector<Tensor> inputs, Tensor& output,
                  std::function<void(Node&)> backward) {
    Node node;
    node.tag = tag;
    node.inputs.reserve(inputs.size());
    for (Tensor& t : inputs) node.inputs.push_back(t.impl_ptr());
    node.output = output.impl_ptr();
    node.backward = std::move(backward);
    output.impl()->node = static_cast<int>(nodes_.size());
    nodes_.push_back(std::move(node));
}

void Tape::backward(const Tensor& loss) {
    check(loss.defined(), "backward: undefined loss");
    check(loss.size() == 1,
          "backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    detail::TensorImpl* root = loss.impl();
    if (root->node < 0) {
        // Leaf loss: gradient of a variable with respect to itself.
        check(root->requires_grad, "backward: loss does not require grad");
        root->grad[0] += 1.0;
        visits_.assign(nodes_.size(), 0);
        return;
    }
    check(static_cast<std::size_t>(root->node) < nodes_.size() &&
              nodes_[static_cast<std::size_t>(root->node)].output.get() == root,
          "backward: loss was not recorded on this tape");

    // Node outputs are intermediates of this pass; reset them so replay is
    // correct, while leaf grads keep accumulating across calls.
    for (Node& n : nodes_) {
        ensure_grad(n.output.get());
        std::fill(n.output->grad.begin(), n.output->grad.end(), 0.0);
    }
    root->grad[0] += 1.0;

    visits_.assign(nodes_.size(), 0);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
        ++visits_[i];
        nodes_[i].backward(nodes_[i]);
    }
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = prev_; }

NoGradScope::NoGradScope() : prev_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = prev_; }

// --- elementwise ---

namespace {

enum class BinKind { None, Elementwise, ScalarRight, ScalarLeft };

BinKind classify_binary(const char* tag, const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) return BinKind::Elementwise;
    if (b.size() == 1) return BinKind::ScalarRight;
    if (a.size() == 1) return BinKind::ScalarLeft;
    fail(std::string(tag) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
         shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    const BinKind kind = classify_binary("add", a, b);
    const auto& av = a.value();
    const auto& bv = b.value();
    const Shape& shape = kind == BinKind::ScalarLeft ? b.shape() : a.shape();
    std::vector<double> out(numel(shape));
    switch (kind) {
        case BinKind::Elementwise:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
            break;
        case BinKind::ScalarRight:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[0];
            break;
        default:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[0] + bv[i];
            break;
    }
    Tensor result = Tensor::from_data(shape, std::move(out));
    maybe_record("add", {a, b}, result, [kind](Tape::Node& n) {
        auto& g = n.output->grad;
        auto* ai = n.inputs[0].get();
        auto* bi = n.inputs[1].get();
        if (ai->requires_grad) {
            if (kind == BinKind::ScalarLeft) {
                for (double gi : g) ai->grad[0] += gi;
            } else {
                for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i];
            }
        }
        if (bi->requires_grad) {
            if (kind == BinKind::ScalarRight) {
                for (double gi : g) bi->grad[0] += gi;
            } else {
                for (std::size_t i = 0; i < g.size(); ++i) bi->grad[i] += g[i];
            }
        }
    });
    return result;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    const BinKind kind = classify_binary("sub", a, b);
    const auto& av = a.value();
    const auto& bv = b.value();
    const Shape& shape = kind == BinKind::ScalarLeft ? b.shape() : a.shape();
    std::vector<double> out(numel(shape));
    switch (kind) {
        case BinKind::Elementwise:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
            break;
        case BinKind::ScalarRight:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[0];
            break;
        default:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[0] - bv[i];
            break;
    }
    Tensor result = Tensor::from_data(shape, std::move(out));
    maybe_record("sub", {a, b}, result, [kind](Tape::Node& n) {
        auto& g = n.output->grad;
        auto* ai = n.inputs[0].get();
        auto* bi = n.inputs[1].get();
        if (ai->requires_grad) {
            if (kind == BinKind::ScalarLeft) {
                for (double gi : g) ai->grad[0] += gi;
            } else {
                for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i];
            }
        }
        if (bi->requires_grad) {
            if (kind == BinKind::ScalarRight) {
                for (double gi : g) bi->grad[0] -= gi;
            } else {
                for (std::size_t i = 0; i < g.size(); ++i) bi->grad[i] -= g[i];
            }
        }
    });
    return result;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    const BinKind kind = classify_binary("mul", a, b);
    const auto& av = a.value();
    const auto& bv = b.value();
    const Shape& shape = kind == BinKind::ScalarLeft ? b.shape() : a.shape();
    std::vector<double> out(numel(shape));
    switch (kind) {
        case BinKind::Elementwise:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
            break;
        case BinKind::ScalarRight:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[0];
            break;
        default:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[0] * bv[i];
            break;
    }
    Tensor result = Tensor::from_data(shape, std::move(out));
    maybe_record("mul", {a, b}, result, [kind](Tape::Node& n) {
        auto& g = n.output->grad;
        auto* ai = n.inputs[0].get();
        auto* bi = n.inputs[1].get();
        const auto& av2 = ai->value;
        const auto& bv2 = bi->value;
        if (ai->requires_grad) {
            switch (kind) {
                case BinKind::Elementwise:
                    for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i] * bv2[i];
                    break;
                case BinKind::ScalarRight:
                    for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i] * bv2[0];
                    break;
                default:
                    for (std::size_t i = 0; i < g.size(); ++i) ai->grad[0] += g[i] * bv2[i];
                    break;
            }
        }
        if (bi->requires_grad) {
            switch (kind) {
                case BinKind::Elementwise:
                    for (std::size_t i = 0; i < g.size(); ++i) bi->grad[i] += g[i] * av2[i];
                    break;
                case BinKind::ScalarRight:
                    for (std::size_t i = 0; i < g.size(); ++i) bi->grad[0] += g[i] * av2[i];
                    break;
                default:
                    for (std::size_t i = 0; i < g.size(); ++i) bi->grad[i] += g[i] * av2[0];
                    break;
            }
        }
    });
    return result;
}

Tensor divide(const Tensor& a, const Tensor& b) {
    const BinKind kind = classify_binary("div", a, b);
    const auto& av = a.value();
    const auto& bv = b.value();
    const Shape& shape = kind == BinKind::ScalarLeft ? b.shape() : a.shape();
    std::vector<double> out(numel(shape));
    switch (kind) {
        case BinKind::Elementwise:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
            break;
        case BinKind::ScalarRight:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[0];
            break;
        default:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[0] / bv[i];
            break;
    }
    Tensor result = Tensor::from_data(shape, std::move(out));
    maybe_record("div", {a, b}, result, [kind](Tape::Node& n) {
        auto& g = n.output->grad;
        auto* ai = n.inputs[0].get();
        auto* bi = n.inputs[1].get();
        const auto& av2 = ai->value;
        const auto& bv2 = bi->value;
        if (ai->requires_grad) {
            switch (kind) {
                case BinKind::Elementwise:
                    for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i] / bv2[i];
                    break;
                case BinKind::ScalarRight:
                    for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i] / bv2[0];
                    break;
                default:
                    for (std::size_t i = 0; i < g.size(); ++i) ai->grad[0] += g[i] / bv2[i];
                    break;
            }
        }
        if (bi->requires_grad) {
            switch (kind) {
                case BinKind::Elementwise:
                    for (std::size_t i = 0; i < g.size(); ++i)
                        bi->grad[i] -= g[i] * av2[i] / (bv2[i] * bv2[i]);
                    break;
                case BinKind::ScalarRight:
                    for (std::size_t i = 0; i < g.size(); ++i)
                        bi->grad[0] -= g[i] * av2[i] / (bv2[0] * bv2[0]);
                    break;
                default:
                    for (std::size_t i = 0; i < g.size(); ++i)
                        bi->grad[i] -= g[i] * av2[0] / (bv2[i] * bv2[i]);
                    break;
            }
        }
    });
    return result;
}

Tensor exp(const Tensor& a) {
    std::vector<double> out(a.size());
    const auto& av = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(av[i]);
    Tensor result = Tensor::from_data(a.shape(), std::move(out));
    maybe_record("exp", {a}, result, [](Tape::Node& n) {
        auto* ai = n.inputs[0].get();
        if (!ai->requires_grad) return;
        const auto& g = n.output->grad;
        const auto& y = n.output->value;
        for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i] * y[i];
    });
    return result;
}

Tensor log(const Tensor& a) {
    std::vector<double> out(a.size());
    const auto& av = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!(av[i] > 0.0))
            fail("log: non-positive input " + std::to_string(av[i]) + " at index " +
                 std::to_string(i));
        out[i] = std::log(av[i]);
    }
    Tensor result = Tensor::from_data(a.shape(), std::move(out));
    maybe_record("log", {a}, result, [](Tape::Node& n) {
        auto* ai = n.inputs[0].get();
        if (!ai->requires_grad) return;
        const auto& g = n.output->grad;
        const auto& x = ai->value;
        for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i] / x[i];
    });
    return result;
}

Tensor relu(const Tensor& a) {
    std::vector<double> out(a.size());
    const auto& av = a.value();
    if (g_kink_watch.active) {
        for (std::size_t i = 0; i < out.size(); ++i) {
            if (std::abs(av[i]) <= g_kink_watch.tol) g_kink_watch.hit = true;
            out[i] = av[i] > 0.0 ? av[i] : 0.0;
        }
    } else {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
    }
    Tensor result = Tensor::from_data(a.shape(), std::move(out));
    // Subgradient at exactly 0 is fixed to 0.
    maybe_record("relu", {a}, result, [](Tape::Node& n) {
        auto* ai = n.inputs[0].get();
        if (!ai->requires_grad) return;
        const auto& g = n.output->grad;
        const auto& x = ai->value;
        for (std::size_t i = 0; i < g.size(); ++i)
            if (x[i] > 0.0) ai->grad[i] += g[i];
    });
    return result;
}

Tensor sqrt(const Tensor& a) {
    std::vector<double> out(a.size());
    const auto& av = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(av[i]);
    Tensor result = Tensor::from_data(a.shape(), std::move(out));
    maybe_record("sqrt", {a}, result, [](Tape::Node& n) {
        auto* ai = n.inputs[0].get();
        if (!ai->requires_grad) return;
        const auto& g = n.output->grad;
        const auto& y = n.output->value;
        for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i] * 0.5 / y[i];
    });
    return result;
}

Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    const auto& av = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
    Tensor result = Tensor::from_data(a.shape(), std::move(out));
    maybe_record("scale", {a}, result, [c](Tape::Node& n) {
        auto* ai = n.inputs[0].get();
        if (!ai->requires_grad) return;
        const auto& g = n.output->grad;
        for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i] * c;
    });
    return result;
}

Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    const auto& av = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + c;
    Tensor result = Tensor::from_data(a.shape(), std::move(out));
    maybe_record("add_scalar", {a}, result, [](Tape::Node& n) {
        auto* ai = n.inputs[0].get();
        if (!ai->requires_grad) return;
        const auto& g = n.output->grad;
        for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i];
    });
    return result;
}

// --- matmul / conv ---

Tensor matmul(const Tensor& a, const Tensor& b) {
    check(a.rank() == 2 && b.rank() == 2,
          "matmul: expects rank-2 operands, got " + shape_str(a.shape()) + " and " +
              shape_str(b.shape()));
    const int m = a.shape()[0], k = a.shape()[1];
    const int k2 = b.shape()[0], n = b.shape()[1];
    check(k == k2, "matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    const auto& av = a.value();
    const auto& bv = b.value();
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i) {
        for (int kk = 0; kk < k; ++kk) {
            const double aik = av[static_cast<std::size_t>(i) * k + kk];
            const double* brow = &bv[static_cast<std::size_t>(kk) * n];
            double* orow = &out[static_cast<std::size_t>(i) * n];
            for (int j = 0; j < n; ++j) orow[j] += aik * brow[j];
        }
    }
    Tensor result = Tensor::from_data({m, n}, std::move(out));
    maybe_record("matmul", {a, b}, result, [m, k, n](Tape::Node& node) {
        auto* ai = node.inputs[0].get();
        auto* bi = node.inputs[1].get();
        const auto& g = node.output->grad;
        if (ai->requires_grad) {
            // grad_a = g . b^T
            for (int i = 0; i < m; ++i) {
                for (int kk = 0; kk < k; ++kk) {
                    double acc = 0.0;
                    const double* grow = &g[static_cast<std::size_t>(i) * n];
                    const double* brow = &bi->value[static_cast<std::size_t>(kk) * n];
                    for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    ai->grad[static_cast<std::size_t>(i) * k + kk] += acc;
                }
            }
        }
        if (bi->requires_grad) {
            // grad_b = a^T . g
            for (int kk = 0; kk < k; ++kk) {
                for (int i = 0; i < m; ++i) {
                    const double aik = ai->value[static_cast<std::size_t>(i) * k + kk];
                    const double* grow = &g[static_cast<std::size_t>(i) * n];
                    double* brow = &bi->grad[static_cast<std::size_t>(kk) * n];
                    for (int j = 0; j < n; ++j) brow[j] += aik * grow[j];
                }
            }
        }
    });
    return result;
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias) {
    check(input.rank() == 3, "conv2d: input must be [C,H,W], got " + shape_str(input.shape()));
    check(kernel.rank() == 4 && kernel.shape()[2] == 3 && kernel.shape()[3] == 3,
          "conv2d: kernel must be [Cout,Cin,3,3], got " + shape_str(kernel.shape()));
    const int cin = input.shape()[0], h = input.shape()[1], w = input.shape()[2];
    const int cout = kernel.shape()[0];
    check(kernel.shape()[1] == cin, "conv2d: channel mismatch, input has " +
                                        std::to_string(cin) + " channels, kernel expects " +
                                        std::to_string(kernel.shape()[1]));
    check(bias.rank() == 1 && bias.shape()[0] == cout,
          "conv2d: bias must be [Cout]=" + std::to_string(cout) + ", got " +
              shape_str(bias.shape()));

    const auto& x = input.value();
    const auto& kv = kernel.value();
    const auto& bv = bias.value();
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    std::vector<double> out(static_cast<std::size_t>(cout) * plane);
    for (int co = 0; co < cout; ++co)
        std::fill_n(&out[co * plane], plane, bv[co]);
    for (int co = 0; co < cout; ++co) {
        for (int ci = 0; ci < cin; ++ci) {
            const double* xp = &x[ci * plane];
            const double* kp = &kv[(static_cast<std::size_t>(co) * cin + ci) * 9];
            double* op = &out[co * plane];
            for (int kh = 0; kh < 3; ++kh) {
                const int dh = kh - 1;
                const int h0 = std::max(0, -dh), h1 = std::min(h, h - dh);
                for (int kw = 0; kw < 3; ++kw) {
                    const int dw = kw - 1;
                    const int w0 = std::max(0, -dw), w1 = std::min(w, w - dw);
                    const double kval = kp[kh * 3 + kw];
                    for (int y = h0; y < h1; ++y) {
                        const double* __restrict__ xrow =
                            &xp[static_cast<std::size_t>(y + dh) * w + dw];
                        double* __restrict__ orow = &op[static_cast<std::size_t>(y) * w];
                        for (int xw = w0; xw < w1; ++xw) orow[xw] += kval * xrow[xw];
                    }
                }
            }
        }
    }
    Tensor result = Tensor::from_data({cout, h, w}, std::move(out));
    maybe_record("conv2d", {input, kernel, bias}, result, [cin, cout, h, w](Tape::Node& node) {
        auto* xi = node.inputs[0].get();
        auto* ki = node.inputs[1].get();
        auto* bi = node.inputs[2].get();
        const auto& g = node.output->grad;
        const std::size_t plane = static_cast<std::size_t>(h) * w;
        if (bi->requires_grad) {
            for (int co = 0; co < cout; ++co) {
                double acc = 0.0;
                const double* gp = &g[co * plane];
                for (std::size_t i = 0; i < plane; ++i) acc += gp[i];
                bi->grad[co] += acc;
            }
        }
        for (int co = 0; co < cout; ++co) {
            for (int ci = 0; ci < cin; ++ci) {
                const double* gp = &g[co * plane];
                const double* xp = &xi->value[ci * plane];
                const std::size_t kbase = (static_cast<std::size_t>(co) * cin + ci) * 9;
                for (int kh = 0; kh < 3; ++kh) {
                    const int dh = kh - 1;
                    const int h0 = std::max(0, -dh), h1 = std::min(h, h - dh);
                    for (int kw = 0; kw < 3; ++kw) {
                        const int dw = kw - 1;
                        const int w0 = std::max(0, -dw), w1 = std::min(w, w - dw);
                        const double kval = ki->value[kbase + kh * 3 + kw];
                        double kacc = 0.0;
                        for (int y = h0; y < h1; ++y) {
                            const double* __restrict__ grow =
                                &gp[static_cast<std::size_t>(y) * w];
                            const double* __restrict__ xrow =
                                &xp[static_cast<std::size_t>(y + dh) * w + dw];
                            double* __restrict__ xgrow =
                                xi->requires_grad
                                    ? &xi->grad[ci * plane +
                                                static_cast<std::size_t>(y + dh) * w + dw]
                                    : nullptr;
                            if (xgrow) {
                                for (int xw = w0; xw < w1; ++xw) {
                                    kacc += grow[xw] * xrow[xw];
                                    xgrow[xw] += kval * grow[xw];
                                }
                            } else if (ki->requires_grad) {
                                for (int xw = w0; xw < w1; ++xw) kacc += grow[xw] * xrow[xw];
                            }
                        }
                        if (ki->requires_grad) ki->grad[kbase + kh * 3 + kw] += kacc;
                    }
                }
            }
        }
    });
    return result;
}

// --- reductions ---

namespace {

struct AxisSplit {
    std::size_t outer, mid, inner;
};

AxisSplit split_axis(const Shape& shape, int axis) {
    AxisSplit s{1, static_cast<std::size_t>(shape[axis]), 1};
    for (int i = 0; i < axis; ++i) s.outer *= static_cast<std::size_t>(shape[i]);
    for (std::size_t i = axis + 1; i < shape.size(); ++i)
        s.inner *= static_cast<std::size_t>(shape[i]);
    return s;
}

void check_axis(const char* tag, const Tensor& a, int axis) {
    if (axis < 0 || axis >= a.rank())
        fail(std::string(tag) + ": axis " + std::to_string(axis) + " out of range for shape " +
             shape_str(a.shape()));
}

Tensor reduce_all(const Tensor& a, bool mean) {
    const auto& av = a.value();
    double acc = 0.0;
    for (double v : av) acc += v;
    const double denom = mean ? static_cast<double>(a.size()) : 1.0;
    Tensor result = Tensor::scalar(acc / denom);
    maybe_record(mean ? "mean" : "sum", {a}, result, [denom](Tape::Node& n) {
        auto* ai = n.inputs[0].get();
        if (!ai->requires_grad) return;
        const double g = n.output->grad[0] / denom;
        for (std::size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += g;
    });
    return result;
}

Tensor reduce_axis(const Tensor& a, int axis, bool mean) {
    check_axis(mean ? "mean" : "sum", a, axis);
    const AxisSplit s = split_axis(a.shape(), axis);
    Shape out_shape = a.shape();
    out_shape.erase(out_shape.begin() + axis);
    const auto& av = a.value();
    std::vector<double> out(s.outer * s.inner, 0.0);
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t m = 0; m < s.mid; ++m) {
            const double* src = &av[(o * s.mid + m) * s.inner];
            double* dst = &out[o * s.inner];
            for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
        }
    const double denom = mean ? static_cast<double>(s.mid) : 1.0;
    if (mean)
        for (double& v : out) v /= denom;
    Tensor result = Tensor::from_data(std::move(out_shape), std::move(out));
    maybe_record(mean ? "mean" : "sum", {a}, result, [s, denom](Tape::Node& n) {
        auto* ai = n.inputs[0].get();
        if (!ai->requires_grad) return;
        const auto& g = n.output->grad;
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t m = 0; m < s.mid; ++m) {
                const double* gp = &g[o * s.inner];
                double* dst = &ai->grad[(o * s.mid + m) * s.inner];
                for (std::size_t i = 0; i < s.inner; ++i) dst[i] += gp[i] / denom;
            }
    });
    return result;
}

}  // namespace

Tensor reduce_sum(const Tensor& a) { return reduce_all(a, false); }
Tensor reduce_sum(const Tensor& a, int axis) { return reduce_axis(a, axis, false); }
Tensor reduce_mean(const Tensor& a) { return reduce_all(a, true); }
Tensor reduce_mean(const Tensor& a, int axis) { return reduce_axis(a, axis, true); }

// --- normalization-style slice ops ---

Tensor l2_normalize(const Tensor& a, int axis) {
    check_axis("l2_normalize", a, axis);
    const AxisSplit s = split_axis(a.shape(), axis);
    const auto& av = a.value();
    std::vector<double> out(a.size());
    std::vector<double> norms(s.outer * s.inner);
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) {
            double sq = 0.0;
            for (std::size_t m = 0; m < s.mid; ++m) {
                const double v = av[(o * s.mid + m) * s.inner + i];
                sq += v * v;
            }
            const double norm = std::sqrt(sq);
            if (!(norm >= kEpsilonNorm))
                fail("l2_normalize: degenerate slice " + std::to_string(o * s.inner + i) +
                     " (norm " + std::to_string(norm) + ")");
            norms[o * s.inner + i] = norm;
            for (std::size_t m = 0; m < s.mid; ++m) {
                const std::size_t idx = (o * s.mid + m) * s.inner + i;
                out[idx] = av[idx] / norm;
            }
        }
    Tensor result = Tensor::from_data(a.shape(), std::move(out));
    maybe_record("l2_normalize", {a}, result,
                 [s, norms = std::move(norms)](Tape::Node& n) {
                     auto* ai = n.inputs[0].get();
                     if (!ai->requires_grad) return;
                     const auto& g = n.output->grad;
                     const auto& y = n.output->value;
                     for (std::size_t o = 0; o < s.outer; ++o)
                         for (std::size_t i = 0; i < s.inner; ++i) {
                             double dot = 0.0;
                             for (std::size_t m = 0; m < s.mid; ++m) {
                                 const std::size_t idx = (o * s.mid + m) * s.inner + i;
                                 dot += g[idx] * y[idx];
                             }
                             const double norm = norms[o * s.inner + i];
                             for (std::size_t m = 0; m < s.mid; ++m) {
                                 const std::size_t idx = (o * s.mid + m) * s.inner + i;
                                 ai->grad[idx] += (g[idx] - y[idx] * dot) / norm;
                             }
                         }
                 });
    return result;
}

Tensor softmax(const Tensor& a, int axis) {
    check_axis("softmax", a, axis);
    const AxisSplit s = split_axis(a.shape(), axis);
    const auto& av = a.value();
    std::vector<double> out(a.size());
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) {
            double mx = -HUGE_VAL;
            for (std::size_t m = 0; m < s.mid; ++m)
                mx = std::max(mx, av[(o * s.mid + m) * s.inner + i]);
            double sum = 0.0;
            for (std::size_t m = 0; m < s.mid; ++m) {
                const std::size_t idx = (o * s.mid + m) * s.inner + i;
                out[idx] = std::exp(av[idx] - mx);
                sum += out[idx];
            }
            for (std::size_t m = 0; m < s.mid; ++m) out[(o * s.mid + m) * s.inner + i] /= sum;
        }
    Tensor result = Tensor::from_data(a.shape(), std::move(out));
    maybe_record("softmax", {a}, result, [s](Tape::Node& n) {
        auto* ai = n.inputs[0].get();
        if (!ai->requires_grad) return;
        const auto& g = n.output->grad;
        const auto& y = n.output->value;
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t i = 0; i < s.inner; ++i) {
                double dot = 0.0;
                for (std::size_t m = 0; m < s.mid; ++m) {
                    const std::size_t idx = (o * s.mid + m) * s.inner + i;
                    dot += g[idx] * y[idx];
                }
                for (std::size_t m = 0; m < s.mid; ++m) {
                    const std::size_t idx = (o * s.mid + m) * s.inner + i;
                    ai->grad[idx] += y[idx] * (g[idx] - dot);
                }
            }
    });
    return result;
}

// --- structural ops ---

Tensor stack0(const std::vector<Tensor>& parts) {
    check(!parts.empty(), "stack0: empty input");
    const Shape& base = parts[0].shape();
    for (const Tensor& t : parts)
        check(t.shape() == base, "stack0: mismatched part shapes " + shape_str(base) + " vs " +
                                     shape_str(t.shape()));
    Shape out_shape;
    out_shape.push_back(static_cast<int>(parts.size()));
    out_shape.insert(out_shape.end(), base.begin(), base.end());
    const std::size_t stride = numel(base);
    std::vector<double> out(parts.size() * stride);
    for (std::size_t p = 0; p < parts.size(); ++p)
        std::copy(parts[p].value().begin(), parts[p].value().end(), out.begin() + p * stride);
    Tensor result = Tensor::from_data(std::move(out_shape), std::move(out));
    maybe_record_vec("stack0", parts, result, [stride](Tape::Node& n) {
        const auto& g = n.output->grad;
        for (std::size_t p = 0; p < n.inputs.size(); ++p) {
            auto* in = n.inputs[p].get();
            if (!in->requires_grad) continue;
            const double* gp = &g[p * stride];
            for (std::size_t i = 0; i < stride; ++i) in->grad[i] += gp[i];
        }
    });
    return result;
}

Tensor select0(const Tensor& a, int index) {
    check(a.rank() >= 1, "select0: scalar input");
    check(index >= 0 && index < a.shape()[0],
          "select0: index " + std::to_string(index) + " out of range for shape " +
              shape_str(a.shape()));
    Shape out_shape(a.shape().begin() + 1, a.shape().end());
    const std::size_t stride = numel(out_shape);
    std::vector<double> out(a.value().begin() + index * stride,
                            a.value().begin() + (index + 1) * stride);
    Tensor result = Tensor::from_data(std::move(out_shape), std::move(out));
    maybe_record("select0", {a}, result, [index, stride](Tape::Node& n) {
        auto* ai = n.inputs[0].get();
        if (!ai->requires_grad) return;
        const auto& g = n.output->grad;
        double* dst = &ai->grad[index * stride];
        for (std::size_t i = 0; i < stride; ++i) dst[i] += g[i];
    });
    return result;
}

Tensor reshape(const Tensor& a, Shape shape) {
    check(numel(shape) == a.size(), "reshape: cannot view " + shape_str(a.shape()) + " as " +
                                        shape_str(shape));
    Tensor result = Tensor::from_data(std::move(shape), a.value());
    maybe_record("reshape", {a}, result, [](Tape::Node& n) {
        auto* ai = n.inputs[0].get();
        if (!ai->requires_grad) return;
        const auto& g = n.output->grad;
        for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i];
    });
    return result;
}

namespace {

// dst[out_idx] = src[in_idx] under the given axis permutation.
void permute_raw(const std::vector<double>& src, const Shape& in_shape,
                 const std::vector<int>& perm, std::vector<double>& dst, bool accumulate) {
    const int rank = static_cast<int>(in_shape.size());
    Shape out_shape(rank);
    for (int i = 0; i < rank; ++i) out_shape[i] = in_shape[perm[i]];
    std::vector<std::size_t> in_strides(rank, 1), out_strides(rank, 1);
    for (int i = rank - 2; i >= 0; --i)
        in_strides[i] = in_strides[i + 1] * static_cast<std::size_t>(in_shape[i + 1]);
    for (int i = rank - 2; i >= 0; --i)
        out_strides[i] = out_strides[i + 1] * static_cast<std::size_t>(out_shape[i + 1]);
    std::vector<int> idx(rank, 0);
    const std::size_t total = src.size();
    for (std::size_t o = 0; o < total; ++o) {
        std::size_t in_off = 0;
        for (int i = 0; i < rank; ++i)
            in_off += static_cast<std::size_t>(idx[i]) * in_strides[perm[i]];
        if (accumulate)
            dst[o] += src[in_off];
        else
            dst[o] = src[in_off];
        for (int i = rank - 1; i >= 0; --i) {
            if (++idx[i] < out_shape[i]) break;
            idx[i] = 0;
        }
    }
}

}  // namespace

Tensor permute(const Tensor& a, const std::vector<int>& perm) {
    const int rank = a.rank();
    check(static_cast<int>(perm.size()) == rank, "permute: perm size must equal rank");
    std::vector<bool> seen(rank, false);
    for (int p : perm) {
        check(p >= 0 && p < rank && !seen[p], "permute: invalid permutation");
        seen[p] = true;
    }
    Shape out_shape(rank);
    for (int i = 0; i < rank; ++i) out_shape[i] = a.shape()[perm[i]];
    std::vector<double> out(a.size());
    permute_raw(a.value(), a.shape(), perm, out, false);
    Tensor result = Tensor::from_data(std::move(out_shape), std::move(out));
    maybe_record("permute", {a}, result, [perm, rank](Tape::Node& n) {
        auto* ai = n.inputs[0].get();
        if (!ai->requires_grad) return;
        // Inverse permutation routes the gradient back.
        std::vector<int> inv(rank);
        for (int i = 0; i < rank; ++i) inv[perm[i]] = i;
        permute_raw(n.output->grad, n.output->shape, inv, ai->grad, true);
    });
    return result;
}

Tensor slice_last(const Tensor& a, int start, int len) {
    check(a.rank() >= 1, "slice_last: scalar input");
    const int last = a.shape().back();
    check(start >= 0 && len > 0 && start + len <= last,
          "slice_last: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
              ") out of bounds for axis size " + std::to_string(last));
    Shape out_shape = a.shape();
    out_shape.back() = len;
    const std::size_t rows = a.size() / static_cast<std::size_t>(last);
    const auto& av = a.value();
    std::vector<double> out(rows * static_cast<std::size_t>(len));
    for (std::size_t r = 0; r < rows; ++r)
        std::copy(av.begin() + r * last + start, av.begin() + r * last + start + len,
                  out.begin() + r * len);
    Tensor result = Tensor::from_data(std::move(out_shape), std::move(out));
    maybe_record("slice_last", {a}, result, [start, len, last, rows](Tape::Node& n) {
        auto* ai = n.inputs[0].get();
        if (!ai->requires_grad) return;
        const auto& g = n.output->grad;
        for (std::size_t r = 0; r < rows; ++r)
            for (int j = 0; j < len; ++j)
                ai->grad[r * static_cast<std::size_t>(last) + start + j] +=
                    g[r * static_cast<std::size_t>(len) + j];
    });
    return result;
}

Tensor renormalize_last(const Tensor& a) {
    check(a.rank() >= 1, "renormalize_last: scalar input");
    const int last = a.shape().back();
    const std::size_t rows = a.size() / static_cast<std::size_t>(last);
    const auto& av = a.value();
    std::vector<double> out(a.size());
    std::vector<double> sums(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (int j = 0; j < last; ++j) s += av[r * last + j];
        if (!(s >= kEpsilonNorm))
            fail("renormalize_last: degenerate slice " + std::to_string(r) + " (sum " +
                 std::to_string(s) + ")");
        sums[r] = s;
        for (int j = 0; j < last; ++j) out[r * last + j] = av[r * last + j] / s;
    }
    Tensor result = Tensor::from_data(a.shape(), std::move(out));
    maybe_record("renormalize_last", {a}, result,
                 [last, rows, sums = std::move(sums)](Tape::Node& n) {
                     auto* ai = n.inputs[0].get();
                     if (!ai->requires_grad) return;
                     const auto& g = n.output->grad;
                     const auto& y = n.output->value;
                     for (std::size_t r = 0; r < rows; ++r) {
                         double dot = 0.0;
                         for (int j = 0; j < last; ++j) dot += g[r * last + j] * y[r * last + j];
                         for (int j = 0; j < last; ++j)
                             ai->grad[r * last + j] += (g[r * last + j] - dot) / sums[r];
                     }
                 });
    return result;
}

// --- axis broadcast ---

namespace {

enum class BcOp { Add, Sub, Mul, Div };

Tensor bcast_impl(const char* tag, BcOp op, const Tensor& a, const Tensor& v, int axis) {
    check_axis(tag, a, axis);
    check(v.rank() == 1 && v.shape()[0] == a.shape()[axis],
          std::string(tag) + ": vector shape " + shape_str(v.shape()) +
              " does not match axis " + std::to_string(axis) + " of " + shape_str(a.shape()));
    const AxisSplit s = split_axis(a.shape(), axis);
    const auto& av = a.value();
    const auto& vv = v.value();
    std::vector<double> out(a.size());
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t m = 0; m < s.mid; ++m) {
            const double c = vv[m];
            const double* src = &av[(o * s.mid + m) * s.inner];
            double* dst = &out[(o * s.mid + m) * s.inner];
            switch (op) {
                case BcOp::Add:
                    for (std::size_t i = 0; i < s.inner; ++i) dst[i] = src[i] + c;
                    break;
                case BcOp::Sub:
                    for (std::size_t i = 0; i < s.inner; ++i) dst[i] = src[i] - c;
                    break;
                case BcOp::Mul:
                    for (std::size_t i = 0; i < s.inner; ++i) dst[i] = src[i] * c;
                    break;
                case BcOp::Div:
                    for (std::size_t i = 0; i < s.inner; ++i) dst[i] = src[i] / c;
                    break;
            }
        }
    Tensor result = Tensor::from_data(a.shape(), std::move(out));
    maybe_record(tag, {a, v}, result, [op, s](Tape::Node& n) {
        auto* ai = n.inputs[0].get();
        auto* vi = n.inputs[1].get();
        const auto& g = n.output->grad;
        const auto& av2 = ai->value;
        const auto& vv2 = vi->value;
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t m = 0; m < s.mid; ++m) {
                const std::size_t base = (o * s.mid + m) * s.inner;
                const double c = vv2[m];
                if (ai->requires_grad) {
                    double* ag = &ai->grad[base];
                    const double* gp = &g[base];
                    switch (op) {
                        case BcOp::Add:
                        case BcOp::Sub:
                            for (std::size_t i = 0; i < s.inner; ++i) ag[i] += gp[i];
                            break;
                        case BcOp::Mul:
                            for (std::size_t i = 0; i < s.inner; ++i) ag[i] += gp[i] * c;
                            break;
                        case BcOp::Div:
                            for (std::size_t i = 0; i < s.inner; ++i) ag[i] += gp[i] / c;
                            break;
                    }
                }
                if (vi->requires_grad) {
                    double acc = 0.0;
                    const double* gp = &g[base];
                    const double* ap = &av2[base];
                    switch (op) {
                        case BcOp::Add:
                            for (std::size_t i = 0; i < s.inner; ++i) acc += gp[i];
                            break;
                        case BcOp::Sub:
                            for (std::size_t i = 0; i < s.inner; ++i) acc -= gp[i];
                            break;
                        case BcOp::Mul:
                            for (std::size_t i = 0; i < s.inner; ++i) acc += gp[i] * ap[i];
                            break;
                        case BcOp::Div:
                            for (std::size_t i = 0; i < s.inner; ++i)
                                acc -= gp[i] * ap[i] / (c * c);
                            break;
                    }
                    vi->grad[m] += acc;
                }
            }
    });
    return result;
}

}  // namespace

Tensor bcast_add(const Tensor& a, const Tensor& v, int axis) {
    return bcast_impl("bcast_add", BcOp::Add, a, v, axis);
}
Tensor bcast_sub(const Tensor& a, const Tensor& v, int axis) {
    return bcast_impl("bcast_sub", BcOp::Sub, a, v, axis);
}
Tensor bcast_mul(const Tensor& a, const Tensor& v, int axis) {
    return bcast_impl("bcast_mul", BcOp::Mul, a, v, axis);
}
Tensor bcast_div(const Tensor& a, const Tensor& v, int axis) {
    return bcast_impl("bcast_div", BcOp::Div, a, v, axis);
}

// --- gradient checking ---

GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double eps) {
    check(eps > 0.0, "grad_check: eps must be positive");

    Tensor var = x.detach();
    var.set_requires_grad(true);
    Tape tape;
    std::vector<double> analytic;
    {
        TapeScope scope(tape);
        Tensor y = f(var);
        check(y.size() == 1, "grad_check: f must be scalar-valued");
        tape.backward(y);
        analytic = var.grad();
    }

    bool base_hit = false;
    {
        NoGradScope no_grad;
        KinkWatch watch(eps);
        (void)f(x.detach()).item();
        base_hit = watch.hit();
    }

    GradCheckResult result;
    for (std::size_t i = 0; i < x.size(); ++i) {
        NoGradScope no_grad;
        Tensor xp = x.detach();
        xp.raw_value()[i] += eps;
        Tensor xm = x.detach();
        xm.raw_value()[i] -= eps;
        bool kinked = base_hit;
        double fp, fm;
        {
            KinkWatch watch(eps);
            fp = f(xp).item();
            kinked = kinked || watch.hit();
        }
        {
            KinkWatch watch(eps);
            fm = f(xm).item();
            kinked = kinked || watch.hit();
        }
        if (kinked) {
            ++result.skipped;
            continue;
        }
        const double central = (fp - fm) / (2.0 * eps);
        const double a = analytic[i];
        const double rel =
            std::abs(a - central) / std::max({std::abs(a), std::abs(central), 1e-8});
        result.max_rel_error = std::max(result.max_rel_error, rel);
        ++result.checked;
    }
    return result;
}

}  // namespace pifs
