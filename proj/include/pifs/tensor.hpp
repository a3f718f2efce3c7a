#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace pifs {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated iff requires_grad
    bool requires_grad = false;
    int node = -1;  // index into the recording tape, -1 for leaves/detached
};

}  // namespace detail

/// Dense 64-bit real array with value semantics on the handle and shared
/// storage underneath. A scalar is an empty shape with one element.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double v);
    static Tensor scalar(double v);
    static Tensor from_data(Shape shape, std::vector<double> data);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    std::size_t size() const { return impl_->value.size(); }
    double item() const;

    const std::vector<double>& value() const { return impl_->value; }
    /// Untracked mutable access (optimizer updates, buffer loads).
    std::vector<double>& raw_value() { return impl_->value; }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool b);
    bool has_grad() const { return !impl_->grad.empty(); }
    const std::vector<double>& grad() const;
    void zero_grad();

    /// Value copy with no graph linkage and no gradient.
    Tensor detach() const;
    /// Deep copy: fresh storage, keeps requires_grad, drops graph linkage.
    Tensor clone() const;

    detail::TensorImpl* impl() const { return impl_.get(); }
    const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorImpl> impl_;

    friend Tensor wrap_impl(std::shared_ptr<detail::TensorImpl>);
};

Tensor wrap_impl(std::shared_ptr<detail::TensorImpl> impl);

/// Append-only record of forward operations; backward replays it in exact
/// reverse order, visiting every node exactly once.
class Tape {
public:
    struct Node {
        const char* tag;
        std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
        std::shared_ptr<detail::TensorImpl> output;
        std::function<void(Node&)> backward;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::size_t node_count() const { return nodes_.size(); }
    const std::vector<int>& last_visit_counts() const { return visits_; }

    /// Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
    /// requires-grad leaf. Repeated calls accumulate into leaf grads.
    void backward(const Tensor& loss);

    /// Recording hook; also used by composite primitives outside the engine.
    void record(const char* tag, std::vector<Tensor> inputs, Tensor& output,
                std::function<void(Node&)> backward);

private:
    std::vector<Node> nodes_;
    std::vector<int> visits_;
};

Tape* active_tape();

/// Makes a tape the active recorder on this thread for the scope's lifetime.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

/// Suspends recording (teacher forwards, evaluation, buffer math).
class NoGradScope {
public:
    NoGradScope();
    ~NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape* prev_;
};

// Elementwise. Binary ops take equal shapes or one scalar operand.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);

Tensor matmul(const Tensor& a, const Tensor& b);

/// 3x3 kernel, stride 1, zero padding 1. input [Cin,H,W], kernel
/// [Cout,Cin,3,3], bias [Cout] -> [Cout,H,W].
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias);

Tensor reduce_sum(const Tensor& a);
Tensor reduce_sum(const Tensor& a, int axis);
Tensor reduce_mean(const Tensor& a);
Tensor reduce_mean(const Tensor& a, int axis);

/// Unit-normalizes every slice along `axis`; rejects slices with norm below
/// epsilon_norm (degenerate inputs are upstream bugs, not clamp material).
Tensor l2_normalize(const Tensor& a, int axis);
constexpr double kEpsilonNorm = 1e-12;

Tensor softmax(const Tensor& a, int axis);

// Structural ops.
Tensor stack0(const std::vector<Tensor>& parts);
Tensor select0(const Tensor& a, int index);
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<int>& perm);
Tensor slice_last(const Tensor& a, int start, int len);
/// Divides each slice along the last axis by its sum.
Tensor renormalize_last(const Tensor& a);

// Broadcast of a rank-1 vector along one axis of a higher-rank tensor.
Tensor bcast_add(const Tensor& a, const Tensor& v, int axis);
Tensor bcast_sub(const Tensor& a, const Tensor& v, int axis);
Tensor bcast_mul(const Tensor& a, const Tensor& v, int axis);
Tensor bcast_div(const Tensor& a, const Tensor& v, int axis);

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t skipped = 0;  // coordinates whose central difference straddled a relu kink
};

/// Central-difference check of reverse-mode gradients of a scalar-valued f.
GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double eps);

}  // namespace pifs
