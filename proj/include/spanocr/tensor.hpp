#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace spanocr {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense value buffer plus the recorded tape entry that produced it. Gradients
// flow through backward_fn, which reads this node's grad and accumulates into
// the parents' grads.
template <typename S>
struct TensorImpl {
    Shape shape;
    std::vector<S> values;
    std::vector<S> grad;  // empty until backward touches this node
    bool requires_grad = false;
    bool is_leaf = true;
    std::vector<std::shared_ptr<TensorImpl<S>>> parents;
    std::function<void()> backward_fn;

    int64_t numel() const { return static_cast<int64_t>(values.size()); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(values.size(), S(0));
    }
};

// Value-semantic handle to a shared tensor node.
template <typename S>
class Tensor {
public:
    using Scalar = S;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl<S>> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), S(0), requires_grad);
    }
    static Tensor full(Shape shape, S value, bool requires_grad = false) {
        auto impl = std::make_shared<TensorImpl<S>>();
        int64_t n = shape_numel(shape);
        impl->shape = std::move(shape);
        impl->values.assign(static_cast<size_t>(n), value);
        impl->requires_grad = requires_grad;
        return Tensor(std::move(impl));
    }
    static Tensor from_values(Shape shape, std::vector<S> values, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<int64_t>(values.size()))
            throw std::invalid_argument("tensor: value count " + std::to_string(values.size()) +
                                        " does not match shape " + shape_str(shape));
        auto impl = std::make_shared<TensorImpl<S>>();
        impl->shape = std::move(shape);
        impl->values = std::move(values);
        impl->requires_grad = requires_grad;
        return Tensor(std::move(impl));
    }
    static Tensor scalar(S value, bool requires_grad = false) {
        return from_values({1}, {value}, requires_grad);
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int64_t dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return impl_->numel(); }

    S* data() { return impl_->values.data(); }
    const S* data() const { return impl_->values.data(); }
    std::vector<S>& values() { return impl_->values; }
    const std::vector<S>& values() const { return impl_->values; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool rg) { impl_->requires_grad = rg; }
    bool is_leaf() const { return impl_->is_leaf; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::vector<S>& grad() {
        impl_->ensure_grad();
        return impl_->grad;
    }
    const std::vector<S>& grad() const { return impl_->grad; }
    void zero_grad() {
        if (!impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), S(0));
    }

    int64_t offset(std::initializer_list<int64_t> idx) const {
        int64_t off = 0;
        size_t d = 0;
        for (int64_t i : idx) {
            off = off * impl_->shape[d] + i;
            ++d;
        }
        return off;
    }
    S& at(std::initializer_list<int64_t> idx) { return impl_->values[static_cast<size_t>(offset(idx))]; }
    S at(std::initializer_list<int64_t> idx) const { return impl_->values[static_cast<size_t>(offset(idx))]; }

    // Reverse-mode sweep from a scalar. Grads of leaves accumulate across
    // calls; grads of interior nodes are scratch and reset per call.
    void backward() const;

    std::shared_ptr<TensorImpl<S>> impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl<S>> impl_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// Number of worker threads allowed inside batched tensor ops (sample-parallel
// with a fixed reduction order, so results do not depend on the setting).
void set_tensor_threads(int n);
int tensor_threads();

// Runs fn(begin, end) over a partition of [0, count) on the configured workers.
void parallel_for_samples(int64_t count, const std::function<void(int64_t, int64_t)>& fn);

}  // namespace spanocr
