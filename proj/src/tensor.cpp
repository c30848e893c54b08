#include "spanocr/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <thread>
#include <unordered_set>

namespace spanocr {

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d < 0) throw std::invalid_argument("tensor: negative extent in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

template <typename S>
void Tensor<S>::backward() const {
    if (!impl_) throw std::invalid_argument("backward: undefined tensor");
    if (numel() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(shape()));

    // Topological order, parents before children.
    std::vector<TensorImpl<S>*> order;
    std::unordered_set<TensorImpl<S>*> seen;
    struct Frame {
        TensorImpl<S>* node;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({impl_.get(), 0});
    seen.insert(impl_.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            TensorImpl<S>* p = f.node->parents[f.next_parent++].get();
            if (seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    for (TensorImpl<S>* node : order) {
        if (node->is_leaf) {
            if (node->requires_grad) node->ensure_grad();
        } else {
            node->grad.assign(node->values.size(), S(0));
        }
    }
    if (impl_->requires_grad || !impl_->is_leaf) {
        impl_->ensure_grad();
        impl_->grad[0] += S(1);
    }

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn();
    }
}

template class Tensor<float>;
template class Tensor<double>;

namespace {
std::atomic<int> g_tensor_threads{1};
}

void set_tensor_threads(int n) { g_tensor_threads.store(n < 1 ? 1 : n); }
int tensor_threads() { return g_tensor_threads.load(); }

void parallel_for_samples(int64_t count, const std::function<void(int64_t, int64_t)>& fn) {
    int threads = tensor_threads();
    if (threads <= 1 || count <= 1) {
        fn(0, count);
        return;
    }
    int64_t workers = std::min<int64_t>(threads, count);
    int64_t chunk = (count + workers - 1) / workers;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int64_t w = 0; w < workers; ++w) {
        int64_t begin = w * chunk;
        int64_t end = std::min(count, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back([&fn, begin, end] { fn(begin, end); });
    }
    for (auto& t : pool) t.join();
}

}  // namespace spanocr
