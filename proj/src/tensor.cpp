#include "msil/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace msil {

std::string Shape::str() const {
    std::ostringstream os;
    os << '(' << n << ',' << c << ',' << h << ',' << w << ')';
    return os.str();
}

namespace {

std::atomic<std::uint64_t> g_sequence{0};

std::shared_ptr<detail::TensorImpl> make_impl(Shape shape, std::vector<double> data,
                                              bool requires_grad) {
    if (!shape.valid()) throw ShapeError("tensor shape must be positive, got " + shape.str());
    if (data.size() != shape.numel()) {
        throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                         shape.str());
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = shape;
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return impl;
}

detail::TensorImpl& deref(const std::shared_ptr<detail::TensorImpl>& impl) {
    if (!impl) throw std::logic_error("use of undefined tensor");
    return *impl;
}

thread_local BranchRecorder* t_recorder = nullptr;
thread_local bool t_no_grad = false;

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(shape, 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    if (!shape.valid()) throw ShapeError("tensor shape must be positive, got " + shape.str());
    return Tensor(make_impl(shape, std::vector<double>(shape.numel(), value), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    return Tensor(make_impl(shape, std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1, 1, 1, 1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return deref(impl_).shape; }

std::span<const double> Tensor::data() const { return deref(impl_).data; }

std::span<double> Tensor::mutable_data() {
    auto& impl = deref(impl_);
    if (impl.grad_fn) throw std::logic_error("in-place write to a non-leaf tensor");
    return impl.data;
}

bool Tensor::requires_grad() const { return deref(impl_).requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
    auto& impl = deref(impl_);
    if (impl.grad_fn && !on) throw std::logic_error("cannot clear requires_grad on a non-leaf");
    impl.requires_grad = on;
    return *this;
}

bool Tensor::is_leaf() const { return deref(impl_).grad_fn == nullptr; }

bool Tensor::has_grad() const {
    const auto& impl = deref(impl_);
    return !impl.grad.empty() && impl.grad.size() == impl.data.size();
}

std::span<const double> Tensor::grad() const {
    if (!has_grad()) throw std::logic_error("tensor has no gradient");
    return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
    auto& impl = deref(impl_);
    impl.ensure_grad();
    return impl.grad;
}

void Tensor::zero_grad() {
    auto& impl = deref(impl_);
    if (!impl.grad.empty()) std::fill(impl.grad.begin(), impl.grad.end(), 0.0);
}

double Tensor::item() const {
    const auto& impl = deref(impl_);
    if (impl.data.size() != 1) throw ShapeError("item() on non-scalar tensor " + impl.shape.str());
    return impl.data[0];
}

std::size_t Tensor::offset(int n, int c, int h, int w) const {
    const Shape& s = shape();
    return ((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w + w;
}

double Tensor::at(int n, int c, int h, int w) const { return data()[offset(n, c, h, w)]; }

Tensor Tensor::detach() const {
    const auto& impl = deref(impl_);
    return Tensor(make_impl(impl.shape, impl.data, false));
}

void Tensor::backward() const {
    auto& root = deref(impl_);
    if (root.shape.numel() != 1) {
        throw ShapeError("backward() needs a scalar loss, got shape " + root.shape.str());
    }
    if (!root.requires_grad) throw std::logic_error("backward() on a tensor that needs no gradient");

    // Collect every tensor reachable through recorded ops.
    std::vector<detail::TensorImpl*> interior;
    std::unordered_set<detail::TensorImpl*> seen;
    std::vector<detail::TensorImpl*> stack{impl_.get()};
    seen.insert(impl_.get());
    while (!stack.empty()) {
        detail::TensorImpl* t = stack.back();
        stack.pop_back();
        if (!t->grad_fn) {
            t->ensure_grad();
            continue;
        }
        interior.push_back(t);
        for (const auto& in : t->grad_fn->inputs) {
            if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
        }
    }
    for (auto* t : interior) t->grad.assign(t->data.size(), 0.0);
    root.grad[0] += 1.0;

    // Later construction means later in every topological order.
    std::sort(interior.begin(), interior.end(), [](const auto* a, const auto* b) {
        return a->grad_fn->sequence > b->grad_fn->sequence;
    });
    for (auto* t : interior) t->grad_fn->backward(t->grad);
    for (auto* t : interior) {
        if (t != impl_.get()) std::vector<double>().swap(t->grad);
    }
}

Tensor record_op(std::string op, Shape shape, std::vector<double> data,
                 const std::vector<Tensor>& inputs,
                 std::function<void(std::span<const double>)> backward) {
    bool needs = false;
    if (!t_no_grad)
        for (const auto& in : inputs) needs = needs || in.requires_grad();
    auto impl = make_impl(shape, std::move(data), needs);
    if (needs) {
        auto node = std::make_shared<detail::TapeNode>();
        node->op = std::move(op);
        for (const auto& in : inputs) node->inputs.push_back(in.impl());
        node->backward = std::move(backward);
        node->sequence = g_sequence.fetch_add(1, std::memory_order_relaxed);
        impl->grad_fn = std::move(node);
    }
    return Tensor(std::move(impl));
}

NoGradGuard::NoGradGuard() : previous_(t_no_grad) { t_no_grad = true; }

NoGradGuard::~NoGradGuard() { t_no_grad = previous_; }

bool NoGradGuard::enabled() { return t_no_grad; }

BranchRecorder::BranchRecorder() : previous_(t_recorder) { t_recorder = this; }

BranchRecorder::~BranchRecorder() { t_recorder = previous_; }

void BranchRecorder::note(std::uint64_t choice) {
    if (!t_recorder) return;
    // FNV-1a over the eight bytes of `choice`.
    std::uint64_t h = t_recorder->hash_;
    for (int i = 0; i < 8; ++i) {
        h ^= (choice >> (8 * i)) & 0xffu;
        h *= 1099511628211ull;
    }
    t_recorder->hash_ = h;
}

bool BranchRecorder::active() { return t_recorder != nullptr; }

}  // namespace msil
