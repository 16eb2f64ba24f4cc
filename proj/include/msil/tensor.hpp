#pragma once

// Dense NCHW tensors with reverse-mode automatic differentiation.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace msil {

struct Shape {
    int n = 1;
    int c = 1;
    int h = 1;
    int w = 1;

    [[nodiscard]] std::size_t numel() const {
        return static_cast<std::size_t>(n) * c * h * w;
    }
    [[nodiscard]] std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
    [[nodiscard]] bool valid() const { return n > 0 && c > 0 && h > 0 && w > 0; }
    [[nodiscard]] std::string str() const;

    friend bool operator==(const Shape&, const Shape&) = default;
};

// Raised for any operand shape the op does not accept.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

namespace detail {

struct TensorImpl;

// One recorded operation. `backward` reads the output gradient and adds into
// the gradients of `inputs` that require them.
struct TapeNode {
    std::string op;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::function<void(std::span<const double> grad_out)> backward;
    std::uint64_t sequence = 0;
};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    std::shared_ptr<TapeNode> grad_fn;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    [[nodiscard]] bool defined() const { return impl_ != nullptr; }
    [[nodiscard]] const Shape& shape() const;
    [[nodiscard]] std::size_t numel() const { return shape().numel(); }

    [[nodiscard]] std::span<const double> data() const;
    // Only leaves may be written in place (parameters, optimizer updates).
    [[nodiscard]] std::span<double> mutable_data();

    [[nodiscard]] bool requires_grad() const;
    Tensor& set_requires_grad(bool on);
    [[nodiscard]] bool is_leaf() const;

    [[nodiscard]] bool has_grad() const;
    [[nodiscard]] std::span<const double> grad() const;
    [[nodiscard]] std::span<double> mutable_grad();
    void zero_grad();

    [[nodiscard]] double item() const;
    [[nodiscard]] double at(int n, int c, int h, int w) const;
    [[nodiscard]] std::size_t offset(int n, int c, int h, int w) const;

    // Deep copy of the values into a fresh leaf with no history.
    [[nodiscard]] Tensor detach() const;

    // Reverse-mode sweep from this scalar. Leaf gradients accumulate.
    void backward() const;

    [[nodiscard]] bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
    [[nodiscard]] const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

// Builds the output of a custom differentiable op. The node is recorded only
// when one of `inputs` requires a gradient; otherwise `backward` is dropped.
Tensor record_op(std::string op, Shape shape, std::vector<double> data,
                 const std::vector<Tensor>& inputs,
                 std::function<void(std::span<const double> grad_out)> backward);

// While alive, ops on this thread record no history (evaluation mode).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

    static bool enabled();

private:
    bool previous_;
};

// Records the branch taken at non-smooth points (ReLU masks, max-pool argmax,
// min/max selections). A finite-difference check compares fingerprints of the
// perturbed passes against the base pass to tell whether a step crossed a kink.
class BranchRecorder {
public:
    BranchRecorder();
    ~BranchRecorder();
    BranchRecorder(const BranchRecorder&) = delete;
    BranchRecorder& operator=(const BranchRecorder&) = delete;

    [[nodiscard]] std::uint64_t fingerprint() const { return hash_; }
    void reset() { hash_ = kSeed; }

    static void note(std::uint64_t choice);
    static bool active();

private:
    static constexpr std::uint64_t kSeed = 1469598103934665603ull;
    std::uint64_t hash_ = kSeed;
    BranchRecorder* previous_ = nullptr;
};

}  // namespace msil
