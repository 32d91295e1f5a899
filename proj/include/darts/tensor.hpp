#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "darts/common.hpp"
#include "darts/rng.hpp"

namespace darts {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {
struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
};
}  // namespace detail

// Dense float64 tensor with a gradient slot. Value-semantic handle over
// shared storage: copies alias the same buffer.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);

    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = true);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape[i]; }
    std::size_t numel() const { return node_->data.size(); }

    std::vector<double>& data() { return node_->data; }
    const std::vector<double>& data() const { return node_->data; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    bool has_grad() const { return !node_->grad.empty(); }
    // Lazily allocates zeros of matching shape.
    std::vector<double>& grad();
    const std::vector<double>& grad() const;
    void zero_grad();

    double value() const;  // scalar convenience

    // Flat accessors.
    double& operator[](std::size_t i) { return node_->data[i]; }
    double operator[](std::size_t i) const { return node_->data[i]; }

    // Row-major 4-d accessor (N, C, H, W).
    double& at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
        const Shape& s = node_->shape;
        return node_->data[((n * s[1] + c) * s[2] + h) * s[3] + w];
    }
    double at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        const Shape& s = node_->shape;
        return node_->data[((n * s[1] + c) * s[2] + h) * s[3] + w];
    }

    Tensor clone() const;  // deep copy of data (grad not copied)

    bool same_storage(const Tensor& other) const { return node_ == other.node_; }
    const void* id() const { return node_.get(); }

    std::shared_ptr<detail::TensorNode> node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::TensorNode> node_;
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

// Wengert list. Primitives append a backward closure at execution time;
// backward(loss) replays the closures in reverse recorded order. One tape
// is active per thread; a Tape object activates itself on construction and
// restores the previous one on destruction. Confined to one thread.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current();
    // True when a tape is active and recording is not suspended.
    static bool recording();

    // `output` is the node the op produced; its grad buffer is transient and
    // reset at the start of every replay so repeated backward passes only
    // accumulate into leaves.
    void record(const char* op, std::shared_ptr<detail::TensorNode> output,
                std::function<void()> backward_fn);
    std::size_t size() const { return entries_.size(); }
    void clear() { entries_.clear(); }

    void replay_backward();
    void reset_intermediate_grads();

private:
    struct Entry {
        const char* op;
        std::shared_ptr<detail::TensorNode> output;
        std::function<void()> fn;
    };
    std::vector<Entry> entries_;
    Tape* prev_ = nullptr;
};

// Suspends recording on the current thread (forward passes in eval loops).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Seeds d(loss)/d(loss) = 1 and replays the active tape in reverse, so every
// requires_grad tensor reachable from the loss accumulates its gradient.
// Accumulation is additive across calls.
void backward(const Tensor& loss);

}  // namespace darts
