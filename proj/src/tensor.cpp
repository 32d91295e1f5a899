#include "darts/tensor.hpp"

#include <cmath>

namespace darts {

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    out += "]";
    return out;
}

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

Tensor::Tensor(Shape shape, double fill, bool requires_grad) {
    for (std::size_t d : shape) {
        if (d == 0) throw ShapeError(str("tensor dims must be positive, got ", shape_str(shape)));
    }
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = std::move(shape);
    node->data.assign(shape_numel(node->shape), fill);
    node->requires_grad = requires_grad;
    node_ = std::move(node);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != data.size()) {
        throw ShapeError(str("data length ", data.size(), " does not match shape ", shape_str(shape)));
    }
    Tensor t(shape, 0.0, requires_grad);
    t.node_->data = std::move(data);
    return t;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return from_data({1}, {v}, requires_grad);
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad) {
    Tensor t(std::move(shape), 0.0, requires_grad);
    for (double& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

std::vector<double>& Tensor::grad() {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
    return node_->grad;
}

const std::vector<double>& Tensor::grad() const {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
    return node_->grad;
}

void Tensor::zero_grad() {
    if (!node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
}

double Tensor::value() const {
    if (numel() != 1) throw ShapeError(str("value() on non-scalar tensor of shape ", shape_str(shape())));
    return node_->data[0];
}

Tensor Tensor::clone() const {
    return from_data(shape(), data(), requires_grad());
}

namespace {
thread_local Tape* t_current_tape = nullptr;
thread_local bool t_grad_enabled = true;
}  // namespace

Tape::Tape() {
    prev_ = t_current_tape;
    t_current_tape = this;
}

Tape::~Tape() { t_current_tape = prev_; }

Tape* Tape::current() { return t_current_tape; }

bool Tape::recording() { return t_current_tape != nullptr && t_grad_enabled; }

void Tape::record(const char* op, std::shared_ptr<detail::TensorNode> output,
                  std::function<void()> backward_fn) {
    entries_.push_back({op, std::move(output), std::move(backward_fn)});
}

void Tape::replay_backward() {
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->fn();
}

void Tape::reset_intermediate_grads() {
    for (Entry& e : entries_) {
        if (e.output && !e.output->grad.empty()) {
            e.output->grad.assign(e.output->data.size(), 0.0);
        }
    }
}

NoGradGuard::NoGradGuard() {
    prev_ = t_grad_enabled;
    t_grad_enabled = false;
}

NoGradGuard::~NoGradGuard() { t_grad_enabled = prev_; }

void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw NumericError(str("backward() needs a scalar loss, got shape ", shape_str(loss.shape())));
    }
    if (!loss.requires_grad()) {
        throw NumericError("backward() loss is not connected to any requires_grad tensor on the tape");
    }
    Tape* tape = Tape::current();
    if (tape == nullptr) throw NumericError("backward() called with no active tape");
    tape->reset_intermediate_grads();
    const_cast<Tensor&>(loss).grad()[0] += 1.0;
    tape->replay_backward();
}

}  // namespace darts
