#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "metnet/errors.hpp"

namespace metnet {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (const auto d : shape) {
        if (d <= 0) throw ShapeError("tensor dimensions must be positive");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

// Dense row-major tensor. Storage is shared so tensors behave like cheap
// handles; autodiff lambdas capture them by value and write through grad().
// Gradient buffers exist only while requires_grad is set.
template <class S>
class TensorT {
public:
    TensorT() : shape_{0}, data_(std::make_shared<std::vector<S>>()) {}

    explicit TensorT(Shape shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<S>>(static_cast<std::size_t>(shape_numel(shape_)), S(0))) {}

    TensorT(Shape shape, std::vector<S> values) : shape_(std::move(shape)) {
        if (static_cast<std::int64_t>(values.size()) != shape_numel(shape_)) {
            throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                             shape_str(shape_));
        }
        data_ = std::make_shared<std::vector<S>>(std::move(values));
    }

    static TensorT zeros(Shape shape) { return TensorT(std::move(shape)); }

    static TensorT full(Shape shape, S value) {
        TensorT t(std::move(shape));
        for (auto& x : *t.data_) x = value;
        return t;
    }

    const Shape& shape() const { return shape_; }
    std::int64_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t rank() const { return shape_.size(); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_->size()); }

    S* data() { return data_->data(); }
    const S* data() const { return data_->data(); }
    std::vector<S>& vec() { return *data_; }
    const std::vector<S>& vec() const { return *data_; }

    S& at(std::int64_t i) { return (*data_)[static_cast<std::size_t>(i)]; }
    S at(std::int64_t i) const { return (*data_)[static_cast<std::size_t>(i)]; }

    S scalar() const {
        if (numel() != 1) throw ShapeError("scalar() on tensor of shape " + shape_str(shape_));
        return (*data_)[0];
    }

    bool requires_grad() const { return requires_grad_; }

    TensorT& set_requires_grad(bool on) {
        requires_grad_ = on;
        if (on && !grad_) grad_ = std::make_shared<std::vector<S>>(data_->size(), S(0));
        if (!on) grad_.reset();
        return *this;
    }

    S* grad() { return grad_ ? grad_->data() : nullptr; }
    const S* grad() const { return grad_ ? grad_->data() : nullptr; }
    std::vector<S>& grad_vec() { return *grad_; }

    void zero_grad() {
        if (grad_) std::fill(grad_->begin(), grad_->end(), S(0));
    }

    // Deep copy of values only; the copy does not track gradients.
    TensorT detached_copy() const { return TensorT(shape_, *data_); }

    template <class T>
    TensorT<T> cast() const {
        std::vector<T> out(data_->size());
        for (std::size_t i = 0; i < data_->size(); ++i) out[i] = static_cast<T>((*data_)[i]);
        return TensorT<T>(shape_, std::move(out));
    }

    bool same_shape(const TensorT& other) const { return shape_ == other.shape_; }

private:
    Shape shape_;
    std::shared_ptr<std::vector<S>> data_;
    std::shared_ptr<std::vector<S>> grad_;
    bool requires_grad_ = false;
};

// Reverse-mode tape. Ops append one node per executed op; backward seeds the
// loss gradient and replays the nodes once, in reverse execution order.
// Nodes whose outputs never feed the loss see zero output gradients and
// propagate zeros, which is what gives unreachable parameters a zero grad.
template <class S>
class TapeT {
public:
    struct Node {
        const char* op;
        std::function<void()> backward;
    };

    void record(const char* op, std::function<void()> backward) {
        nodes_.push_back(Node{op, std::move(backward)});
    }

    std::size_t size() const { return nodes_.size(); }

    void backward(TensorT<S>& loss) {
        if (loss.numel() != 1) {
            throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
        }
        if (!loss.requires_grad() || loss.grad() == nullptr) {
            throw ShapeError("backward requires a loss connected to the tape");
        }
        loss.grad()[0] = S(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
    }

    static TapeT*& active() {
        thread_local TapeT* current = nullptr;
        return current;
    }

    // RAII installer; ops record onto the innermost active tape.
    class Scope {
    public:
        explicit Scope(TapeT& tape) : previous_(active()) { active() = &tape; }
        ~Scope() { active() = previous_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        TapeT* previous_;
    };

private:
    std::vector<Node> nodes_;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

}  // namespace metnet
