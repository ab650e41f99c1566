#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "tabdeco/errors.hpp"

namespace tabdeco {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) {
        os << shape[i] << (i + 1 < shape.size() ? "," : "");
    }
    os << ")";
    return os.str();
}

template <typename S>
struct StorageT {
    Shape shape;
    std::vector<S> values;
    std::vector<S> grad;  // empty until a gradient is accumulated
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.empty()) {
            grad.assign(values.size(), S(0));
        }
    }
};

// Dense row-major tensor with value semantics over a shared storage node.
// Data is written once by the producing operation and treated as immutable
// afterwards; gradients live beside the values and are populated by
// Tape::backward.
template <typename S>
class TensorT {
  public:
    using Storage = StorageT<S>;

    TensorT() = default;

    explicit TensorT(Shape shape) : node_(std::make_shared<Storage>()) {
        validate_shape(shape);
        node_->shape = std::move(shape);
        node_->values.assign(static_cast<size_t>(shape_numel(node_->shape)), S(0));
    }

    TensorT(Shape shape, std::vector<S> data) : node_(std::make_shared<Storage>()) {
        validate_shape(shape);
        if (static_cast<int64_t>(data.size()) != shape_numel(shape)) {
            throw ShapeError("tensor: data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        }
        node_->shape = std::move(shape);
        node_->values = std::move(data);
    }

    static TensorT scalar(S v) { return TensorT(Shape{}, std::vector<S>{v}); }

    static TensorT full(Shape shape, S v) {
        TensorT t(std::move(shape));
        for (S& x : t.node_->values) {
            x = v;
        }
        return t;
    }

    bool defined() const { return node_ != nullptr; }

    const Shape& shape() const { return node_->shape; }
    int64_t rank() const { return static_cast<int64_t>(node_->shape.size()); }
    int64_t size() const { return static_cast<int64_t>(node_->values.size()); }
    int64_t dim(int64_t axis) const { return node_->shape[static_cast<size_t>(axis)]; }

    std::vector<S>& values() { return node_->values; }
    const std::vector<S>& values() const { return node_->values; }

    bool requires_grad() const { return node_->requires_grad; }
    TensorT& set_requires_grad(bool on) {
        node_->requires_grad = on;
        return *this;
    }

    bool has_grad() const { return !node_->grad.empty(); }
    std::vector<S>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    const std::vector<S>& grad() const {
        if (node_->grad.empty()) {
            throw NumericError("tensor: gradient not populated");
        }
        return node_->grad;
    }
    void zero_grad() { node_->grad.assign(node_->values.size(), S(0)); }
    void clear_grad() { node_->grad.clear(); }

    S item() const {
        if (size() != 1) {
            throw ShapeError("tensor: item() on non-scalar shape " + shape_str(shape()));
        }
        return node_->values[0];
    }

    S at(std::initializer_list<int64_t> idx) const {
        return node_->values[static_cast<size_t>(flat_index(idx))];
    }
    S& at(std::initializer_list<int64_t> idx) {
        return node_->values[static_cast<size_t>(flat_index(idx))];
    }

    // Deep copy of values; no graph lineage, no gradient.
    TensorT clone() const {
        TensorT out(node_->shape, node_->values);
        out.node_->requires_grad = node_->requires_grad;
        return out;
    }

    std::shared_ptr<Storage> node() const { return node_; }

  private:
    int64_t flat_index(std::initializer_list<int64_t> idx) const {
        const Shape& sh = node_->shape;
        if (idx.size() != sh.size()) {
            throw ShapeError("tensor: index rank mismatch for shape " + shape_str(sh));
        }
        int64_t flat = 0;
        size_t k = 0;
        for (int64_t i : idx) {
            flat = flat * sh[k] + i;
            ++k;
        }
        return flat;
    }

    static void validate_shape(const Shape& shape) {
        for (int64_t d : shape) {
            if (d <= 0) {
                throw ShapeError("tensor: non-positive dimension in shape " + shape_str(shape));
            }
        }
    }

    std::shared_ptr<Storage> node_;
};

// Ordered record of executed differentiable operations. Each entry holds the
// output storage and a closure that pushes the output gradient into the
// entry's inputs. Entries are appended in execution order, so replaying them
// in reverse is a valid topological order of the data-flow graph.
//
// backward() clears the gradients of every recorded output before replaying,
// so repeated backward calls accumulate additively into leaf gradients while
// each pass distributes intermediate gradients exactly once.
template <typename S>
class TapeT {
  public:
    bool recording() const { return recording_; }
    void set_recording(bool on) { recording_ = on; }

    void record(std::shared_ptr<StorageT<S>> out, std::function<void()> fn) {
        entries_.push_back(Entry{std::move(out), std::move(fn)});
    }

    size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    void clear() { entries_.clear(); }

    void backward(TensorT<S>& loss) {
        if (loss.size() != 1) {
            throw NumericError("backward: loss must be scalar, got shape " +
                               shape_str(loss.shape()));
        }
        if (entries_.empty()) {
            throw NumericError("backward: tape is empty");
        }
        for (Entry& e : entries_) {
            e.out->grad.clear();
        }
        loss.grad()[0] = S(1);
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            it->fn();
        }
    }

  private:
    struct Entry {
        std::shared_ptr<StorageT<S>> out;
        std::function<void()> fn;
    };

    std::vector<Entry> entries_;
    bool recording_ = true;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

}  // namespace tabdeco
