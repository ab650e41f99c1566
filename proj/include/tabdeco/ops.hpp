#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tabdeco/parallel.hpp"
#include "tabdeco/rng.hpp"
#include "tabdeco/tensor.hpp"

// Differentiable tensor operations. Every op validates shapes eagerly,
// computes its value, and (when the tape is recording and any input requires
// a gradient) records a closure that pushes the output gradient into the
// inputs. Closures skip inputs with requires_grad == false, so gradients of
// such tensors are never materialized. All ops copy; no aliasing is visible
// to callers.

namespace tabdeco::ops {

namespace detail {

inline std::vector<int64_t> row_major_strides(const Shape& shape) {
    std::vector<int64_t> strides(shape.size(), 1);
    for (size_t i = shape.size(); i-- > 1;) {
        strides[i - 1] = strides[i] * shape[i];
    }
    return strides;
}

inline int64_t outer_size(const Shape& shape, int64_t axis) {
    int64_t n = 1;
    for (int64_t i = 0; i < axis; ++i) {
        n *= shape[static_cast<size_t>(i)];
    }
    return n;
}

inline int64_t inner_size(const Shape& shape, int64_t axis) {
    int64_t n = 1;
    for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) {
        n *= shape[i];
    }
    return n;
}

template <typename S>
bool should_record(const TapeT<S>& tape, std::initializer_list<const TensorT<S>*> inputs) {
    if (!tape.recording()) {
        return false;
    }
    for (const TensorT<S>* t : inputs) {
        if (t->requires_grad()) {
            return true;
        }
    }
    return false;
}

inline void check_same_shape(const char* op, const Shape& a, const Shape& b) {
    if (a != b) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                         shape_str(b));
    }
}

inline void check_axis(const char* op, const Shape& shape, int64_t axis) {
    if (axis < 0 || axis >= static_cast<int64_t>(shape.size())) {
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for shape " + shape_str(shape));
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> add(TapeT<S>& tape, const TensorT<S>& a, const TensorT<S>& b) {
    detail::check_same_shape("add", a.shape(), b.shape());
    TensorT<S> out(a.shape());
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) {
        out.values()[i] = a.values()[i] + b.values()[i];
    }
    if (detail::should_record(tape, {&a, &b})) {
        out.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = out.node();
        tape.record(on, [an, bn, on] {
            if (on->grad.empty()) return;
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
            }
        });
    }
    return out;
}

template <typename S>
TensorT<S> sub(TapeT<S>& tape, const TensorT<S>& a, const TensorT<S>& b) {
    detail::check_same_shape("sub", a.shape(), b.shape());
    TensorT<S> out(a.shape());
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) {
        out.values()[i] = a.values()[i] - b.values()[i];
    }
    if (detail::should_record(tape, {&a, &b})) {
        out.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = out.node();
        tape.record(on, [an, bn, on] {
            if (on->grad.empty()) return;
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
            }
        });
    }
    return out;
}

template <typename S>
TensorT<S> mul(TapeT<S>& tape, const TensorT<S>& a, const TensorT<S>& b) {
    detail::check_same_shape("mul", a.shape(), b.shape());
    TensorT<S> out(a.shape());
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) {
        out.values()[i] = a.values()[i] * b.values()[i];
    }
    if (detail::should_record(tape, {&a, &b})) {
        out.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = out.node();
        tape.record(on, [an, bn, on] {
            if (on->grad.empty()) return;
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i)
                    an->grad[i] += bn->values[i] * on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i)
                    bn->grad[i] += an->values[i] * on->grad[i];
            }
        });
    }
    return out;
}

template <typename S>
TensorT<S> scale(TapeT<S>& tape, const TensorT<S>& a, S c) {
    TensorT<S> out(a.shape());
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) {
        out.values()[i] = c * a.values()[i];
    }
    if (detail::should_record(tape, {&a})) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        tape.record(on, [an, on, c] {
            if (on->grad.empty() || !an->requires_grad) return;
            an->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += c * on->grad[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> exp(TapeT<S>& tape, const TensorT<S>& a) {
    TensorT<S> out(a.shape());
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) {
        out.values()[i] = std::exp(a.values()[i]);
    }
    if (detail::should_record(tape, {&a})) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        tape.record(on, [an, on] {
            if (on->grad.empty() || !an->requires_grad) return;
            an->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i)
                an->grad[i] += on->values[i] * on->grad[i];
        });
    }
    return out;
}

template <typename S>
TensorT<S> log(TapeT<S>& tape, const TensorT<S>& a) {
    TensorT<S> out(a.shape());
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) {
        out.values()[i] = std::log(a.values()[i]);
    }
    if (detail::should_record(tape, {&a})) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        tape.record(on, [an, on] {
            if (on->grad.empty() || !an->requires_grad) return;
            an->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i)
                an->grad[i] += on->grad[i] / an->values[i];
        });
    }
    return out;
}

template <typename S>
TensorT<S> relu(TapeT<S>& tape, const TensorT<S>& a) {
    TensorT<S> out(a.shape());
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) {
        out.values()[i] = a.values()[i] > S(0) ? a.values()[i] : S(0);
    }
    if (detail::should_record(tape, {&a})) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        tape.record(on, [an, on] {
            if (on->grad.empty() || !an->requires_grad) return;
            an->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i) {
                if (an->values[i] > S(0)) an->grad[i] += on->grad[i];
            }
        });
    }
    return out;
}

// Exact (erf-based) GELU; smooth everywhere, which keeps finite-difference
// checks clean.
template <typename S>
TensorT<S> gelu(TapeT<S>& tape, const TensorT<S>& a) {
    static const S inv_sqrt2 = S(0.70710678118654752440);
    static const S inv_sqrt2pi = S(0.39894228040143267794);
    TensorT<S> out(a.shape());
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) {
        const S x = a.values()[i];
        out.values()[i] = S(0.5) * x * (S(1) + std::erf(x * inv_sqrt2));
    }
    if (detail::should_record(tape, {&a})) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        tape.record(on, [an, on] {
            if (on->grad.empty() || !an->requires_grad) return;
            an->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i) {
                const S x = an->values[i];
                const S cdf = S(0.5) * (S(1) + std::erf(x * inv_sqrt2));
                const S pdf = inv_sqrt2pi * std::exp(S(-0.5) * x * x);
                an->grad[i] += (cdf + x * pdf) * on->grad[i];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> sum(TapeT<S>& tape, const TensorT<S>& a) {
    S acc = S(0);
    for (const S v : a.values()) {
        acc += v;
    }
    TensorT<S> out = TensorT<S>::scalar(acc);
    if (detail::should_record(tape, {&a})) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        tape.record(on, [an, on] {
            if (on->grad.empty() || !an->requires_grad) return;
            an->ensure_grad();
            for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[0];
        });
    }
    return out;
}

template <typename S>
TensorT<S> mean(TapeT<S>& tape, const TensorT<S>& a) {
    S acc = S(0);
    for (const S v : a.values()) {
        acc += v;
    }
    const S inv_n = S(1) / static_cast<S>(a.size());
    TensorT<S> out = TensorT<S>::scalar(acc * inv_n);
    if (detail::should_record(tape, {&a})) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        tape.record(on, [an, on, inv_n] {
            if (on->grad.empty() || !an->requires_grad) return;
            an->ensure_grad();
            for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += inv_n * on->grad[0];
        });
    }
    return out;
}

namespace detail {

template <typename S>
TensorT<S> reduce_axis(TapeT<S>& tape, const TensorT<S>& a, int64_t axis, bool take_mean,
                       const char* op) {
    check_axis(op, a.shape(), axis);
    const int64_t outer = outer_size(a.shape(), axis);
    const int64_t len = a.dim(axis);
    const int64_t inner = inner_size(a.shape(), axis);
    Shape out_shape;
    for (int64_t i = 0; i < a.rank(); ++i) {
        if (i != axis) out_shape.push_back(a.dim(i));
    }
    TensorT<S> out(out_shape);
    const S w = take_mean ? S(1) / static_cast<S>(len) : S(1);
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t i = 0; i < inner; ++i) {
            S acc = S(0);
            for (int64_t k = 0; k < len; ++k) {
                acc += a.values()[(o * len + k) * inner + i];
            }
            out.values()[o * inner + i] = acc * w;
        }
    }
    if (should_record(tape, {&a})) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        tape.record(on, [an, on, outer, len, inner, w] {
            if (on->grad.empty() || !an->requires_grad) return;
            an->ensure_grad();
            for (int64_t o = 0; o < outer; ++o) {
                for (int64_t k = 0; k < len; ++k) {
                    for (int64_t i = 0; i < inner; ++i) {
                        an->grad[static_cast<size_t>((o * len + k) * inner + i)] +=
                            w * on->grad[static_cast<size_t>(o * inner + i)];
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace detail

template <typename S>
TensorT<S> sum_axis(TapeT<S>& tape, const TensorT<S>& a, int64_t axis) {
    return detail::reduce_axis(tape, a, axis, false, "sum_axis");
}

template <typename S>
TensorT<S> mean_axis(TapeT<S>& tape, const TensorT<S>& a, int64_t axis) {
    return detail::reduce_axis(tape, a, axis, true, "mean_axis");
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> reshape(TapeT<S>& tape, const TensorT<S>& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.size()) {
        throw ShapeError("reshape: cannot reshape " + shape_str(a.shape()) + " to " +
                         shape_str(new_shape));
    }
    TensorT<S> out(std::move(new_shape), a.values());
    if (detail::should_record(tape, {&a})) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        tape.record(on, [an, on] {
            if (on->grad.empty() || !an->requires_grad) return;
            an->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
        });
    }
    return out;
}

template <typename S>
TensorT<S> transpose(TapeT<S>& tape, const TensorT<S>& a, int64_t axis0, int64_t axis1) {
    detail::check_axis("transpose", a.shape(), axis0);
    detail::check_axis("transpose", a.shape(), axis1);
    Shape out_shape = a.shape();
    std::swap(out_shape[static_cast<size_t>(axis0)], out_shape[static_cast<size_t>(axis1)]);
    TensorT<S> out(out_shape);
    const auto in_strides = detail::row_major_strides(a.shape());
    const auto out_strides = detail::row_major_strides(out_shape);
    const int64_t rank = a.rank();
    const int64_t n = a.size();
    // src_index[out_flat] = flat index into a; out[..., i1, ..., i0, ...] =
    // a[..., i0, ..., i1, ...].
    std::vector<int64_t> src_index(static_cast<size_t>(n));
    for (int64_t out_flat = 0; out_flat < n; ++out_flat) {
        int64_t in_flat = 0;
        int64_t rem = out_flat;
        for (int64_t ax = 0; ax < rank; ++ax) {
            const int64_t idx = rem / out_strides[static_cast<size_t>(ax)];
            rem -= idx * out_strides[static_cast<size_t>(ax)];
            int64_t in_ax = ax;
            if (ax == axis0) in_ax = axis1;
            else if (ax == axis1) in_ax = axis0;
            in_flat += idx * in_strides[static_cast<size_t>(in_ax)];
        }
        src_index[static_cast<size_t>(out_flat)] = in_flat;
    }
    for (int64_t i = 0; i < n; ++i) {
        out.values()[i] = a.values()[src_index[static_cast<size_t>(i)]];
    }
    if (detail::should_record(tape, {&a})) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        tape.record(on, [an, on, src_index = std::move(src_index), n] {
            if (on->grad.empty() || !an->requires_grad) return;
            an->ensure_grad();
            for (int64_t i = 0; i < n; ++i) {
                an->grad[static_cast<size_t>(src_index[static_cast<size_t>(i)])] +=
                    on->grad[static_cast<size_t>(i)];
            }
        });
    }
    return out;
}

template <typename S>
TensorT<S> concat(TapeT<S>& tape, const std::vector<TensorT<S>>& parts, int64_t axis) {
    if (parts.empty()) {
        throw ShapeError("concat: no tensors given");
    }
    detail::check_axis("concat", parts[0].shape(), axis);
    Shape out_shape = parts[0].shape();
    int64_t total = 0;
    for (const TensorT<S>& p : parts) {
        if (p.rank() != parts[0].rank()) {
            throw ShapeError("concat: rank mismatch " + shape_str(p.shape()) + " vs " +
                             shape_str(parts[0].shape()));
        }
        for (int64_t i = 0; i < p.rank(); ++i) {
            if (i != axis && p.dim(i) != parts[0].dim(i)) {
                throw ShapeError("concat: shape mismatch off axis: " + shape_str(p.shape()) +
                                 " vs " + shape_str(parts[0].shape()));
            }
        }
        total += p.dim(axis);
    }
    out_shape[static_cast<size_t>(axis)] = total;
    TensorT<S> out(out_shape);
    const int64_t outer = detail::outer_size(out_shape, axis);
    const int64_t inner = detail::inner_size(out_shape, axis);
    int64_t offset = 0;
    for (const TensorT<S>& p : parts) {
        const int64_t len = p.dim(axis);
        for (int64_t o = 0; o < outer; ++o) {
            const S* src = p.values().data() + o * len * inner;
            S* dst = out.values().data() + (o * total + offset) * inner;
            std::copy(src, src + len * inner, dst);
        }
        offset += len;
    }
    bool any_grad = false;
    for (const TensorT<S>& p : parts) {
        any_grad = any_grad || p.requires_grad();
    }
    if (tape.recording() && any_grad) {
        out.set_requires_grad(true);
        std::vector<std::shared_ptr<StorageT<S>>> nodes;
        std::vector<int64_t> lens;
        for (const TensorT<S>& p : parts) {
            nodes.push_back(p.node());
            lens.push_back(p.dim(axis));
        }
        auto on = out.node();
        tape.record(on, [nodes, lens, on, outer, inner, total] {
            if (on->grad.empty()) return;
            int64_t offset = 0;
            for (size_t pi = 0; pi < nodes.size(); ++pi) {
                const int64_t len = lens[pi];
                if (nodes[pi]->requires_grad) {
                    nodes[pi]->ensure_grad();
                    for (int64_t o = 0; o < outer; ++o) {
                        const S* src = on->grad.data() + (o * total + offset) * inner;
                        S* dst = nodes[pi]->grad.data() + o * len * inner;
                        for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                    }
                }
                offset += len;
            }
        });
    }
    return out;
}

template <typename S>
TensorT<S> slice(TapeT<S>& tape, const TensorT<S>& a, int64_t axis, int64_t start, int64_t len) {
    detail::check_axis("slice", a.shape(), axis);
    if (start < 0 || len < 1 || start + len > a.dim(axis)) {
        throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of bounds for axis " +
                         std::to_string(axis) + " of " + shape_str(a.shape()));
    }
    Shape out_shape = a.shape();
    out_shape[static_cast<size_t>(axis)] = len;
    TensorT<S> out(out_shape);
    const int64_t outer = detail::outer_size(a.shape(), axis);
    const int64_t inner = detail::inner_size(a.shape(), axis);
    const int64_t full = a.dim(axis);
    for (int64_t o = 0; o < outer; ++o) {
        const S* src = a.values().data() + (o * full + start) * inner;
        S* dst = out.values().data() + o * len * inner;
        std::copy(src, src + len * inner, dst);
    }
    if (detail::should_record(tape, {&a})) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        tape.record(on, [an, on, outer, inner, full, start, len] {
            if (on->grad.empty() || !an->requires_grad) return;
            an->ensure_grad();
            for (int64_t o = 0; o < outer; ++o) {
                const S* src = on->grad.data() + o * len * inner;
                S* dst = an->grad.data() + (o * full + start) * inner;
                for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

// Single index along an axis; the axis is squeezed out of the result.
template <typename S>
TensorT<S> select(TapeT<S>& tape, const TensorT<S>& a, int64_t axis, int64_t index) {
    TensorT<S> s = slice(tape, a, axis, index, 1);
    Shape out_shape;
    for (int64_t i = 0; i < a.rank(); ++i) {
        if (i != axis) out_shape.push_back(a.dim(i));
    }
    return reshape(tape, s, out_shape);
}

// Right-aligned broadcast: every trailing dimension of `a` must equal the
// target dimension or be 1; missing leading dimensions are expanded.
template <typename S>
TensorT<S> broadcast_to(TapeT<S>& tape, const TensorT<S>& a, Shape target) {
    const int64_t ra = a.rank();
    const int64_t rt = static_cast<int64_t>(target.size());
    if (ra > rt) {
        throw ShapeError("broadcast_to: rank of " + shape_str(a.shape()) + " exceeds target " +
                         shape_str(target));
    }
    for (int64_t i = 0; i < ra; ++i) {
        const int64_t ad = a.dim(ra - 1 - i);
        const int64_t td = target[static_cast<size_t>(rt - 1 - i)];
        if (ad != td && ad != 1) {
            throw ShapeError("broadcast_to: cannot broadcast " + shape_str(a.shape()) + " to " +
                             shape_str(target));
        }
    }
    TensorT<S> out(target);
    const auto out_strides = detail::row_major_strides(target);
    const auto in_strides = detail::row_major_strides(a.shape());
    const int64_t n = out.size();
    std::vector<int64_t> src_index(static_cast<size_t>(n));
    for (int64_t out_flat = 0; out_flat < n; ++out_flat) {
        int64_t in_flat = 0;
        int64_t rem = out_flat;
        for (int64_t ax = 0; ax < rt; ++ax) {
            const int64_t idx = rem / out_strides[static_cast<size_t>(ax)];
            rem -= idx * out_strides[static_cast<size_t>(ax)];
            const int64_t in_ax = ax - (rt - ra);
            if (in_ax >= 0 && a.dim(in_ax) != 1) {
                in_flat += idx * in_strides[static_cast<size_t>(in_ax)];
            }
        }
        src_index[static_cast<size_t>(out_flat)] = in_flat;
    }
    for (int64_t i = 0; i < n; ++i) {
        out.values()[i] = a.values()[src_index[static_cast<size_t>(i)]];
    }
    if (detail::should_record(tape, {&a})) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        tape.record(on, [an, on, src_index = std::move(src_index), n] {
            if (on->grad.empty() || !an->requires_grad) return;
            an->ensure_grad();
            for (int64_t i = 0; i < n; ++i) {
                an->grad[static_cast<size_t>(src_index[static_cast<size_t>(i)])] +=
                    on->grad[static_cast<size_t>(i)];
            }
        });
    }
    return out;
}

// Row lookup: table (n, rest...) gathered by integer indices -> (k, rest...).
// Gradient scatter-adds into the gathered rows.
template <typename S>
TensorT<S> gather_rows(TapeT<S>& tape, const TensorT<S>& table,
                       const std::vector<int64_t>& indices) {
    if (table.rank() < 1) {
        throw ShapeError("gather_rows: table must have rank >= 1");
    }
    const int64_t n_rows = table.dim(0);
    const int64_t row = detail::inner_size(table.shape(), 0);
    for (const int64_t idx : indices) {
        if (idx < 0 || idx >= n_rows) {
            throw ShapeError("gather_rows: index " + std::to_string(idx) +
                             " out of range [0, " + std::to_string(n_rows) + ")");
        }
    }
    Shape out_shape = table.shape();
    out_shape[0] = static_cast<int64_t>(indices.size());
    TensorT<S> out(out_shape);
    for (size_t i = 0; i < indices.size(); ++i) {
        const S* src = table.values().data() + indices[i] * row;
        std::copy(src, src + row, out.values().data() + static_cast<int64_t>(i) * row);
    }
    if (detail::should_record(tape, {&table})) {
        out.set_requires_grad(true);
        auto tn = table.node(), on = out.node();
        tape.record(on, [tn, on, indices, row] {
            if (on->grad.empty() || !tn->requires_grad) return;
            tn->ensure_grad();
            for (size_t i = 0; i < indices.size(); ++i) {
                const S* src = on->grad.data() + static_cast<int64_t>(i) * row;
                S* dst = tn->grad.data() + indices[i] * row;
                for (int64_t j = 0; j < row; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

// Stops gradient flow: copies values into a fresh non-tracked tensor.
template <typename S>
TensorT<S> detach(const TensorT<S>& a) {
    return TensorT<S>(a.shape(), a.values());
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

namespace detail {

struct MatmulPlan {
    int64_t n_batch = 1;
    int64_t p = 0, q = 0, r = 0;
    std::vector<int64_t> a_offsets;  // per batch, in elements
    std::vector<int64_t> b_offsets;
};

// Leading (batch) dimensions broadcast right-aligned: each pair must match or
// one of them must be 1 (absent counts as 1).
template <typename S>
MatmulPlan plan_matmul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.rank() < 2 || b.rank() < 2) {
        throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    }
    MatmulPlan plan;
    plan.p = a.dim(a.rank() - 2);
    plan.q = a.dim(a.rank() - 1);
    plan.r = b.dim(b.rank() - 1);
    if (b.dim(b.rank() - 2) != plan.q) {
        throw ShapeError("matmul: inner dimension mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    const int64_t la = a.rank() - 2;
    const int64_t lb = b.rank() - 2;
    const int64_t lead = std::max(la, lb);
    Shape lead_shape(static_cast<size_t>(lead), 1);
    for (int64_t i = 0; i < lead; ++i) {
        const int64_t da = i >= lead - la ? a.dim(i - (lead - la)) : 1;
        const int64_t db = i >= lead - lb ? b.dim(i - (lead - lb)) : 1;
        if (da != db && da != 1 && db != 1) {
            throw ShapeError("matmul: batch dimensions incompatible " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
        }
        lead_shape[static_cast<size_t>(i)] = std::max(da, db);
    }
    plan.n_batch = shape_numel(lead_shape);
    plan.a_offsets.resize(static_cast<size_t>(plan.n_batch));
    plan.b_offsets.resize(static_cast<size_t>(plan.n_batch));
    const int64_t a_mat = plan.p * plan.q;
    const int64_t b_mat = plan.q * plan.r;
    std::vector<int64_t> idx(static_cast<size_t>(lead), 0);
    for (int64_t flat = 0; flat < plan.n_batch; ++flat) {
        int64_t ao = 0, bo = 0;
        int64_t a_stride = a_mat, b_stride = b_mat;
        for (int64_t i = lead; i-- > 0;) {
            const int64_t da = i >= lead - la ? a.dim(i - (lead - la)) : 1;
            const int64_t db = i >= lead - lb ? b.dim(i - (lead - lb)) : 1;
            if (da != 1) {
                ao += (idx[static_cast<size_t>(i)] % da) * a_stride;
                a_stride *= da;
            }
            if (db != 1) {
                bo += (idx[static_cast<size_t>(i)] % db) * b_stride;
                b_stride *= db;
            }
        }
        plan.a_offsets[static_cast<size_t>(flat)] = ao;
        plan.b_offsets[static_cast<size_t>(flat)] = bo;
        for (int64_t i = lead; i-- > 0;) {
            if (++idx[static_cast<size_t>(i)] < lead_shape[static_cast<size_t>(i)]) break;
            idx[static_cast<size_t>(i)] = 0;
        }
    }
    return plan;
}

template <typename S>
Shape matmul_out_shape(const TensorT<S>& a, const TensorT<S>& b, const MatmulPlan& plan) {
    const int64_t la = a.rank() - 2;
    const int64_t lb = b.rank() - 2;
    const int64_t lead = std::max(la, lb);
    Shape out_shape;
    for (int64_t i = 0; i < lead; ++i) {
        const int64_t da = i >= lead - la ? a.dim(i - (lead - la)) : 1;
        const int64_t db = i >= lead - lb ? b.dim(i - (lead - lb)) : 1;
        out_shape.push_back(std::max(da, db));
    }
    out_shape.push_back(plan.p);
    out_shape.push_back(plan.r);
    return out_shape;
}

}  // namespace detail

template <typename S>
TensorT<S> matmul(TapeT<S>& tape, const TensorT<S>& a, const TensorT<S>& b) {
    const detail::MatmulPlan plan = detail::plan_matmul(a, b);
    TensorT<S> out(detail::matmul_out_shape(a, b, plan));
    const int64_t p = plan.p, q = plan.q, r = plan.r;
    const S* av = a.values().data();
    const S* bv = b.values().data();
    S* ov = out.values().data();
    const int64_t grain = std::max<int64_t>(2, (int64_t{1} << 15) / std::max<int64_t>(1, q * r));
    parallel_for(plan.n_batch * p, grain, [&](int64_t row) {
        const int64_t batch = row / p;
        const int64_t i = row % p;
        const S* am = av + plan.a_offsets[static_cast<size_t>(batch)] + i * q;
        const S* bm = bv + plan.b_offsets[static_cast<size_t>(batch)];
        S* om = ov + batch * p * r + i * r;
        for (int64_t j = 0; j < r; ++j) om[j] = S(0);
        for (int64_t k = 0; k < q; ++k) {
            const S aik = am[k];
            const S* bk = bm + k * r;
            for (int64_t j = 0; j < r; ++j) om[j] += aik * bk[j];
        }
    });
    if (detail::should_record(tape, {&a, &b})) {
        out.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = out.node();
        tape.record(on, [an, bn, on, plan] {
            if (on->grad.empty()) return;
            const int64_t p = plan.p, q = plan.q, r = plan.r;
            for (int64_t batch = 0; batch < plan.n_batch; ++batch) {
                const S* dout = on->grad.data() + batch * p * r;
                const int64_t ao = plan.a_offsets[static_cast<size_t>(batch)];
                const int64_t bo = plan.b_offsets[static_cast<size_t>(batch)];
                if (an->requires_grad) {
                    // dA += dOut @ B^T
                    an->ensure_grad();
                    S* da = an->grad.data() + ao;
                    const S* bm = bn->values.data() + bo;
                    for (int64_t i = 0; i < p; ++i) {
                        for (int64_t j = 0; j < r; ++j) {
                            const S g = dout[i * r + j];
                            const S* brow = bm + j;
                            S* darow = da + i * q;
                            for (int64_t k = 0; k < q; ++k) darow[k] += g * brow[k * r];
                        }
                    }
                }
                if (bn->requires_grad) {
                    // dB += A^T @ dOut
                    bn->ensure_grad();
                    S* db = bn->grad.data() + bo;
                    const S* am = an->values.data() + ao;
                    for (int64_t k = 0; k < q; ++k) {
                        for (int64_t i = 0; i < p; ++i) {
                            const S aik = am[i * q + k];
                            const S* drow = dout + i * r;
                            S* dbrow = db + k * r;
                            for (int64_t j = 0; j < r; ++j) dbrow[j] += aik * drow[j];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// Adds a length-d bias vector to every trailing row of x (..., d).
template <typename S>
TensorT<S> add_bias(TapeT<S>& tape, const TensorT<S>& x, const TensorT<S>& bias) {
    if (bias.rank() != 1 || x.rank() < 1 || bias.dim(0) != x.dim(x.rank() - 1)) {
        throw ShapeError("add_bias: bias " + shape_str(bias.shape()) +
                         " does not match last dimension of " + shape_str(x.shape()));
    }
    const int64_t d = bias.dim(0);
    const int64_t rows = x.size() / d;
    TensorT<S> out(x.shape());
    for (int64_t i = 0; i < rows; ++i) {
        for (int64_t j = 0; j < d; ++j) {
            out.values()[i * d + j] = x.values()[i * d + j] + bias.values()[j];
        }
    }
    if (detail::should_record(tape, {&x, &bias})) {
        out.set_requires_grad(true);
        auto xn = x.node(), bn = bias.node(), on = out.node();
        tape.record(on, [xn, bn, on, rows, d] {
            if (on->grad.empty()) return;
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int64_t i = 0; i < rows; ++i) {
                    for (int64_t j = 0; j < d; ++j) {
                        bn->grad[static_cast<size_t>(j)] +=
                            on->grad[static_cast<size_t>(i * d + j)];
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalization and similarity
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> softmax(TapeT<S>& tape, const TensorT<S>& x, int64_t axis) {
    detail::check_axis("softmax", x.shape(), axis);
    const int64_t outer = detail::outer_size(x.shape(), axis);
    const int64_t len = x.dim(axis);
    const int64_t inner = detail::inner_size(x.shape(), axis);
    TensorT<S> out(x.shape());
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t i = 0; i < inner; ++i) {
            const auto at = [&](int64_t k) { return (o * len + k) * inner + i; };
            S mx = x.values()[at(0)];
            for (int64_t k = 1; k < len; ++k) mx = std::max(mx, x.values()[at(k)]);
            S denom = S(0);
            for (int64_t k = 0; k < len; ++k) {
                const S e = std::exp(x.values()[at(k)] - mx);
                out.values()[at(k)] = e;
                denom += e;
            }
            const S inv = S(1) / denom;
            for (int64_t k = 0; k < len; ++k) out.values()[at(k)] *= inv;
        }
    }
    if (detail::should_record(tape, {&x})) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        tape.record(on, [xn, on, outer, len, inner] {
            if (on->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (int64_t o = 0; o < outer; ++o) {
                for (int64_t i = 0; i < inner; ++i) {
                    const auto at = [&](int64_t k) {
                        return static_cast<size_t>((o * len + k) * inner + i);
                    };
                    S dot = S(0);
                    for (int64_t k = 0; k < len; ++k) dot += on->grad[at(k)] * on->values[at(k)];
                    for (int64_t k = 0; k < len; ++k) {
                        xn->grad[at(k)] += on->values[at(k)] * (on->grad[at(k)] - dot);
                    }
                }
            }
        });
    }
    return out;
}

// Layer normalization over the last axis with affine parameters.
// A zero-variance row normalizes to zeros, so the output there is beta.
template <typename S>
TensorT<S> layer_norm(TapeT<S>& tape, const TensorT<S>& x, const TensorT<S>& gamma,
                      const TensorT<S>& beta, S eps) {
    const int64_t d = x.dim(x.rank() - 1);
    if (gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != d || beta.dim(0) != d) {
        throw ShapeError("layer_norm: affine shapes " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match last dimension of " +
                         shape_str(x.shape()));
    }
    const int64_t rows = x.size() / d;
    TensorT<S> out(x.shape());
    std::vector<S> xhat(static_cast<size_t>(x.size()));
    std::vector<S> inv_std(static_cast<size_t>(rows));
    for (int64_t i = 0; i < rows; ++i) {
        const S* xv = x.values().data() + i * d;
        S mu = S(0);
        for (int64_t j = 0; j < d; ++j) mu += xv[j];
        mu /= static_cast<S>(d);
        S var = S(0);
        for (int64_t j = 0; j < d; ++j) {
            const S c = xv[j] - mu;
            var += c * c;
        }
        var /= static_cast<S>(d);
        const S inv = S(1) / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(i)] = inv;
        for (int64_t j = 0; j < d; ++j) {
            const S h = (xv[j] - mu) * inv;
            xhat[static_cast<size_t>(i * d + j)] = h;
            out.values()[i * d + j] = gamma.values()[j] * h + beta.values()[j];
        }
    }
    if (detail::should_record(tape, {&x, &gamma, &beta})) {
        out.set_requires_grad(true);
        auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
        tape.record(on, [xn, gn, bn, on, rows, d, xhat = std::move(xhat),
                         inv_std = std::move(inv_std)] {
            if (on->grad.empty()) return;
            if (gn->requires_grad) gn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            if (xn->requires_grad) xn->ensure_grad();
            for (int64_t i = 0; i < rows; ++i) {
                const S* dy = on->grad.data() + i * d;
                const S* xh = xhat.data() + i * d;
                if (gn->requires_grad) {
                    for (int64_t j = 0; j < d; ++j) gn->grad[static_cast<size_t>(j)] += dy[j] * xh[j];
                }
                if (bn->requires_grad) {
                    for (int64_t j = 0; j < d; ++j) bn->grad[static_cast<size_t>(j)] += dy[j];
                }
                if (xn->requires_grad) {
                    S mean_h = S(0), mean_hx = S(0);
                    for (int64_t j = 0; j < d; ++j) {
                        const S h = gn->values[static_cast<size_t>(j)] * dy[j];
                        mean_h += h;
                        mean_hx += h * xh[j];
                    }
                    mean_h /= static_cast<S>(d);
                    mean_hx /= static_cast<S>(d);
                    const S inv = inv_std[static_cast<size_t>(i)];
                    for (int64_t j = 0; j < d; ++j) {
                        const S h = gn->values[static_cast<size_t>(j)] * dy[j];
                        xn->grad[static_cast<size_t>(i * d + j)] +=
                            inv * (h - mean_h - xh[j] * mean_hx);
                    }
                }
            }
        });
    }
    return out;
}

inline constexpr double kCosineEps = 1e-8;

// Cosine similarity along the last axis of two equal-shape tensors; the
// denominator is guarded by max(|a||b|, 1e-8).
template <typename S>
TensorT<S> cosine_sim(TapeT<S>& tape, const TensorT<S>& a, const TensorT<S>& b) {
    detail::check_same_shape("cosine_sim", a.shape(), b.shape());
    if (a.rank() < 1) {
        throw ShapeError("cosine_sim: operands must have rank >= 1");
    }
    const int64_t d = a.dim(a.rank() - 1);
    const int64_t rows = a.size() / d;
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    TensorT<S> out(out_shape);
    for (int64_t i = 0; i < rows; ++i) {
        const S* av = a.values().data() + i * d;
        const S* bv = b.values().data() + i * d;
        S dot = S(0), na2 = S(0), nb2 = S(0);
        for (int64_t j = 0; j < d; ++j) {
            dot += av[j] * bv[j];
            na2 += av[j] * av[j];
            nb2 += bv[j] * bv[j];
        }
        const S denom = std::max(std::sqrt(na2) * std::sqrt(nb2), S(kCosineEps));
        out.values()[i] = dot / denom;
    }
    if (detail::should_record(tape, {&a, &b})) {
        out.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = out.node();
        tape.record(on, [an, bn, on, rows, d] {
            if (on->grad.empty()) return;
            if (an->requires_grad) an->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (int64_t i = 0; i < rows; ++i) {
                const S g = on->grad[static_cast<size_t>(i)];
                if (g == S(0)) continue;
                const S* av = an->values.data() + i * d;
                const S* bv = bn->values.data() + i * d;
                S dot = S(0), na2 = S(0), nb2 = S(0);
                for (int64_t j = 0; j < d; ++j) {
                    dot += av[j] * bv[j];
                    na2 += av[j] * av[j];
                    nb2 += bv[j] * bv[j];
                }
                const S na = std::sqrt(na2);
                const S nb = std::sqrt(nb2);
                const S raw = na * nb;
                if (raw > S(kCosineEps)) {
                    const S s = dot / raw;
                    if (an->requires_grad) {
                        for (int64_t j = 0; j < d; ++j) {
                            an->grad[static_cast<size_t>(i * d + j)] +=
                                g * (bv[j] / raw - s * av[j] / na2);
                        }
                    }
                    if (bn->requires_grad) {
                        for (int64_t j = 0; j < d; ++j) {
                            bn->grad[static_cast<size_t>(i * d + j)] +=
                                g * (av[j] / raw - s * bv[j] / nb2);
                        }
                    }
                } else {
                    if (an->requires_grad) {
                        for (int64_t j = 0; j < d; ++j) {
                            an->grad[static_cast<size_t>(i * d + j)] += g * bv[j] / S(kCosineEps);
                        }
                    }
                    if (bn->requires_grad) {
                        for (int64_t j = 0; j < d; ++j) {
                            bn->grad[static_cast<size_t>(i * d + j)] += g * av[j] / S(kCosineEps);
                        }
                    }
                }
            }
        });
    }
    return out;
}

// Scales each trailing-axis row to unit L2 norm; rows with norm <= eps are
// divided by eps instead, which keeps the map smooth at zero.
template <typename S>
TensorT<S> l2_normalize(TapeT<S>& tape, const TensorT<S>& x, S eps = S(kCosineEps)) {
    const int64_t d = x.dim(x.rank() - 1);
    const int64_t rows = x.size() / d;
    TensorT<S> out(x.shape());
    for (int64_t i = 0; i < rows; ++i) {
        const S* xv = x.values().data() + i * d;
        S n2 = S(0);
        for (int64_t j = 0; j < d; ++j) n2 += xv[j] * xv[j];
        const S inv = S(1) / std::max(std::sqrt(n2), eps);
        for (int64_t j = 0; j < d; ++j) out.values()[i * d + j] = xv[j] * inv;
    }
    if (detail::should_record(tape, {&x})) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        tape.record(on, [xn, on, rows, d, eps] {
            if (on->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (int64_t i = 0; i < rows; ++i) {
                const S* xv = xn->values.data() + i * d;
                const S* dy = on->grad.data() + i * d;
                const S* y = on->values.data() + i * d;
                S n2 = S(0);
                for (int64_t j = 0; j < d; ++j) n2 += xv[j] * xv[j];
                const S n = std::sqrt(n2);
                if (n > eps) {
                    S ydy = S(0);
                    for (int64_t j = 0; j < d; ++j) ydy += y[j] * dy[j];
                    for (int64_t j = 0; j < d; ++j) {
                        xn->grad[static_cast<size_t>(i * d + j)] += (dy[j] - y[j] * ydy) / n;
                    }
                } else {
                    for (int64_t j = 0; j < d; ++j) {
                        xn->grad[static_cast<size_t>(i * d + j)] += dy[j] / eps;
                    }
                }
            }
        });
    }
    return out;
}

// Mean softmax cross-entropy over rows of (n, C) logits against integer
// class labels.
template <typename S>
TensorT<S> cross_entropy(TapeT<S>& tape, const TensorT<S>& logits,
                         const std::vector<int64_t>& labels) {
    if (logits.rank() != 2) {
        throw ShapeError("cross_entropy: logits must be 2-D, got " + shape_str(logits.shape()));
    }
    const int64_t n = logits.dim(0);
    const int64_t c = logits.dim(1);
    if (static_cast<int64_t>(labels.size()) != n) {
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
    }
    for (const int64_t y : labels) {
        if (y < 0 || y >= c) {
            throw ShapeError("cross_entropy: label " + std::to_string(y) +
                             " out of class range [0, " + std::to_string(c) + ")");
        }
    }
    S total = S(0);
    for (int64_t i = 0; i < n; ++i) {
        const S* row = logits.values().data() + i * c;
        S mx = row[0];
        for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        S denom = S(0);
        for (int64_t j = 0; j < c; ++j) denom += std::exp(row[j] - mx);
        total += mx + std::log(denom) - row[labels[static_cast<size_t>(i)]];
    }
    TensorT<S> out = TensorT<S>::scalar(total / static_cast<S>(n));
    if (detail::should_record(tape, {&logits})) {
        out.set_requires_grad(true);
        auto ln = logits.node(), on = out.node();
        tape.record(on, [ln, on, labels, n, c] {
            if (on->grad.empty() || !ln->requires_grad) return;
            ln->ensure_grad();
            const S g = on->grad[0] / static_cast<S>(n);
            for (int64_t i = 0; i < n; ++i) {
                const S* row = ln->values.data() + i * c;
                S mx = row[0];
                for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
                S denom = S(0);
                for (int64_t j = 0; j < c; ++j) denom += std::exp(row[j] - mx);
                for (int64_t j = 0; j < c; ++j) {
                    const S p = std::exp(row[j] - mx) / denom;
                    const S ind = j == labels[static_cast<size_t>(i)] ? S(1) : S(0);
                    ln->grad[static_cast<size_t>(i * c + j)] += g * (p - ind);
                }
            }
        });
    }
    return out;
}

// Inverted dropout with a caller-provided random source. p == 0 is identity.
template <typename S>
TensorT<S> dropout(TapeT<S>& tape, const TensorT<S>& x, double p, Rng& rng) {
    if (p <= 0.0) {
        return x;
    }
    if (p >= 1.0) {
        throw NumericError("dropout: probability must be < 1");
    }
    const S keep_scale = S(1.0 / (1.0 - p));
    std::vector<S> mask(static_cast<size_t>(x.size()));
    for (S& m : mask) {
        m = rng.uniform01() < p ? S(0) : keep_scale;
    }
    TensorT<S> out(x.shape());
    for (int64_t i = 0; i < x.size(); ++i) {
        out.values()[i] = x.values()[i] * mask[static_cast<size_t>(i)];
    }
    if (detail::should_record(tape, {&x})) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        tape.record(on, [xn, on, mask = std::move(mask)] {
            if (on->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += mask[i] * on->grad[i];
        });
    }
    return out;
}

}  // namespace tabdeco::ops
