#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tabdeco/tensor.hpp"

namespace tabdeco {

struct GradCheckReport {
    struct PerInput {
        std::string name;
        double max_rel_err = 0.0;
    };
    std::vector<PerInput> inputs;
    double max_rel_err = 0.0;
    double tol = 0.0;

    bool pass() const { return std::isfinite(max_rel_err) && max_rel_err < tol; }
};

// Compares the analytic gradient of a scalar-valued function against central
// finite differences, element by element, for every input marked
// requires_grad. Relative error per element is
//   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
// The function must be deterministic; it is evaluated twice at the base
// point and a mismatch raises NumericError. Intended to run with S = double
// (the 64-bit shadow of the float pipeline) so truncation noise does not
// mask derivation errors.
template <typename S, typename F>
GradCheckReport grad_check(F&& f, std::vector<TensorT<S>>& inputs, double eps, double tol,
                           const std::vector<std::string>& names = {}) {
    GradCheckReport report;
    report.tol = tol;

    auto eval = [&](bool with_tape) {
        TapeT<S> tape;
        tape.set_recording(with_tape);
        TensorT<S> loss = f(tape, inputs);
        if (loss.size() != 1) {
            throw NumericError("grad_check: function must be scalar-valued");
        }
        if (with_tape) {
            for (TensorT<S>& in : inputs) {
                if (in.requires_grad()) {
                    in.zero_grad();
                }
            }
            tape.backward(loss);
        }
        return loss.item();
    };

    const S base_a = eval(false);
    const S base_b = eval(false);
    if (base_a != base_b) {
        throw NumericError("grad_check: function is not deterministic (" +
                           std::to_string(static_cast<double>(base_a)) + " vs " +
                           std::to_string(static_cast<double>(base_b)) + ")");
    }

    eval(true);  // populates analytic gradients

    std::vector<std::vector<S>> analytic;
    analytic.reserve(inputs.size());
    for (TensorT<S>& in : inputs) {
        analytic.push_back(in.requires_grad() ? in.grad() : std::vector<S>());
    }

    for (size_t t = 0; t < inputs.size(); ++t) {
        TensorT<S>& in = inputs[t];
        GradCheckReport::PerInput per;
        per.name = t < names.size() ? names[t] : "input" + std::to_string(t);
        if (in.requires_grad()) {
            for (int64_t i = 0; i < in.size(); ++i) {
                const S saved = in.values()[i];
                in.values()[i] = saved + static_cast<S>(eps);
                const double f_plus = static_cast<double>(eval(false));
                in.values()[i] = saved - static_cast<S>(eps);
                const double f_minus = static_cast<double>(eval(false));
                in.values()[i] = saved;
                const double numeric = (f_plus - f_minus) / (2.0 * eps);
                const double a = static_cast<double>(analytic[t][static_cast<size_t>(i)]);
                const double rel = std::abs(a - numeric) /
                                   std::max({std::abs(a), std::abs(numeric), 1e-8});
                per.max_rel_err = std::max(per.max_rel_err, rel);
            }
        }
        report.max_rel_err = std::max(report.max_rel_err, per.max_rel_err);
        report.inputs.push_back(std::move(per));
    }
    return report;
}

}  // namespace tabdeco
