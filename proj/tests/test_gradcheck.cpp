#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "tabdeco/gradcheck.hpp"
#include "tabdeco/ops.hpp"
#include "tabdeco/rng.hpp"

using namespace tabdeco;

namespace {

using DTensor = TensorT<double>;
using DTape = TapeT<double>;
using Inputs = std::vector<DTensor>;

DTensor drandn(Rng& rng, Shape shape, double scale = 1.0, bool grad = true) {
    DTensor t(std::move(shape));
    for (double& v : t.values()) {
        v = rng.normal() * scale;
    }
    t.set_requires_grad(grad);
    return t;
}

// Fixed position-dependent linear functional so reductions to a scalar do
// not collapse the gradient structure; deterministic across evaluations.
DTensor pick(DTape& tape, const DTensor& x) {
    DTensor w(x.shape());
    for (int64_t i = 0; i < w.size(); ++i) {
        w.values()[i] = std::sin(0.7 * static_cast<double>(i) + 0.3);
    }
    return ops::sum(tape, ops::mul(tape, x, w));
}

template <typename F>
void check_op(const char* name, F make_loss, Inputs inputs, double tol = 1e-3) {
    auto report = grad_check<double>(make_loss, inputs, 1e-3, tol);
    INFO(name << ": max rel err " << report.max_rel_err);
    CHECK(report.pass());
}

}  // namespace

// Every differentiable op against central finite differences on randomized
// inputs, 64-bit, >= 100 trials in total across the suite (fixed seeds).
TEST_CASE("per-op finite difference checks") {
    Rng rng(2024);
    for (int trial = 0; trial < 8; ++trial) {
        

        check_op(
            "add",
            [&](DTape& t, const Inputs& in) {
                return pick(t, ops::add(t, in[0], in[1]));
            },
            {drandn(rng, {3, 4}), drandn(rng, {3, 4})});

        check_op(
            "sub",
            [&](DTape& t, const Inputs& in) {
                return pick(t, ops::sub(t, in[0], in[1]));
            },
            {drandn(rng, {2, 5}), drandn(rng, {2, 5})});

        check_op(
            "mul",
            [&](DTape& t, const Inputs& in) {
                return pick(t, ops::mul(t, in[0], in[1]));
            },
            {drandn(rng, {4, 3}), drandn(rng, {4, 3})});

        check_op(
            "scale",
            [&](DTape& t, const Inputs& in) {
                return pick(t, ops::scale(t, in[0], 2.5));
            },
            {drandn(rng, {7})});

        check_op(
            "exp",
            [&](DTape& t, const Inputs& in) { return pick(t, ops::exp(t, in[0])); },
            {drandn(rng, {3, 3}, 0.5)});

        {
            DTensor pos(Shape{6});
            for (double& v : pos.values()) {
                v = rng.uniform(0.5, 3.0);
            }
            pos.set_requires_grad(true);
            check_op(
                "log",
                [&](DTape& t, const Inputs& in) { return pick(t, ops::log(t, in[0])); },
                {pos});
        }

        {
            // keep inputs away from the kink at zero
            DTensor x(Shape{8});
            for (double& v : x.values()) {
                const double m = rng.uniform(0.2, 2.0);
                v = rng.uniform01() < 0.5 ? -m : m;
            }
            x.set_requires_grad(true);
            check_op(
                "relu",
                [&](DTape& t, const Inputs& in) { return pick(t, ops::relu(t, in[0])); },
                {x});
        }

        check_op(
            "gelu",
            [&](DTape& t, const Inputs& in) { return pick(t, ops::gelu(t, in[0])); },
            {drandn(rng, {3, 5})});

        check_op(
            "mean", [&](DTape& t, const Inputs& in) { return ops::mean(t, in[0]); },
            {drandn(rng, {4, 6})});

        check_op(
            "sum_axis",
            [&](DTape& t, const Inputs& in) {
                return pick(t, ops::sum_axis(t, in[0], 1));
            },
            {drandn(rng, {3, 4, 2})});

        check_op(
            "mean_axis",
            [&](DTape& t, const Inputs& in) {
                return pick(t, ops::mean_axis(t, in[0], 0));
            },
            {drandn(rng, {3, 4})});

        check_op(
            "concat",
            [&](DTape& t, const Inputs& in) {
                return pick(t, ops::concat(t, {in[0], in[1]}, 1));
            },
            {drandn(rng, {2, 3}), drandn(rng, {2, 2})});

        check_op(
            "reshape",
            [&](DTape& t, const Inputs& in) {
                return pick(t, ops::reshape(t, in[0], {6, 2}));
            },
            {drandn(rng, {3, 4})});

        check_op(
            "transpose",
            [&](DTape& t, const Inputs& in) {
                return pick(t, ops::transpose(t, in[0], 0, 2));
            },
            {drandn(rng, {2, 3, 4})});

        check_op(
            "gather_rows",
            [&](DTape& t, const Inputs& in) {
                return pick(t, ops::gather_rows(t, in[0], {1, 0, 3, 1}));
            },
            {drandn(rng, {4, 3})});

        check_op(
            "slice",
            [&](DTape& t, const Inputs& in) {
                return pick(t, ops::slice(t, in[0], 1, 1, 2));
            },
            {drandn(rng, {3, 4})});

        check_op(
            "select",
            [&](DTape& t, const Inputs& in) {
                return pick(t, ops::select(t, in[0], 1, 0));
            },
            {drandn(rng, {3, 4, 2})});

        check_op(
            "broadcast_to",
            [&](DTape& t, const Inputs& in) {
                return pick(t, ops::broadcast_to(t, in[0], {4, 3, 5}));
            },
            {drandn(rng, {1, 5})});

        check_op(
            "add_bias",
            [&](DTape& t, const Inputs& in) {
                return pick(t, ops::add_bias(t, in[0], in[1]));
            },
            {drandn(rng, {3, 4}), drandn(rng, {4})});

        check_op(
            "matmul",
            [&](DTape& t, const Inputs& in) {
                return pick(t, ops::matmul(t, in[0], in[1]));
            },
            {drandn(rng, {3, 4}), drandn(rng, {4, 5})});

        check_op(
            "matmul_batched",
            [&](DTape& t, const Inputs& in) {
                return pick(t, ops::matmul(t, in[0], in[1]));
            },
            {drandn(rng, {2, 3, 3, 4}), drandn(rng, {2, 3, 4, 2})});

        check_op(
            "matmul_broadcast",
            [&](DTape& t, const Inputs& in) {
                return pick(t, ops::matmul(t, in[0], in[1]));
            },
            {drandn(rng, {2, 3, 4}), drandn(rng, {4, 5})});

        check_op(
            "softmax",
            [&](DTape& t, const Inputs& in) {
                return pick(t, ops::softmax(t, in[0], 1));
            },
            {drandn(rng, {3, 5}, 2.0)});

        check_op(
            "layer_norm",
            [&](DTape& t, const Inputs& in) {
                return pick(t, ops::layer_norm(t, in[0], in[1], in[2], 1e-6));
            },
            {drandn(rng, {3, 6}), drandn(rng, {6}, 0.5), drandn(rng, {6}, 0.5)});

        check_op(
            "cosine_sim",
            [&](DTape& t, const Inputs& in) {
                return pick(t, ops::cosine_sim(t, in[0], in[1]));
            },
            {drandn(rng, {4, 5}), drandn(rng, {4, 5})});

        check_op(
            "l2_normalize",
            [&](DTape& t, const Inputs& in) {
                return pick(t, ops::l2_normalize(t, in[0]));
            },
            {drandn(rng, {4, 5})});

        check_op(
            "cross_entropy",
            [&](DTape& t, const Inputs& in) {
                return ops::cross_entropy(t, in[0], {1, 0, 2});
            },
            {drandn(rng, {3, 4}, 2.0)});

        check_op(
            "dropout",
            [&](DTape& t, const Inputs& in) {
                Rng mask_rng(123);  // fixed mask keeps f deterministic
                return pick(t, ops::dropout(t, in[0], 0.4, mask_rng));
            },
            {drandn(rng, {4, 6})});
    }
}

TEST_CASE("gradient of softmax sum is zero") {
    Rng rng(5);
    Inputs in = {drandn(rng, {7})};
    auto report = grad_check<double>(
        [](DTape& t, const Inputs& in) { return ops::sum(t, ops::softmax(t, in[0], 0)); }, in,
        1e-3, 1e-3);
    CHECK(report.pass());
    // analytic gradient of a constant function is zero
    for (double g : in[0].grad()) {
        CHECK(std::abs(g) < 1e-9);
    }
}

TEST_CASE("grad_check detects non-deterministic functions") {
    Rng rng(6);
    Inputs in = {drandn(rng, {3})};
    int calls = 0;
    CHECK_THROWS_AS(grad_check<double>(
                        [&calls](DTape& t, const Inputs& in) {
                            ++calls;
                            return ops::scale(t, ops::sum(t, in[0]), 1.0 + 1e-6 * calls);
                        },
                        in, 1e-3, 1e-3),
                    NumericError);
}

TEST_CASE("grad_check flags a corrupted derivative") {
    // relu with a deliberately wrong backward scale; the checker must fail it
    Rng rng(7);
    DTensor x(Shape{5});
    for (double& v : x.values()) {
        v = rng.uniform(0.5, 2.0);
    }
    x.set_requires_grad(true);
    Inputs in = {x};
    auto corrupted_relu = [](DTape& t, const Inputs& in) {
        const DTensor& a = in[0];
        DTensor out(a.shape());
        for (int64_t i = 0; i < a.size(); ++i) {
            out.values()[i] = std::max(0.0, a.values()[i]);
        }
        if (t.recording() && a.requires_grad()) {
            out.set_requires_grad(true);
            auto an = a.node(), on = out.node();
            t.record(on, [an, on] {
                if (on->grad.empty()) return;
                an->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) {
                    if (an->values[i] > 0) an->grad[i] += 1.05 * on->grad[i];
                }
            });
        }
        return ops::sum(t, out);
    };
    auto report = grad_check<double>(corrupted_relu, in, 1e-3, 1e-3);
    CHECK_FALSE(report.pass());
}
