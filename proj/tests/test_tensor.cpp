#include <doctest.h>

#include <cmath>

#include "tabdeco/ops.hpp"
#include "tabdeco/rng.hpp"
#include "tabdeco/tensor.hpp"

using namespace tabdeco;

namespace {

Tensor randn(Rng& rng, Shape shape, float scale = 1.0f) {
    Tensor t(std::move(shape));
    for (float& v : t.values()) {
        v = static_cast<float>(rng.normal()) * scale;
    }
    return t;
}

}  // namespace

TEST_CASE("matmul basics") {
    Tape tape;
    Tensor eye({2, 2}, {1, 0, 0, 1});
    Tensor m({2, 2}, {1, 2, 3, 4});
    Tensor prod = ops::matmul(tape, eye, m);
    CHECK(prod.values() == std::vector<float>{1, 2, 3, 4});

    Tensor a({1, 2}, {1, 2});
    Tensor b({2, 1}, {3, 4});
    CHECK(ops::matmul(tape, a, b).item() == doctest::Approx(11.0));

    Tensor z({2, 3});
    Rng rng(1);
    Tensor any = randn(rng, {3, 4});
    Tensor out = ops::matmul(tape, z, any);
    CHECK(out.shape() == Shape{2, 4});
    for (float v : out.values()) {
        CHECK(v == 0.0f);
    }
}

TEST_CASE("matmul shape errors name both shapes") {
    Tape tape;
    Tensor a({2, 3});
    Tensor b({4, 5});
    CHECK_THROWS_WITH_AS(ops::matmul(tape, a, b),
                         "matmul: inner dimension mismatch (2,3) vs (4,5)", ShapeError);
}

TEST_CASE("matmul broadcasts leading batch dimensions") {
    Tape tape;
    Rng rng(7);
    Tensor x = randn(rng, {2, 3, 4});
    Tensor w = randn(rng, {4, 5});
    Tensor y = ops::matmul(tape, x, w);
    REQUIRE(y.shape() == Shape{2, 3, 5});
    // batch 1 equals the plain 2-D product of its slice
    Tensor x1({3, 4}, std::vector<float>(x.values().begin() + 12, x.values().end()));
    Tensor y1 = ops::matmul(tape, x1, w);
    for (int i = 0; i < 15; ++i) {
        CHECK(y.values()[15 + i] == doctest::Approx(y1.values()[i]));
    }
}

TEST_CASE("softmax examples") {
    Tape tape;
    Tensor u({3}, {0, 0, 0});
    Tensor su = ops::softmax(tape, u, 0);
    for (float v : su.values()) {
        CHECK(v == doctest::Approx(1.0 / 3.0));
    }

    Tensor big({2}, {1000, 0});
    Tensor sb = ops::softmax(tape, big, 0);
    CHECK(sb.values()[0] == doctest::Approx(1.0));
    CHECK(sb.values()[1] == doctest::Approx(0.0));
    CHECK(std::isfinite(sb.values()[0]));

    Tensor x({3}, {1, 2, 3});
    Tensor sx = ops::softmax(tape, x, 0);
    CHECK(sx.values()[0] == doctest::Approx(0.0900).epsilon(1e-3));
    CHECK(sx.values()[1] == doctest::Approx(0.2447).epsilon(1e-3));
    CHECK(sx.values()[2] == doctest::Approx(0.6652).epsilon(1e-3));

    CHECK_THROWS_AS(ops::softmax(tape, x, 1), ShapeError);
}

TEST_CASE("softmax sums to one for extreme inputs") {
    Rng rng(42);
    Tape tape;
    for (int trial = 0; trial < 50; ++trial) {
        Tensor x({4, 7});
        for (float& v : x.values()) {
            v = static_cast<float>(rng.uniform(-1e4, 1e4));
        }
        Tensor s = ops::softmax(tape, x, 1);
        for (int i = 0; i < 4; ++i) {
            double total = 0;
            for (int j = 0; j < 7; ++j) {
                total += s.at({i, j});
                CHECK(s.at({i, j}) >= 0.0f);
            }
            CHECK(std::abs(total - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("layer_norm examples") {
    Tape tape;
    Tensor gamma({2}, {1, 1});
    Tensor beta({2}, {0, 0});

    Tensor constant({1, 2}, {5, 5});
    Tensor y = ops::layer_norm(tape, constant, gamma, beta, 1e-5f);
    CHECK(y.values()[0] == doctest::Approx(0.0));
    CHECK(y.values()[1] == doctest::Approx(0.0));

    Tensor x({1, 2}, {1, 3});
    Tensor y2 = ops::layer_norm(tape, x, gamma, beta, 1e-5f);
    CHECK(y2.values()[0] == doctest::Approx(-1.0).epsilon(1e-4));
    CHECK(y2.values()[1] == doctest::Approx(1.0).epsilon(1e-4));

    Tensor gamma0({2}, {0, 0});
    Tensor beta5({2}, {5, 5});
    Tensor y3 = ops::layer_norm(tape, x, gamma0, beta5, 1e-5f);
    CHECK(y3.values()[0] == doctest::Approx(5.0));
    CHECK(y3.values()[1] == doctest::Approx(5.0));

    Tensor bad({3}, {1, 2, 3});
    CHECK_THROWS_AS(ops::layer_norm(tape, x, bad, bad, 1e-5f), ShapeError);
}

TEST_CASE("layer_norm normalizes rows") {
    Rng rng(3);
    Tape tape;
    Tensor x = randn(rng, {5, 8}, 3.0f);
    Tensor gamma = Tensor::full({8}, 1.0f);
    Tensor beta({8});
    Tensor y = ops::layer_norm(tape, x, gamma, beta, 1e-6f);
    for (int i = 0; i < 5; ++i) {
        double mu = 0, var = 0;
        for (int j = 0; j < 8; ++j) mu += y.at({i, j});
        mu /= 8;
        for (int j = 0; j < 8; ++j) var += (y.at({i, j}) - mu) * (y.at({i, j}) - mu);
        var /= 8;
        CHECK(std::abs(mu) < 1e-5);
        CHECK(std::abs(var - 1.0) < 1e-4);
    }
}

TEST_CASE("cosine_sim basics") {
    Tape tape;
    Tensor a({2}, {3, 4});
    CHECK(ops::cosine_sim(tape, a, a).item() == doctest::Approx(1.0));

    Tensor ex({2}, {1, 0});
    Tensor ey({2}, {0, 1});
    CHECK(ops::cosine_sim(tape, ex, ey).item() == doctest::Approx(0.0));

    Tensor p({2}, {1, 1});
    Tensor n({2}, {-1, -1});
    CHECK(ops::cosine_sim(tape, p, n).item() == doctest::Approx(-1.0));
}

TEST_CASE("cosine_sim symmetry, bound, and scale invariance") {
    Rng rng(11);
    Tape tape;
    for (int trial = 0; trial < 100; ++trial) {
        Tensor a = randn(rng, {6});
        Tensor b = randn(rng, {6});
        const float sab = ops::cosine_sim(tape, a, b).item();
        const float sba = ops::cosine_sim(tape, b, a).item();
        CHECK(sab == sba);
        CHECK(std::abs(sab) <= 1.0f + 1e-6f);
        const float c = static_cast<float>(rng.uniform(0.1, 10.0));
        Tensor ca = ops::scale(tape, a, c);
        CHECK(ops::cosine_sim(tape, ca, b).item() == doctest::Approx(sab).epsilon(1e-5));
    }
}

TEST_CASE("elementwise suite") {
    Tape tape;
    Tensor x({2}, {-1, 2});
    Tensor r = ops::relu(tape, x);
    CHECK(r.values() == std::vector<float>{0, 2});

    Tensor m({3}, {2, 4, 6});
    CHECK(ops::mean(tape, m).item() == doctest::Approx(4.0));

    for (float v : {-3.0f, -1.0f, 0.0f, 1.5f, 3.0f}) {
        Tensor t({1}, {v});
        CHECK(ops::log(tape, ops::exp(tape, t)).values()[0] == doctest::Approx(v).epsilon(1e-5));
    }

    Tensor y({2}, {1, 2});
    CHECK_THROWS_AS(ops::add(tape, y, m), ShapeError);
}

TEST_CASE("backward fills ones for sum") {
    Tape tape;
    Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
    x.set_requires_grad(true);
    Tensor loss = ops::sum(tape, x);
    tape.backward(loss);
    for (float g : x.grad()) {
        CHECK(g == 1.0f);
    }
}

TEST_CASE("backward of quadratic") {
    Tape tape;
    Tensor x({2}, {1, 2});
    x.set_requires_grad(true);
    Tensor loss = ops::sum(tape, ops::mul(tape, x, x));
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("backward sums fan-out contributions") {
    // y = sum(x * x) + 3 * sum(x)  =>  dy/dx = 2x + 3
    Tape tape;
    Tensor x({3}, {1, -2, 0.5});
    x.set_requires_grad(true);
    Tensor a = ops::sum(tape, ops::mul(tape, x, x));
    Tensor b = ops::scale(tape, ops::sum(tape, x), 3.0f);
    Tensor loss = ops::add(tape, a, b);
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2 * 1 + 3));
    CHECK(x.grad()[1] == doctest::Approx(2 * -2 + 3));
    CHECK(x.grad()[2] == doctest::Approx(2 * 0.5 + 3));
}

TEST_CASE("repeated backward accumulates additively") {
    Tape tape;
    Tensor x({2}, {1, 2});
    x.set_requires_grad(true);
    Tensor loss = ops::sum(tape, ops::mul(tape, x, x));
    tape.backward(loss);
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(4.0));
    CHECK(x.grad()[1] == doctest::Approx(8.0));
}

TEST_CASE("backward rejects non-scalar loss and empty tape") {
    Tape tape;
    Tensor x({2}, {1, 2});
    x.set_requires_grad(true);
    Tensor y = ops::mul(tape, x, x);
    CHECK_THROWS_AS(tape.backward(y), NumericError);

    Tape empty;
    Tensor s = Tensor::scalar(1.0f);
    CHECK_THROWS_AS(empty.backward(s), NumericError);
}

TEST_CASE("no gradient materialized without requires_grad") {
    Tape tape;
    Tensor x({2}, {1, 2});
    Tensor w({2}, {3, 4});
    w.set_requires_grad(true);
    Tensor loss = ops::sum(tape, ops::mul(tape, x, w));
    tape.backward(loss);
    CHECK_FALSE(x.has_grad());
    CHECK(w.grad()[0] == doctest::Approx(1.0));
}

TEST_CASE("disabled tape records nothing") {
    Tape tape;
    tape.set_recording(false);
    Tensor x({2}, {1, 2});
    x.set_requires_grad(true);
    Tensor y = ops::mul(tape, x, x);
    CHECK_FALSE(y.requires_grad());
    CHECK(tape.size() == 0);
}

TEST_CASE("reshape copies and routes gradients") {
    Tape tape;
    Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
    x.set_requires_grad(true);
    Tensor y = ops::reshape(tape, x, {3, 2});
    CHECK(y.shape() == Shape{3, 2});
    CHECK(y.values() == x.values());
    CHECK_THROWS_AS(ops::reshape(tape, x, {4, 2}), ShapeError);
    Tensor loss = ops::sum(tape, ops::mul(tape, y, y));
    tape.backward(loss);
    CHECK(x.grad()[3] == doctest::Approx(8.0));
}

TEST_CASE("transpose swaps axes") {
    Tape tape;
    Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor t = ops::transpose(tape, x, 0, 1);
    REQUIRE(t.shape() == Shape{3, 2});
    CHECK(t.at({0, 1}) == 4.0f);
    CHECK(t.at({2, 0}) == 3.0f);
    Tensor back = ops::transpose(tape, t, 0, 1);
    CHECK(back.values() == x.values());
}

TEST_CASE("concat and slice") {
    Tape tape;
    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor b({2, 1}, {5, 6});
    Tensor c = ops::concat(tape, {a, b}, 1);
    REQUIRE(c.shape() == Shape{2, 3});
    CHECK(c.values() == std::vector<float>{1, 2, 5, 3, 4, 6});

    Tensor s = ops::slice(tape, c, 1, 2, 1);
    CHECK(s.values() == std::vector<float>{5, 6});
    CHECK_THROWS_AS(ops::slice(tape, c, 1, 2, 2), ShapeError);

    Tensor sel = ops::select(tape, c, 0, 1);
    CHECK(sel.shape() == Shape{3});
    CHECK(sel.values() == std::vector<float>{3, 4, 6});
}

TEST_CASE("gather_rows lookups and bounds") {
    Tape tape;
    Tensor table({3, 2}, {10, 11, 20, 21, 30, 31});
    table.set_requires_grad(true);
    Tensor rows = ops::gather_rows(tape, table, {2, 0, 2});
    REQUIRE(rows.shape() == Shape{3, 2});
    CHECK(rows.values() == std::vector<float>{30, 31, 10, 11, 30, 31});
    CHECK_THROWS_AS(ops::gather_rows(tape, table, {3}), ShapeError);

    Tensor loss = ops::sum(tape, rows);
    tape.backward(loss);
    CHECK(table.grad()[0] == doctest::Approx(1.0));  // row 0 used once
    CHECK(table.grad()[4] == doctest::Approx(2.0));  // row 2 used twice
    CHECK(table.grad()[2] == doctest::Approx(0.0));  // row 1 unused
}

TEST_CASE("broadcast_to expands and sums gradients back") {
    Tape tape;
    Tensor v({1, 3}, {1, 2, 3});
    v.set_requires_grad(true);
    Tensor b = ops::broadcast_to(tape, v, {4, 3});
    REQUIRE(b.shape() == Shape{4, 3});
    CHECK(b.at({2, 1}) == 2.0f);
    Tensor loss = ops::sum(tape, b);
    tape.backward(loss);
    CHECK(v.grad()[0] == doctest::Approx(4.0));
    CHECK_THROWS_AS(ops::broadcast_to(tape, v, {4, 2}), ShapeError);
}

TEST_CASE("l2_normalize produces unit rows") {
    Tape tape;
    Tensor x({2, 3}, {3, 0, 4, 0, 0, 2});
    Tensor y = ops::l2_normalize(tape, x);
    CHECK(y.at({0, 0}) == doctest::Approx(0.6));
    CHECK(y.at({0, 2}) == doctest::Approx(0.8));
    CHECK(y.at({1, 2}) == doctest::Approx(1.0));
}

TEST_CASE("cross_entropy hand case") {
    Tape tape;
    Tensor logits({1, 2}, {1, 2});
    Tensor loss = ops::cross_entropy(tape, logits, {1});
    CHECK(loss.item() == doctest::Approx(0.31326169).epsilon(1e-5));
    CHECK_THROWS_AS(ops::cross_entropy(tape, logits, {2}), ShapeError);
}

TEST_CASE("detach blocks gradient flow") {
    Tape tape;
    Tensor x({2}, {1, 2});
    x.set_requires_grad(true);
    Tensor d = ops::detach(ops::mul(tape, x, x));
    CHECK_FALSE(d.requires_grad());
    Tensor y = ops::mul(tape, x, x);
    Tensor loss = ops::add(tape, ops::sum(tape, y), ops::sum(tape, d));
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2.0));
}

TEST_CASE("deterministic parallel matmul matches serial") {
    Rng rng(99);
    Tensor a = randn(rng, {3, 17, 23});
    Tensor b = randn(rng, {3, 23, 11});
    Tape tape;
    Tensor serial = ops::matmul(tape, a, b);
    // parallel_for splits rows; with TABDECO_THREADS unset this runs the
    // single-threaded path, so just re-run and compare bitwise.
    Tensor again = ops::matmul(tape, a, b);
    CHECK(serial.values() == again.values());
}
