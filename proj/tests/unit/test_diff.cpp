#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "equiflow/diff.hpp"
#include "equiflow/linalg.hpp"

#include <cmath>

using namespace equiflow;
using ad::TapeContext;
using ad::Var;

TEST_CASE("square loss value and gradient") {
    ParameterStore p;
    p.add("theta", Matrix::Constant(1, 1, 3.0));
    auto loss = [](TapeContext& c) { return c.sum(c.unary("square", c.param("theta"))); };
    auto vg = ad::value_and_grad(loss, p);
    CHECK(vg.value == 9.0);
    CHECK(vg.grad.get("theta")(0, 0) == 6.0);
}

TEST_CASE("constant loss has zero gradient") {
    ParameterStore p;
    p.add("w", Matrix::Ones(2, 3));
    auto loss = [](TapeContext& c) {
        c.param("w");
        return c.constant(Matrix::Constant(1, 1, 4.0));
    };
    auto vg = ad::value_and_grad(loss, p);
    CHECK(vg.value == 4.0);
    CHECK(vg.grad.get("w").isZero());
}

TEST_CASE("two layer tanh network gradient matches finite differences") {
    Rng rng(5);
    ParameterStore p;
    p.add("W1", ParameterStore::uniform_init(6, 3, 3, rng));
    p.add("b1", ParameterStore::uniform_init(6, 1, 3, rng));
    p.add("W2", ParameterStore::uniform_init(2, 6, 6, rng));
    Matrix x = ParameterStore::uniform_init(3, 8, 1, rng);
    auto loss = [&](TapeContext& c) {
        Var h = c.unary("tanh", c.add_col(c.matmul(c.param("W1"), c.constant(x)), c.param("b1")));
        Var y = c.matmul(c.param("W2"), h);
        return c.scale(c.sum(c.unary("square", y)), 0.5 / 8);
    };
    CHECK(ad::finite_diff_check(loss, p, 1e-5) < 1e-4);
}

TEST_CASE("finite difference check on quadratic and empty stores") {
    ParameterStore p;
    p.add("a", (Matrix(2, 2) << 1.0, -2.0, 0.5, 3.0).finished());
    auto quad = [](TapeContext& c) { return c.sum(c.unary("square", c.param("a"))); };
    CHECK(ad::finite_diff_check(quad, p, 1e-5) < 1e-9);

    ParameterStore empty;
    auto constant = [](TapeContext& c) { return c.constant(Matrix::Constant(1, 1, 1.0)); };
    CHECK(ad::finite_diff_check(constant, empty, 1e-5) == 0.0);
    CHECK_THROWS(ad::finite_diff_check(quad, p, 0.1));
}

TEST_CASE("gradient linearity") {
    Rng rng(9);
    ParameterStore p;
    p.add("w", ParameterStore::uniform_init(3, 3, 3, rng));
    auto l1 = [](TapeContext& c) { return c.sum(c.unary("tanh", c.param("w"))); };
    auto l2 = [](TapeContext& c) { return c.sum(c.unary("exp", c.scale(c.param("w"), 0.3))); };
    const double a = 0.7, b = -1.3;
    auto both = [&](TapeContext& c) { return c.add(c.scale(l1(c), a), c.scale(l2(c), b)); };
    auto g1 = ad::value_and_grad(l1, p).grad.get("w");
    auto g2 = ad::value_and_grad(l2, p).grad.get("w");
    auto g = ad::value_and_grad(both, p).grad.get("w");
    CHECK((g - (a * g1 + b * g2)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("determinism and replay") {
    Rng rng(1);
    ParameterStore p;
    p.add("w", ParameterStore::uniform_init(4, 4, 4, rng));
    auto loss = [](TapeContext& c) {
        Var w = c.param("w");
        return c.sum(c.matmul(c.expm(c.scale(w, 0.5)), c.unary("lipswish", w)));
    };
    auto a = ad::value_and_grad(loss, p);
    auto b = ad::value_and_grad(loss, p);
    CHECK(a.value == b.value);
    CHECK(a.grad.get("w") == b.grad.get("w"));

    ad::Tape tape;
    TapeContext ctx(tape, p);
    Var out = loss(ctx);
    const double v = tape.value(out)(0, 0);
    CHECK(tape.replay());
    CHECK(tape.value(out)(0, 0) == v);
}

TEST_CASE("unsupported primitive names the primitive") {
    ParameterStore p;
    p.add("w", Matrix::Ones(1, 1));
    auto loss = [](TapeContext& c) { return c.sum(c.unary("relu6", c.param("w"))); };
    try {
        ad::value_and_grad(loss, p);
        FAIL("expected UnsupportedPrimitive");
    } catch (const UnsupportedPrimitive& e) {
        CHECK(e.primitive() == "relu6");
    }
}

TEST_CASE("matrix primitives gradients") {
    Rng rng(2);
    ParameterStore p;
    p.add("k", ParameterStore::uniform_init(3, 3, 3, rng));
    p.add("x", ParameterStore::uniform_init(3, 4, 1, rng));
    auto loss = [](TapeContext& c) {
        Var k = c.param("k");
        Var y = c.matmul(c.expm(k), c.param("x"));
        std::vector<Var> cols{c.rows(y, 0, 1), c.rows(y, 1, 1)};
        Var twobytwo_a = c.vstack(std::span<const Var>(cols));
        Var e0 = c.constant((Matrix(2, 4) << 1, 1, 1, 1, 0, 0, 0, 0).finished());
        Var e1 = c.constant((Matrix(2, 4) << 0, 0, 0, 0, 1, 1, 1, 1).finished());
        std::vector<Var> jac{c.add(e0, c.scale(twobytwo_a, 0.1)), c.add(e1, c.scale(c.hadamard(twobytwo_a, twobytwo_a), 0.1))};
        Var ld = c.logabsdet(std::span<const Var>(jac));
        return c.add(c.sum(ld), c.trace(k));
    };
    CHECK(ad::finite_diff_check(loss, p, 1e-5) < 1e-6);
}

TEST_CASE("expm against known closed forms") {
    Matrix j(2, 2);
    j << 0, -1, 1, 0;
    const double t = 1.3;
    Matrix rot(2, 2);
    rot << std::cos(t), -std::sin(t), std::sin(t), std::cos(t);
    CHECK((expm(t * j) - rot).cwiseAbs().maxCoeff() < 1e-14);
    CHECK((expm(0.3 * Matrix::Identity(2, 2)) - std::exp(0.3) * Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-15);
    Matrix big = 6.0 * j;
    Matrix rot6(2, 2);
    rot6 << std::cos(6.0), -std::sin(6.0), std::sin(6.0), std::cos(6.0);
    CHECK((expm(big) - rot6).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("parameter store bookkeeping") {
    ParameterStore p(42);
    p.add("a", Matrix::Ones(2, 3));
    p.add("b", Matrix::Zero(4, 1));
    CHECK(p.total_count() == 10);
    CHECK(p.seed() == 42);
    auto flat = p.flatten();
    CHECK(flat.size() == 10);
    flat[0] = 7.0;
    p.assign_flat(flat);
    CHECK(p.get("a")(0, 0) == 7.0);
    CHECK_THROWS(p.add("a", Matrix::Ones(1, 1)));
    CHECK_THROWS(p.get("missing"));
    Rng r1(3), r2(3);
    CHECK(ParameterStore::uniform_init(3, 3, 9, r1) == ParameterStore::uniform_init(3, 3, 9, r2));
}
