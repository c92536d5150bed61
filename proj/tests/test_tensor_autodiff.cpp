#include <doctest.h>

#include <cmath>

#include "astgl/autodiff.hpp"
#include "astgl/kernels.hpp"
#include "astgl/rng.hpp"
#include "astgl/tensor.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace astgl;
using testsupport::grad_check;
using testsupport::random_tensor;

namespace {
Tensor tracked(Tensor t) {
    t.requires_grad = true;
    return t;
}
}  // namespace

TEST_CASE("tensor basics") {
    Tensor t({2, 3});
    CHECK(t.numel() == 6);
    CHECK(t.shape_string() == "[2x3]");
    CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0}), DimensionError);
    CHECK_THROWS_AS(Tensor({0, 2}), DimensionError);

    Tensor inf({1}, {1.0});
    inf[0] = std::numeric_limits<double>::infinity();
    CHECK_FALSE(inf.all_finite());
    CHECK_THROWS_AS(inf.check_finite("test"), NumericalError);
}

TEST_CASE("matmul: identity and hand products") {
    Tape tape;
    Var i2 = tape.constant(Tensor::eye(2));
    Var a = tape.constant(Tensor({2, 2}, {1, 2, 3, 4}));
    Var prod = tape.matmul(i2, a);
    CHECK(prod.value() == a.value());

    Var row = tape.constant(Tensor({1, 2}, {1, 2}));
    Var col = tape.constant(Tensor({2, 1}, {3, 4}));
    CHECK(tape.matmul(row, col).value()[0] == 11.0);

    CHECK_THROWS_WITH_AS(tape.matmul(a, row), doctest::Contains("[2x2]"), DimensionError);
}

TEST_CASE("matmul matches the loop oracle on random shapes") {
    Rng rng(7);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t m = 1 + rng.below(6), k = 1 + rng.below(6), n = 1 + rng.below(6);
        Tensor a = random_tensor({m, k}, rng);
        Tensor b = random_tensor({k, n}, rng);
        Tape tape;
        Tensor got = tape.matmul(tape.constant(a), tape.constant(b)).value();
        Tensor expect = oracles::matmul_loops(a, b);
        for (std::size_t i = 0; i < got.numel(); ++i) {
            CHECK(got[i] == doctest::Approx(expect[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("serial and parallel kernels agree bit-exactly") {
    Rng rng(11);
    Tensor a = random_tensor({37, 23}, rng);
    Tensor b = random_tensor({23, 41}, rng);
    Tensor out_serial({37, 41}), out_omp({37, 41});
    kernels::matmul_serial(a.data(), b.data(), out_serial.data(), 37, 23, 41);
    kernels::matmul_omp(a.data(), b.data(), out_omp.data(), 37, 23, 41);
    CHECK(out_serial == out_omp);

    Tensor x = random_tensor({50, 12, 3}, rng);
    Tensor ker = random_tensor({3, 3, 8}, rng);
    Tensor c_serial({50, 12, 8}), c_omp({50, 12, 8});
    kernels::conv1d_serial(x.data(), ker.data(), c_serial.data(), 50, 12, 3, 3, 8,
                           kernels::Padding::same);
    kernels::conv1d_omp(x.data(), ker.data(), c_omp.data(), 50, 12, 3, 3, 8,
                        kernels::Padding::same);
    CHECK(c_serial == c_omp);

    Tensor basis = random_tensor({3, 12, 12}, rng);
    Tensor theta = random_tensor({3, 3, 8}, rng);
    Tensor g_serial({50, 12, 8}), g_omp({50, 12, 8});
    kernels::graph_conv_serial(x.data(), basis.data(), theta.data(), g_serial.data(), 50, 12, 3, 3,
                               8);
    kernels::graph_conv_omp(x.data(), basis.data(), theta.data(), g_omp.data(), 50, 12, 3, 3, 8);
    CHECK(g_serial == g_omp);
}

TEST_CASE("elementwise: activation values") {
    Tape tape;
    Var x = tape.constant(Tensor({3}, {0.0, -3.0, 3.0}));
    Tensor sig = tape.sigmoid(x).value();
    CHECK(sig[0] == 0.5);
    Tensor rel = tape.relu(x).value();
    CHECK(rel[0] == 0.0);
    CHECK(rel[1] == 0.0);
    CHECK(rel[2] == 3.0);

    Var ln3 = tape.constant(Tensor::scalar(std::log(3.0)));
    CHECK(tape.sigmoid(ln3).value()[0] == doctest::Approx(0.75).epsilon(1e-15));
}

TEST_CASE("elementwise: shape rules and non-finite propagation") {
    Tape tape;
    Var a = tape.constant(Tensor({2, 2}, {1, 2, 3, 4}));
    Var b = tape.constant(Tensor({2}, {1, 2}));
    CHECK_THROWS_AS(tape.add(a, b), DimensionError);

    // 1-element operands broadcast.
    Var s = tape.constant(Tensor::scalar(10.0));
    Tensor sum = tape.add(a, s).value();
    CHECK(sum.at(1, 1) == 14.0);
    Tensor prod = tape.mul(s, a).value();
    CHECK(prod.at(0, 1) == 20.0);

    Var big = tape.constant(Tensor::scalar(1000.0));
    CHECK_THROWS_AS(tape.exp(big), NumericalError);
}

TEST_CASE("softmax_rows: uniform, hand value, shift invariance") {
    Tape tape;
    Var z = tape.constant(Tensor({2, 2}, {0.0, 0.0, 0.0, std::log(3.0)}));
    Tensor y = tape.softmax_rows(z).value();
    CHECK(y.at(0, 0) == 0.5);
    CHECK(y.at(0, 1) == 0.5);
    CHECK(y.at(1, 0) == doctest::Approx(0.25).epsilon(1e-14));
    CHECK(y.at(1, 1) == doctest::Approx(0.75).epsilon(1e-14));

    Rng rng(3);
    Tensor raw = random_tensor({4, 5}, rng, -2.0, 2.0);
    Tensor shifted = raw;
    for (std::size_t j = 0; j < 5; ++j)
        for (std::size_t i = 0; i < 4; ++i) shifted.at(i, j) += 7.25;
    Tape t2;
    Tensor y1 = t2.softmax_rows(t2.constant(raw)).value();
    Tensor y2 = t2.softmax_rows(t2.constant(shifted)).value();
    for (std::size_t i = 0; i < y1.numel(); ++i) {
        CHECK(y1[i] == doctest::Approx(y2[i]).epsilon(1e-13));
    }

    // Rows sum to one.
    for (std::size_t i = 0; i < 4; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < 5; ++j) s += y1.at(i, j);
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("reduce: frobenius, sum, mean") {
    Tape tape;
    Var a = tape.constant(Tensor({2, 2}, {3, 4, 0, 0}));
    CHECK(tape.frobenius_sq(a).value()[0] == 25.0);

    Var ones = tape.constant(Tensor::full({2, 3}, 1.0));
    CHECK(tape.reduce_sum(ones, {0, 1}).value()[0] == 6.0);

    Var v = tape.constant(Tensor({3}, {1, 2, 3}));
    CHECK(tape.reduce_mean(v, {0}).value()[0] == 2.0);

    CHECK_THROWS_AS(tape.reduce_sum(v, {1}), DimensionError);

    // Axis reduction keeps the remaining extents.
    Var m = tape.constant(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
    Tensor rows = tape.reduce_sum(m, {1}).value();
    CHECK(rows.shape() == Shape{2});
    CHECK(rows[0] == 6.0);
    CHECK(rows[1] == 15.0);
}

TEST_CASE("conv1d_time: identity kernel, hand value, error") {
    Tape tape;
    // K_t = 1 identity channel map leaves the input unchanged.
    Tensor ident({1, 2, 2}, {1, 0, 0, 1});
    Var x = tape.constant(Tensor({3, 2}, {1, 2, 3, 4, 5, 6}));
    Tensor out = tape.conv1d(x, tape.constant(ident), kernels::Padding::valid).value();
    CHECK(out == x.value());

    Var x2 = tape.constant(Tensor({2, 1}, {1, 3}));
    Var k2 = tape.constant(Tensor({2, 1, 1}, {0.5, 0.5}));
    Tensor avg = tape.conv1d(x2, k2, kernels::Padding::valid).value();
    CHECK(avg.shape() == Shape{1, 1});
    CHECK(avg[0] == 2.0);

    Var shortx = tape.constant(Tensor({1, 1}, {1.0}));
    CHECK_THROWS_AS(tape.conv1d(shortx, k2, kernels::Padding::valid), DimensionError);
}

TEST_CASE("conv1d_time matches the loop oracle, both paddings") {
    Rng rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t len = 3 + rng.below(6);
        const std::size_t taps = 1 + rng.below(3);
        const std::size_t lanes = 1 + rng.below(3);
        const std::size_t ci = 1 + rng.below(3), co = 1 + rng.below(3);
        Tensor x = random_tensor({len, lanes, ci}, rng);
        Tensor k = random_tensor({taps, ci, co}, rng);
        for (bool same : {false, true}) {
            Tape tape;
            Tensor got = tape.conv1d(tape.constant(x), tape.constant(k),
                                     same ? kernels::Padding::same : kernels::Padding::valid)
                             .value();
            Tensor expect = oracles::conv1d_loops(x, k, same);
            REQUIRE(got.shape() == expect.shape());
            for (std::size_t i = 0; i < got.numel(); ++i) {
                CHECK(got[i] == doctest::Approx(expect[i]).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("conv1d_time same padding puts the extra zero at the end for even taps") {
    // x = [1, 1, 1], taps=2 moving sum: pad_left=0, pad_right=1.
    Tape tape;
    Var x = tape.constant(Tensor({3, 1}, {1, 1, 1}));
    Var k = tape.constant(Tensor({2, 1, 1}, {1, 1}));
    Tensor out = tape.conv1d(x, k, kernels::Padding::same).value();
    REQUIRE(out.shape() == Shape{3, 1});
    CHECK(out[0] == 2.0);
    CHECK(out[1] == 2.0);
    CHECK(out[2] == 1.0);  // final sample only sees the in-range tap
}

TEST_CASE("backward: polynomial and relu gate") {
    Tape tape;
    Var x = tape.leaf(tracked(Tensor::scalar(3.0)));
    Var loss = tape.mul(x, x);
    Gradients g = tape.backward(loss);
    CHECK(g.grad(x)[0] == 6.0);

    Tape t2;
    Var v = t2.leaf(tracked(Tensor({2}, {-1.0, 2.0})));
    Var l2 = t2.reduce_sum(t2.relu(v), {0});
    Gradients g2 = t2.backward(l2);
    CHECK(g2.grad(v)[0] == 0.0);
    CHECK(g2.grad(v)[1] == 1.0);
}

TEST_CASE("backward: error paths and untouched leaves") {
    Tape tape;
    Var x = tape.leaf(tracked(Tensor({2, 2}, {1, 2, 3, 4})));
    CHECK_THROWS_AS(tape.backward(x), DimensionError);  // non-scalar loss

    Var unused = tape.leaf(tracked(Tensor({3}, {1, 2, 3})));
    Var loss = tape.frobenius_sq(x);
    Gradients g = tape.backward(loss);
    const Tensor& zero = g.grad(unused);
    CHECK(zero.shape() == Shape{3});
    for (std::size_t i = 0; i < 3; ++i) CHECK(zero[i] == 0.0);

    Tape other;
    Var foreign = other.leaf(tracked(Tensor::scalar(1.0)));
    CHECK_THROWS_AS(tape.backward(foreign), DimensionError);  // detached graph
}

TEST_CASE("backward: linearity over shared leaves") {
    Rng rng(5);
    Tensor xv = random_tensor({3, 3}, rng);
    const double alpha = 0.7, beta = -1.3;

    auto grads_of = [&](bool combined) {
        Tape tape;
        Var x = tape.leaf(tracked(xv));
        Var f = tape.frobenius_sq(x);
        Var gq = tape.reduce_sum(tape.mul(x, tape.mul(x, x)), {0, 1});
        if (combined) {
            Var loss = tape.add(tape.mul_scalar(f, alpha), tape.mul_scalar(gq, beta));
            return tape.backward(loss).grad(x);
        }
        Tensor gf = tape.backward(f).grad(x);
        Tensor gg = tape.backward(gq).grad(x);
        Tensor out({3, 3});
        for (std::size_t i = 0; i < 9; ++i) out[i] = alpha * gf[i] + beta * gg[i];
        return out;
    };

    Tensor lhs = grads_of(true);
    Tensor rhs = grads_of(false);
    for (std::size_t i = 0; i < 9; ++i) {
        CHECK(lhs[i] == doctest::Approx(rhs[i]).epsilon(1e-12));
    }
}

TEST_CASE("replay determinism: forward and backward are bit-stable") {
    Rng rng(13);
    Tensor xv = random_tensor({4, 3, 2}, rng);
    Tensor wv = random_tensor({2, 4}, rng);

    auto run = [&]() {
        Tape tape;
        Var x = tape.leaf(tracked(xv));
        Var w = tape.leaf(tracked(wv));
        Var s = tape.pair_scores(x, w);
        Var u = tape.exp(tape.neg(tape.relu(s)));
        Var loss = tape.reduce_sum(u, {0, 1, 2});
        CHECK(tape.replay_check());
        Gradients g = tape.backward(loss);
        return std::make_pair(loss.value(), std::make_pair(g.grad(x), g.grad(w)));
    };

    auto r1 = run();
    auto r2 = run();
    CHECK(r1.first == r2.first);
    CHECK(r1.second.first == r2.second.first);
    CHECK(r1.second.second == r2.second.second);
}

TEST_CASE("finite_diff_check: quadratic and constant") {
    auto f = [](const std::vector<Tensor>& ps) { return ps[0][0] * ps[0][0]; };
    std::vector<Tensor> params{Tensor::scalar(3.0)};
    std::vector<Tensor> analytic{Tensor::scalar(6.0)};
    CHECK(finite_diff_check(f, params, analytic) <= 1e-9);

    auto fc = [](const std::vector<Tensor>&) { return 42.0; };
    std::vector<Tensor> zero{Tensor::scalar(0.0)};
    CHECK(finite_diff_check(fc, params, zero) == 0.0);
    CHECK_THROWS_AS(
        finite_diff_check([](const std::vector<Tensor>&) { return std::nan(""); }, params, zero),
        NumericalError);
}

TEST_CASE("gradient correctness of every primitive vs central differences") {
    Rng rng(99);

    auto check = [&](const char* what, auto build, std::vector<Tensor> params) {
        const double err = grad_check(build, params);
        INFO(what);
        CHECK(err <= 1e-4);
    };

    // Values kept away from the relu/abs kinks.
    Tensor a = random_tensor({3, 4}, rng, 0.2, 1.5);
    Tensor b = random_tensor({3, 4}, rng, 0.2, 1.5);
    Tensor sq = random_tensor({4, 4}, rng, 0.2, 1.2);
    Tensor vecr = random_tensor({3}, rng, 0.5, 1.5);
    Tensor vecc = random_tensor({4}, rng, 0.5, 1.5);
    Tensor scal = random_tensor({1}, rng, 0.5, 1.5);

    auto sum_all = [](Tape& t, Var v) {
        std::vector<std::size_t> axes;
        for (std::size_t i = 0; i < v.value().rank(); ++i) axes.push_back(i);
        return t.reduce_sum(v, axes);
    };

    check("add", [&](Tape& t, const std::vector<Var>& v) {
        return sum_all(t, t.mul(t.add(v[0], v[1]), v[0]));
    }, {a, b});
    check("sub_scalar_bcast", [&](Tape& t, const std::vector<Var>& v) {
        return sum_all(t, t.mul(t.sub(v[0], v[1]), v[0]));
    }, {a, scal});
    check("mul_scalar_bcast", [&](Tape& t, const std::vector<Var>& v) {
        return sum_all(t, t.mul(v[1], v[0]));
    }, {a, scal});
    check("abs", [&](Tape& t, const std::vector<Var>& v) {
        return sum_all(t, t.abs(t.sub(v[0], t.mul_scalar(v[1], 0.5))));
    }, {a, b});
    check("exp", [&](Tape& t, const std::vector<Var>& v) {
        return sum_all(t, t.exp(t.neg(v[0])));
    }, {a});
    check("relu", [&](Tape& t, const std::vector<Var>& v) {
        return sum_all(t, t.relu(t.sub(v[0], v[1])));
    }, {a, b});
    check("sigmoid", [&](Tape& t, const std::vector<Var>& v) {
        return sum_all(t, t.sigmoid(v[0]));
    }, {a});
    check("pow_const", [&](Tape& t, const std::vector<Var>& v) {
        return sum_all(t, t.pow_const(v[0], -0.5));
    }, {a});
    check("clamp_min", [&](Tape& t, const std::vector<Var>& v) {
        return sum_all(t, t.clamp_min(v[0], 0.7));
    }, {a});
    check("transpose_matmul", [&](Tape& t, const std::vector<Var>& v) {
        return t.frobenius_sq(t.matmul(t.transpose(v[0]), v[0]));
    }, {a});
    check("reshape", [&](Tape& t, const std::vector<Var>& v) {
        return t.frobenius_sq(t.reshape(v[0], {2, 6}));
    }, {a});
    check("reduce_axis", [&](Tape& t, const std::vector<Var>& v) {
        return t.frobenius_sq(t.reduce_sum(v[0], {1}));
    }, {a});
    check("reduce_mean", [&](Tape& t, const std::vector<Var>& v) {
        return t.frobenius_sq(t.reduce_mean(v[0], {0}));
    }, {a});
    check("softmax_rows", [&](Tape& t, const std::vector<Var>& v) {
        return t.frobenius_sq(t.softmax_rows(v[0]));
    }, {a});
    check("softmax_rows_literal", [&](Tape& t, const std::vector<Var>& v) {
        return t.frobenius_sq(t.softmax_rows_literal(v[0]));
    }, {a});
    check("add_rowwise", [&](Tape& t, const std::vector<Var>& v) {
        return t.frobenius_sq(t.sigmoid(t.add_rowwise(v[0], v[1])));
    }, {a, vecr});
    check("scale_rows", [&](Tape& t, const std::vector<Var>& v) {
        return t.frobenius_sq(t.scale_rows(v[0], v[1]));
    }, {a, vecr});
    check("scale_cols", [&](Tape& t, const std::vector<Var>& v) {
        return t.frobenius_sq(t.scale_cols(v[0], v[1]));
    }, {a, vecc});
    check("div_rows", [&](Tape& t, const std::vector<Var>& v) {
        return t.frobenius_sq(t.div_rows(v[0], v[1]));
    }, {a, vecr});

    Tensor x3 = random_tensor({5, 3, 2}, rng, 0.1, 1.0);
    Tensor ker = random_tensor({3, 2, 2}, rng, -0.5, 0.5);
    for (auto pad : {kernels::Padding::valid, kernels::Padding::same}) {
        check("conv1d", [&, pad](Tape& t, const std::vector<Var>& v) {
            return sum_all(t, t.sigmoid(t.conv1d(v[0], v[1], pad)));
        }, {x3, ker});
    }

    Tensor wp = random_tensor({3, 3, 2, 5}, rng, -0.5, 0.5);
    check("pair_scores_per_pair", [&](Tape& t, const std::vector<Var>& v) {
        return sum_all(t, t.exp(t.neg(t.relu(t.pair_scores(v[0], v[1])))));
    }, {x3, wp});
    Tensor ws = random_tensor({2, 5}, rng, -0.5, 0.5);
    check("pair_scores_shared", [&](Tape& t, const std::vector<Var>& v) {
        return sum_all(t, t.exp(t.neg(t.relu(t.pair_scores(v[0], v[1])))));
    }, {x3, ws});
    check("pair_sqdist", [&](Tape& t, const std::vector<Var>& v) {
        return sum_all(t, t.pair_sqdist(v[0]));
    }, {x3});

    check("dominant_eig", [&](Tape& t, const std::vector<Var>& v) {
        Var sym = t.mul_scalar(t.add(v[0], t.transpose(v[0])), 0.5);
        return t.dominant_eig(sym);
    }, {sq});

    Tensor theta = random_tensor({2, 2, 3}, rng, -0.5, 0.5);
    Tensor basis_seed = random_tensor({3, 3}, rng, -0.4, 0.4);
    check("graph_conv", [&](Tape& t, const std::vector<Var>& v) {
        Var t0 = t.constant(Tensor::eye(3));
        Var sym = t.mul_scalar(t.add(v[2], t.transpose(v[2])), 0.5);
        return sum_all(t, t.sigmoid(t.graph_conv(v[0], v[1], {t0, sym})));
    }, {x3, theta, basis_seed});

    Tensor logits = random_tensor({1, 2}, rng, -1.0, 1.0);
    for (int label : {0, 1}) {
        check("bce_loss", [&, label](Tape& t, const std::vector<Var>& v) {
            return t.bce_loss(t.softmax_rows(v[0]), label);
        }, {logits});
    }
}

TEST_CASE("dominant_eig: known spectra") {
    Tape tape;
    Var j = tape.constant(Tensor({2, 2}, {1, -1, -1, 1}));
    CHECK(tape.dominant_eig(j).value()[0] == doctest::Approx(2.0).epsilon(1e-9));

    Var ident = tape.constant(Tensor::eye(3));
    CHECK(tape.dominant_eig(ident).value()[0] == doctest::Approx(1.0).epsilon(1e-12));
}
