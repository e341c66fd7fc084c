#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "hmoe/gradcheck.hpp"
#include "hmoe/tape.hpp"

using namespace hmoe;

namespace {

Tensor randt(std::vector<int> shape, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.data) v = dist(rng);
    return t;
}

}  // namespace

TEST_CASE("matmul basic values") {
    Tape tape;
    // identity case
    Var eye = tape.constant(Tensor::row_major(2, 2, {1, 0, 0, 1}));
    Var col = tape.constant(Tensor::row_major(2, 1, {3, 4}));
    Var y = tape.matmul(eye, col);
    CHECK(tape.value(y).at(0, 0) == 3.0);
    CHECK(tape.value(y).at(1, 0) == 4.0);

    // hand arithmetic: [1 2] * [3;4] = 1*3 + 2*4
    Var a = tape.constant(Tensor::row_major(1, 2, {1, 2}));
    Var z = tape.matmul(a, col);
    CHECK(tape.value(z).at(0, 0) == doctest::Approx(11.0).epsilon(1e-15));

    // zero case
    Var zeros = tape.constant(Tensor::zeros({2, 3}));
    Var any = tape.constant(Tensor::full({3, 5}, 7.25));
    const Tensor& out = tape.value(tape.matmul(zeros, any));
    for (double v : out.data) CHECK(v == 0.0);

    CHECK_THROWS_AS(tape.matmul(eye, a), DimError);
}

TEST_CASE("matmul backward accumulates g*b^T and a^T*g") {
    Tape tape;
    Param a("a", Tensor::row_major(2, 2, {1, 2, 3, 4}));
    Param b("b", Tensor::row_major(2, 2, {5, 6, 7, 8}));
    Var y = tape.matmul(tape.param(a), tape.param(b));
    Var loss = tape.mean_all(y);
    tape.backward(loss);
    // dL/dy = 1/4 everywhere; da = g b^T, db = a^T g
    CHECK(a.grad.at(0, 0) == doctest::Approx(0.25 * (5 + 6)));
    CHECK(a.grad.at(0, 1) == doctest::Approx(0.25 * (7 + 8)));
    CHECK(b.grad.at(0, 0) == doctest::Approx(0.25 * (1 + 3)));
    CHECK(b.grad.at(1, 1) == doctest::Approx(0.25 * (2 + 4)));
}

TEST_CASE("softmax values and stability") {
    Tape tape;
    Var flat = tape.softmax_rows(tape.constant(Tensor({4}, {0, 0, 0, 0})));
    for (int i = 0; i < 4; ++i) CHECK(tape.value(flat).at(i) == doctest::Approx(0.25).epsilon(1e-14));

    // closed-form oracle for [ln 2, 0, 0]
    double e0 = std::exp(std::log(2.0)), e1 = 1.0, z = e0 + 2 * e1;
    Var soft = tape.softmax_rows(tape.constant(Tensor({3}, {std::log(2.0), 0, 0})));
    CHECK(tape.value(soft).at(0) == doctest::Approx(e0 / z).epsilon(1e-14));
    CHECK(tape.value(soft).at(1) == doctest::Approx(e1 / z).epsilon(1e-14));
    CHECK(tape.value(soft).at(0) == doctest::Approx(0.5).epsilon(1e-14));

    // shift stability: no overflow for huge logits
    Var big = tape.softmax_rows(tape.constant(Tensor({2}, {1000, 0})));
    CHECK(tape.value(big).at(0) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(tape.value(big).at(1) >= 0.0);
}

TEST_CASE("softmax sums to one and is shift invariant") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        Tape tape;
        Tensor logits = randt({3, 6}, rng, 3.0);
        Tensor shifted = logits;
        std::uniform_real_distribution<double> cdist(-50.0, 50.0);
        for (int i = 0; i < 3; ++i) {
            double c = cdist(rng);
            for (int j = 0; j < 6; ++j) shifted.at(i, j) += c;
        }
        const Tensor& p = tape.value(tape.softmax_rows(tape.constant(logits)));
        const Tensor& ps = tape.value(tape.softmax_rows(tape.constant(shifted)));
        for (int i = 0; i < 3; ++i) {
            double sum = 0.0;
            for (int j = 0; j < 6; ++j) {
                sum += p.at(i, j);
                CHECK(std::fabs(p.at(i, j) - ps.at(i, j)) < 1e-12);
                CHECK(p.at(i, j) > 0.0);
            }
            CHECK(std::fabs(sum - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("logsumexp values") {
    Tape tape;
    Var a = tape.logsumexp_rows(tape.constant(Tensor({4}, {0, 0, 0, 0})));
    CHECK(tape.scalar(a) == doctest::Approx(std::log(4.0)).epsilon(1e-14));  // direct oracle

    Var single = tape.logsumexp_rows(tape.constant(Tensor({1}, {-17.375})));
    CHECK(tape.scalar(single) == -17.375);  // exact for one logit

    Var two = tape.logsumexp_rows(tape.constant(Tensor({2}, {5, 5})));
    CHECK(tape.scalar(two) == doctest::Approx(5.0 + std::log(2.0)).epsilon(1e-14));

    CHECK_THROWS_AS(tape.logsumexp_rows(tape.constant(Tensor::zeros({0}))), DimError);
}

TEST_CASE("cross entropy values") {
    Tape tape;
    // uniform logits, V=4 -> ln 4 per token
    Var uniform = tape.cross_entropy(tape.constant(Tensor::zeros({3, 4})), {0, 1, 2});
    CHECK(tape.scalar(uniform) == doctest::Approx(std::log(4.0)).epsilon(1e-14));

    // one-hot-favoring logits [10, -10], target 0 -> log(1 + e^-20)
    Var sharp = tape.cross_entropy(tape.constant(Tensor::row_major(1, 2, {10, -10})), {0});
    CHECK(tape.scalar(sharp) == doctest::Approx(std::log1p(std::exp(-20.0))).epsilon(1e-9));

    // logits [0, ln 3], target 1 -> -ln(3/4)
    Var q = tape.cross_entropy(tape.constant(Tensor::row_major(1, 2, {0, std::log(3.0)})), {1});
    CHECK(tape.scalar(q) == doctest::Approx(-std::log(0.75)).epsilon(1e-14));

    CHECK_THROWS_AS(tape.cross_entropy(tape.constant(Tensor::zeros({2, 4})), {0, 4}), IndexError);
}

TEST_CASE("finite differences validate a quadratic") {
    Param w("w", Tensor({2}, {1, 2}));
    auto loss = [&](std::vector<int>* sig) {
        (void)sig;
        Tape tape;
        Var wv = tape.param(w);
        Var sq = tape.mul(wv, wv);
        return 2.0 * tape.scalar(tape.mean_all(sq));  // w^T w
    };
    {
        Tape tape;
        Var wv = tape.param(w);
        Var out = tape.scale(tape.mean_all(tape.mul(wv, wv)), 2.0);
        tape.backward(out);
    }
    CHECK(w.grad.at(0) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(w.grad.at(1) == doctest::Approx(4.0).epsilon(1e-12));

    GradCheckReport report = finite_diff_check(loss, {&w}, 1e-5, 1e-9);
    CHECK(report.checked == 2);
    CHECK(report.skipped == 0);
    CHECK(report.max_rel_err < 1e-9);
}

TEST_CASE("finite differences skip selection-unstable coordinates") {
    Param w("w", Tensor({2}, {1.0, 1.0 + 5e-6}));
    auto loss = [&](std::vector<int>* sig) {
        Tape tape;
        Var wv = tape.param(w);
        int top = w.value.at(0) >= w.value.at(1) ? 0 : 1;
        if (sig) sig->push_back(top);
        Var picked = tape.gather_elems(wv, std::vector<int>{top});
        return tape.scalar(tape.mean_all(picked));
    };
    w.zero_grad();
    {
        Tape tape;
        Var wv = tape.param(w);
        tape.backward(tape.mean_all(tape.gather_elems(wv, std::vector<int>{1})));
    }
    GradCheckReport report = finite_diff_check(loss, {&w}, 1e-5, 1e-5);
    CHECK(report.skipped == 2);  // both coordinates flip the argmax at +/- eps
    CHECK(report.checked == 0);

    CHECK_THROWS_AS(finite_diff_check(loss, {&w}, 1e-3, 1e-5), ConfigError);
}

TEST_CASE("every operator passes a finite-difference check") {
    std::mt19937_64 rng(11);
    Param wa("wa", randt({3, 4}, rng, 0.5));
    Param wb("wb", randt({4, 3}, rng, 0.5));
    Param wc("wc", randt({3, 3}, rng, 0.5));
    Param wv("wv", randt({3}, rng, 0.5));

    auto loss = [&](std::vector<int>* sig) {
        (void)sig;  // no discrete selections in this graph
        Tape tape;
        Var a = tape.param(wa);                       // 3x4
        Var b = tape.param(wb);                       // 4x3
        Var c = tape.param(wc);                       // 3x3
        Var v = tape.param(wv);                       // 3

        Var m = tape.matmul(a, b);                    // 3x3
        Var att = tape.attention(m, c, tape.transpose(c), /*causal=*/true);
        Var g1 = tape.gelu(tape.add(att, m));
        Var g2 = tape.relu(tape.sub(g1, tape.scale(c, 0.25)));
        Var rs = tape.row_scale(g2, v);
        Var sel = tape.select_rows(rs, {2, 0, 0});
        Var sc = tape.scatter_rows(sel, {1, 2, 2}, 3);
        Var gc = tape.gather_cols(sc, {0, 2, 1, 1, 2, 0}, 2);
        Var ge = tape.gather_elems(sc, {0, 1, 2}, {2, 0, 1});
        Var soft = tape.softmax_rows(gc);
        Var lse = tape.logsumexp_rows(sc);
        Var parts = tape.add(tape.mean_all(tape.mul(soft, soft)), tape.mean_all(tape.mul(lse, lse)));
        Var more = tape.add(tape.mean_all(tape.mean_axis0(sc)), tape.mean_all(ge));
        Var ce = tape.cross_entropy(sc, {0, 2, 1});
        return tape.scalar(tape.add(tape.add(parts, more), ce));
    };

    for (Param* p : {&wa, &wb, &wc, &wv}) p->zero_grad();
    {
        Tape tape;
        Var a = tape.param(wa), b = tape.param(wb), c = tape.param(wc), v = tape.param(wv);
        Var m = tape.matmul(a, b);
        Var att = tape.attention(m, c, tape.transpose(c), true);
        Var g1 = tape.gelu(tape.add(att, m));
        Var g2 = tape.relu(tape.sub(g1, tape.scale(c, 0.25)));
        Var rs = tape.row_scale(g2, v);
        Var sel = tape.select_rows(rs, {2, 0, 0});
        Var sc = tape.scatter_rows(sel, {1, 2, 2}, 3);
        Var gc = tape.gather_cols(sc, {0, 2, 1, 1, 2, 0}, 2);
        Var ge = tape.gather_elems(sc, {0, 1, 2}, {2, 0, 1});
        Var soft = tape.softmax_rows(gc);
        Var lse = tape.logsumexp_rows(sc);
        Var parts = tape.add(tape.mean_all(tape.mul(soft, soft)), tape.mean_all(tape.mul(lse, lse)));
        Var more = tape.add(tape.mean_all(tape.mean_axis0(sc)), tape.mean_all(ge));
        Var ce = tape.cross_entropy(sc, {0, 2, 1});
        tape.backward(tape.add(tape.add(parts, more), ce));
    }
    GradCheckReport report = finite_diff_check(loss, {&wa, &wb, &wc, &wv}, 1e-5, 1e-5);
    CHECK(report.skipped == 0);
    CHECK(report.max_rel_err < 1e-5);
}

TEST_CASE("backward is linear in the loss") {
    std::mt19937_64 rng(3);
    Param w("w", randt({2, 3}, rng));

    auto build = [&](Tape& tape, Var& f, Var& g) {
        Var wv = tape.param(w);
        f = tape.mean_all(tape.gelu(wv));
        g = tape.mean_all(tape.mul(wv, wv));
    };

    w.zero_grad();
    {
        Tape tape;
        Var f, g;
        build(tape, f, g);
        tape.backward(tape.add(f, g));
    }
    Tensor combined = w.grad;

    w.zero_grad();
    {
        Tape tape;
        Var f, g;
        build(tape, f, g);
        tape.backward(f);
    }
    {
        Tape tape;
        Var f, g;
        build(tape, f, g);
        tape.backward(g);
    }
    for (std::size_t i = 0; i < combined.data.size(); ++i) {
        CHECK(std::fabs(combined.data[i] - w.grad.data[i]) < 1e-12);
    }
}

TEST_CASE("tape misuse and numeric guards") {
    Tape tape;
    Param w("w", Tensor({2}, {1, 2}));
    Var v = tape.param(w);
    Var loss = tape.mean_all(v);
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), TapeError);

    Tape t2;
    Tensor bad = Tensor::zeros({2});
    bad.at(0) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(t2.constant(bad), NumericError);
    CHECK_THROWS_AS(t2.scale(t2.constant(Tensor::full({2}, 1e308)), 1e308), NumericError);
    CHECK_THROWS_AS(t2.backward(t2.constant(Tensor::zeros({3}))), DimError);
}

TEST_CASE("param leaves are shared within a tape") {
    Param w("w", Tensor({2}, {1, 2}));
    Tape tape;
    Var a = tape.param(w);
    Var b = tape.param(w);
    CHECK(a.id == b.id);
    tape.backward(tape.mean_all(tape.add(a, b)));
    CHECK(w.grad.at(0) == doctest::Approx(1.0));  // two uses of the same leaf
}
