#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "hmoe/gradcheck.hpp"
#include "hmoe/losses.hpp"

using namespace hmoe;

namespace {

Tensor randt(std::vector<int> shape, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.data) v = dist(rng);
    return t;
}

}  // namespace

TEST_CASE("expert_stats frequency and mean probability") {
    Tape tape;
    // 4 tokens all argmaxing expert 2 of 4
    Tensor p = Tensor::zeros({4, 4});
    for (int t = 0; t < 4; ++t) {
        p.at(t, 2) = 0.7;
        p.at(t, 0) = p.at(t, 1) = p.at(t, 3) = 0.1;
    }
    LoadStats s = expert_stats(tape, tape.constant(p));
    CHECK(s.f == std::vector<double>{0, 0, 1, 0});

    // constant p -> P equals it
    LoadStats u = expert_stats(tape, tape.constant(Tensor::full({5, 4}, 0.25)));
    for (int j = 0; j < 4; ++j) CHECK(tape.value(u.P).at(j) == doctest::Approx(0.25).epsilon(1e-14));

    // hand-average oracle
    LoadStats two = expert_stats(tape, tape.constant(Tensor::row_major(2, 2, {0.7, 0.3, 0.2, 0.8})));
    CHECK(two.f == std::vector<double>{0.5, 0.5});
    CHECK(tape.value(two.P).at(0) == doctest::Approx(0.45).epsilon(1e-14));
    CHECK(tape.value(two.P).at(1) == doctest::Approx(0.55).epsilon(1e-14));

    CHECK_THROWS_AS(expert_stats(tape, tape.constant(Tensor::zeros({0, 4}))), StatError);
}

TEST_CASE("load balance loss anchors") {
    Tape tape;
    LoadStats uniform = expert_stats(tape, tape.constant(Tensor::full({4, 4}, 0.25)));
    CHECK(tape.scalar(load_balance_loss(tape, uniform)) == doctest::Approx(1.0).epsilon(1e-14));

    Tensor collapsed = Tensor::zeros({3, 4});
    for (int t = 0; t < 3; ++t) collapsed.at(t, 0) = 1.0;
    LoadStats c = expert_stats(tape, tape.constant(collapsed));
    CHECK(tape.scalar(load_balance_loss(tape, c)) == doctest::Approx(4.0).epsilon(1e-14));

    // two groups of 4, both uniform: terms sum to 2
    Var sum = tape.add(load_balance_loss(tape, uniform), load_balance_loss(tape, uniform));
    CHECK(tape.scalar(sum) == doctest::Approx(2.0).epsilon(1e-14));
}

TEST_CASE("load balance loss is at least one on the f equals P diagonal") {
    std::mt19937_64 rng(61);
    std::uniform_real_distribution<double> dist(0.01, 1.0);
    for (int trial = 0; trial < 300; ++trial) {
        int n = 2 + static_cast<int>(rng() % 7);
        std::vector<double> p(static_cast<std::size_t>(n));
        double z = 0.0;
        for (double& v : p) {
            v = dist(rng);
            z += v;
        }
        for (double& v : p) v /= z;
        Tape tape;
        LoadStats s;
        s.f = p;
        s.n_tokens = 1;
        s.P = tape.constant(Tensor({n}, p));
        double lb = tape.scalar(load_balance_loss(tape, s));
        CHECK(lb >= 1.0 - 1e-12);
    }
    // equality only at the uniform point
    Tape tape;
    LoadStats s;
    s.f = {0.25, 0.25, 0.25, 0.25};
    s.n_tokens = 1;
    s.P = tape.constant(Tensor({4}, s.f));
    CHECK(tape.scalar(load_balance_loss(tape, s)) == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("z loss anchors") {
    Tape tape;
    Var zero4 = tape.constant(Tensor::zeros({3, 4}));
    double ln4 = std::log(4.0);
    CHECK(tape.scalar(z_loss(tape, zero4)) == doctest::Approx(ln4 * ln4).epsilon(1e-14));

    // per-token logsumexp shifted to zero -> L_Z = 0
    Var balanced = tape.constant(Tensor::full({5, 2}, -std::log(2.0)));
    CHECK(tape.scalar(z_loss(tape, balanced)) == doctest::Approx(0.0).scale(1.0).epsilon(1e-24));

    // lse values 1 and 3 -> (1 + 9) / 2
    Var two = tape.constant(Tensor::row_major(2, 1, {1.0, 3.0}));
    CHECK(tape.scalar(z_loss(tape, two)) == doctest::Approx(5.0).epsilon(1e-14));
}

TEST_CASE("z loss is zero only when every logsumexp is zero") {
    std::mt19937_64 rng(67);
    for (int trial = 0; trial < 100; ++trial) {
        Tape tape;
        Tensor logits = randt({4, 3}, rng);
        bool all_zero_lse = true;
        for (int t = 0; t < 4; ++t) {
            double z = 0.0;
            for (int j = 0; j < 3; ++j) z += std::exp(logits.at(t, j));
            if (std::fabs(std::log(z)) > 1e-12) all_zero_lse = false;
        }
        double lz = tape.scalar(z_loss(tape, tape.constant(logits)));
        CHECK((lz == 0.0) == all_zero_lse);
        CHECK(lz >= 0.0);
    }
}

TEST_CASE("group stats per modality subset") {
    Tape tape;
    // all audio tokens with q = (0.9, 0.1)
    Tensor q = Tensor::zeros({3, 2});
    for (int t = 0; t < 3; ++t) {
        q.at(t, 0) = 0.9;
        q.at(t, 1) = 0.1;
    }
    std::vector<ModalityTag> tags(3, ModalityTag::AudioOnly);
    GroupLoadStats gs = group_stats(tape, tape.constant(q), {0, 1, 2}, tags);
    REQUIRE(gs.audio.has_value());
    CHECK(!gs.visual.has_value());
    CHECK(gs.audio->g == std::vector<double>{1, 0});
    CHECK(tape.value(gs.audio->Q).at(0) == doctest::Approx(0.9).epsilon(1e-14));
    CHECK(tape.value(gs.audio->Q).at(1) == doctest::Approx(0.1).epsilon(1e-14));

    // tie -> argmax index 0
    GroupLoadStats tie = group_stats(tape, tape.constant(Tensor::row_major(1, 2, {0.5, 0.5})), {0},
                                     {ModalityTag::AudioOnly});
    CHECK(tie.audio->g == std::vector<double>{1, 0});

    // two audio tokens, hand-average oracle
    GroupLoadStats avg = group_stats(tape, tape.constant(Tensor::row_major(2, 2, {0.8, 0.2, 0.4, 0.6})),
                                     {0, 1}, {ModalityTag::AudioOnly, ModalityTag::AudioOnly});
    CHECK(avg.audio->g == std::vector<double>{0.5, 0.5});
    CHECK(tape.value(avg.audio->Q).at(0) == doctest::Approx(0.6).epsilon(1e-14));
    CHECK(tape.value(avg.audio->Q).at(1) == doctest::Approx(0.4).epsilon(1e-14));

    // audio-visual tokens excluded entirely
    GroupLoadStats av = group_stats(tape, tape.constant(Tensor::full({2, 2}, 0.5)), {0, 1},
                                    std::vector<ModalityTag>(2, ModalityTag::AudioVisual));
    CHECK(!av.audio.has_value());
    CHECK(!av.visual.has_value());
}

TEST_CASE("load bias loss anchors") {
    Tape tape;
    // perfect specialization
    GroupLoadStats perfect;
    perfect.audio = GroupLoadStats::Subset{{1, 0}, tape.constant(Tensor({2}, {1, 0})), 4};
    perfect.visual = GroupLoadStats::Subset{{0, 1}, tape.constant(Tensor({2}, {0, 1})), 4};
    CHECK(tape.scalar(load_bias_loss(tape, perfect)) == doctest::Approx(0.0).scale(1.0).epsilon(1e-24));

    // all-AV batch -> both subsets empty -> 0
    GroupLoadStats empty;
    CHECK(tape.scalar(load_bias_loss(tape, empty)) == 0.0);

    // direct evaluation oracle
    GroupLoadStats mixed;
    mixed.audio = GroupLoadStats::Subset{{1, 0}, tape.constant(Tensor({2}, {0.9, 0.1})), 4};
    mixed.visual = GroupLoadStats::Subset{{0.5, 0.5}, tape.constant(Tensor({2}, {0.4, 0.6})), 4};
    CHECK(tape.scalar(load_bias_loss(tape, mixed)) == doctest::Approx(0.8).epsilon(1e-13));
}

TEST_CASE("load bias loss stays within bounds and decreases in audio mass") {
    std::mt19937_64 rng(71);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    double prev = 2.0;
    for (double qa : {0.1, 0.3, 0.5, 0.7, 0.9, 0.99}) {
        Tape tape;
        GroupLoadStats gs;
        gs.audio = GroupLoadStats::Subset{{0.8, 0.2}, tape.constant(Tensor({2}, {qa, 1 - qa})), 4};
        double ls = tape.scalar(load_bias_loss(tape, gs));
        CHECK(ls >= 0.0);
        CHECK(ls <= 2.0);
        CHECK(ls < prev);
        prev = ls;
    }
    for (int trial = 0; trial < 100; ++trial) {
        Tape tape;
        double qa = u01(rng), qv = u01(rng), ga = u01(rng), gv = u01(rng);
        GroupLoadStats gs;
        gs.audio = GroupLoadStats::Subset{{ga, 1 - ga}, tape.constant(Tensor({2}, {qa, 1 - qa})), 4};
        gs.visual = GroupLoadStats::Subset{{1 - gv, gv}, tape.constant(Tensor({2}, {1 - qv, qv})), 4};
        double ls = tape.scalar(load_bias_loss(tape, gs));
        CHECK(ls >= 0.0);
        CHECK(ls <= 2.0);
    }
}

TEST_CASE("total loss weighting") {
    LossWeights w;  // defaults c_B=1e-2, c_S=1e-2, c_Z=1e-3
    Tape tape;
    Var ce = tape.constant(Tensor::scalar(2.0));
    Var lb = tape.constant(Tensor::scalar(1.0));
    Var zero = tape.constant(Tensor::scalar(0.0));
    LossBreakdown bd = total_loss(tape, ce, {lb}, {zero}, {zero}, w);
    CHECK(bd.tot == doctest::Approx(2.01).epsilon(1e-14));
    CHECK(std::fabs(bd.tot - (bd.ce + w.c_B * bd.lb + w.c_S * bd.ls + w.c_Z * bd.lz)) < 1e-12);

    LossBreakdown only_ce = total_loss(tape, ce, {zero}, {zero}, {zero}, w);
    CHECK(only_ce.tot == doctest::Approx(2.0).epsilon(1e-14));

    LossWeights zw;
    zw.c_B = zw.c_S = zw.c_Z = 0.0;
    Var big = tape.constant(Tensor::scalar(123.0));
    LossBreakdown ignored = total_loss(tape, ce, {big}, {big}, {big}, zw);
    CHECK(ignored.tot == doctest::Approx(2.0).epsilon(1e-14));

    LossWeights bad;
    bad.c_B = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(total_loss(tape, ce, {lb}, {zero}, {zero}, bad), NumericError);
    LossWeights neg;
    neg.c_S = -1.0;
    CHECK_THROWS_AS(total_loss(tape, ce, {lb}, {zero}, {zero}, neg), ConfigError);
}

TEST_CASE("per-layer auxiliaries average before weighting") {
    LossWeights w;
    Tape tape;
    Var ce = tape.constant(Tensor::scalar(1.0));
    Var a = tape.constant(Tensor::scalar(2.0));
    Var b = tape.constant(Tensor::scalar(4.0));
    Var zero = tape.constant(Tensor::scalar(0.0));
    LossBreakdown bd = total_loss(tape, ce, {a, b}, {zero, zero}, {a, a}, w);
    CHECK(bd.lb == doctest::Approx(3.0).epsilon(1e-14));
    CHECK(bd.lz == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(bd.tot == doctest::Approx(1.0 + 0.01 * 3.0 + 0.001 * 2.0).epsilon(1e-13));
    REQUIRE(bd.lb_layers.size() == 2);
    CHECK(bd.lb_layers[0] == 2.0);
    CHECK(bd.lb_layers[1] == 4.0);
}

TEST_CASE("load balance gradient flows only through P") {
    // Router logits from a parameter; f is detached so dL_B/dW must match
    // finite differences of |E| * sum f_i P_i(W) with f held at its value.
    std::mt19937_64 rng(73);
    Param router("wr", randt({3, 4}, rng, 0.5));
    Tensor xin = randt({6, 3}, rng);

    auto loss = [&](std::vector<int>* sig) {
        Tape tape;
        Var probs = tape.softmax_rows(tape.matmul(tape.constant(xin), tape.param(router)));
        LoadStats s = expert_stats(tape, probs);
        if (sig) *sig = tape.selection_signature();
        return tape.scalar(load_balance_loss(tape, s));
    };
    router.zero_grad();
    {
        Tape tape;
        Var probs = tape.softmax_rows(tape.matmul(tape.constant(xin), tape.param(router)));
        LoadStats s = expert_stats(tape, probs);
        tape.backward(load_balance_loss(tape, s));
    }
    GradCheckReport report = finite_diff_check(loss, {&router}, 1e-5, 1e-5);
    CHECK(report.checked > 0);
    CHECK(report.max_rel_err < 1e-5);
}

TEST_CASE("load bias gradient flows only through Q") {
    std::mt19937_64 rng(79);
    Param inter("vr", randt({3, 2}, rng, 0.5));
    Tensor xin = randt({6, 3}, rng);
    std::vector<ModalityTag> tags = {ModalityTag::AudioOnly,  ModalityTag::AudioOnly,
                                     ModalityTag::VideoOnly,  ModalityTag::VideoOnly,
                                     ModalityTag::AudioVisual, ModalityTag::AudioOnly};

    auto loss = [&](std::vector<int>* sig) {
        Tape tape;
        Var q = tape.softmax_rows(tape.matmul(tape.constant(xin), tape.param(inter)));
        GroupLoadStats gs = group_stats(tape, q, {0, 1, 2, 3, 4, 5}, tags);
        if (sig) *sig = tape.selection_signature();
        return tape.scalar(load_bias_loss(tape, gs));
    };
    inter.zero_grad();
    {
        Tape tape;
        Var q = tape.softmax_rows(tape.matmul(tape.constant(xin), tape.param(inter)));
        GroupLoadStats gs = group_stats(tape, q, {0, 1, 2, 3, 4, 5}, tags);
        tape.backward(load_bias_loss(tape, gs));
    }
    GradCheckReport report = finite_diff_check(loss, {&inter}, 1e-5, 1e-5);
    CHECK(report.checked > 0);
    CHECK(report.max_rel_err < 1e-5);
}
