#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "duet/common.hpp"
#include "duet/rng.hpp"
#include "duet/tape.hpp"

#include "fd_check.hpp"
#include "oracles.hpp"

#include <cmath>
#include <functional>

using namespace duet;
using duet::testing::check_gradient;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (auto& x : t.v) x = (rng.uniform() * 2.0 - 1.0) * scale;
    return t;
}

std::vector<size_t> all_indices(const Tensor& t) {
    std::vector<size_t> idx(t.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return idx;
}

// Builds the graph twice: once for backward, then repeatedly inside the
// finite-difference closure. `build` must read `params` afresh each call.
void fd_case(std::vector<Tensor>& params,
             const std::function<Var(Tape&, std::vector<Var>&)>& build, double tol = 1e-6) {
    Tape tape;
    std::vector<Var> leaves;
    for (auto& p : params) leaves.push_back(tape.input(p, true));
    Var loss = build(tape, leaves);
    REQUIRE(loss.val().size() == 1);
    tape.backward(loss);

    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto forward = [&]() {
            Tape t2;
            std::vector<Var> lv;
            for (auto& p : params) lv.push_back(t2.input(p, false));
            return build(t2, lv).val().v[0];
        };
        auto rep = check_gradient(forward, params[pi], tape.grad(leaves[pi]),
                                  all_indices(params[pi]), 1e-5, tol, 1e-8, true);
        INFO("param ", pi, " worst rel ", rep.worst_rel);
        CHECK(rep.failed == 0);
    }
}

}  // namespace

TEST_CASE("elementwise and broadcast ops match finite differences") {
    Rng rng(1234);
    std::vector<Tensor> params = {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng),
                                  random_tensor({1, 4}, rng)};
    fd_case(params, [](Tape& t, std::vector<Var>& p) {
        Var x = t.add(p[0], p[1]);
        x = t.add_scaled(x, p[1], 0.5);
        x = t.add_rowvec(x, p[2]);
        x = t.hadamard(x, p[0]);
        x = t.swish(x);
        x = t.scale(x, 1.7);
        return t.sum_all(x);
    });
}

TEST_CASE("activations match finite differences") {
    Rng rng(77);
    std::vector<Tensor> params = {random_tensor({4, 6}, rng, 2.0)};
    fd_case(params, [](Tape& t, std::vector<Var>& p) {
        Var a = t.relu(p[0]);
        Var b = t.sigmoid(p[0]);
        Var c = t.glu(p[0]);
        Var s = t.add(t.sum_all(a), t.sum_all(b));
        return t.add(s, t.sum_all(c));
    });
}

TEST_CASE("matmul variants match finite differences") {
    Rng rng(42);
    std::vector<Tensor> params = {random_tensor({3, 5}, rng), random_tensor({5, 4}, rng),
                                  random_tensor({6, 5}, rng)};
    fd_case(params, [](Tape& t, std::vector<Var>& p) {
        Var c = t.matmul(p[0], p[1]);      // 3x4
        Var d = t.matmul_nt(p[0], p[2]);   // 3x6
        return t.add(t.sum_all(c), t.sum_all(t.swish(d)));
    });
}

TEST_CASE("layer_norm and softmax families match finite differences") {
    Rng rng(7);
    std::vector<Tensor> params = {random_tensor({4, 8}, rng, 2.0), random_tensor({1, 8}, rng),
                                  random_tensor({1, 8}, rng)};
    fd_case(params, [](Tape& t, std::vector<Var>& p) {
        Var ln = t.layer_norm(p[0], p[1], p[2]);
        Var sm = t.softmax_rows(p[0]);
        Var lsm = t.log_softmax_rows(ln);
        Var s = t.add(t.sum_all(t.hadamard(sm, sm)), t.sum_all(t.hadamard(lsm, sm)));
        return s;
    }, 5e-6);
}

TEST_CASE("shape plumbing ops match finite differences") {
    Rng rng(99);
    std::vector<Tensor> params = {random_tensor({3, 4}, rng), random_tensor({2, 4}, rng)};
    fd_case(params, [](Tape& t, std::vector<Var>& p) {
        Var c = t.concat_rows(p[0], p[1]);          // 5x4
        Var s1 = t.slice_rows(c, 1, 4);             // 3x4
        Var s2 = t.slice_cols(c, 1, 3);             // 5x2
        Var cc = t.concat_cols({s2, t.slice_cols(c, 0, 1)});  // 5x3
        Var total = t.add(t.sum_all(t.swish(s1)), t.sum_all(t.hadamard(cc, cc)));
        return total;
    });
}

TEST_CASE("masking ops match finite differences") {
    Rng rng(5);
    std::vector<Tensor> params = {random_tensor({5, 3}, rng), random_tensor({1, 3}, rng)};
    std::vector<uint8_t> flags = {1, 0, 1, 0, 0};
    std::vector<double> row_scale = {1.0, 0.0, 1.0, 1.0, 0.0};
    fd_case(params, [flags, row_scale](Tape& t, std::vector<Var>& p) {
        Var r = t.replace_rows(p[0], p[1], flags);
        Var m = t.mul_rowmask(r, row_scale);
        return t.sum_all(t.swish(m));
    });
}

TEST_CASE("gather_rows matches finite differences") {
    Rng rng(31);
    std::vector<Tensor> params = {random_tensor({6, 4}, rng)};
    std::vector<int> ids = {2, 0, 5, 2, 2};
    fd_case(params, [ids](Tape& t, std::vector<Var>& p) {
        Var e = t.gather_rows(p[0], ids);
        return t.sum_all(t.swish(e));
    });
}

TEST_CASE("depthwise_conv1d matches finite differences") {
    Rng rng(8);
    std::vector<Tensor> params = {random_tensor({7, 3}, rng), random_tensor({5, 3}, rng),
                                  random_tensor({1, 3}, rng)};
    fd_case(params, [](Tape& t, std::vector<Var>& p) {
        Var y = t.depthwise_conv1d(p[0], p[1], p[2]);
        return t.sum_all(t.swish(y));
    });
}

TEST_CASE("conv2d_s2 matches finite differences and shape rule") {
    Rng rng(21);
    std::vector<Tensor> params = {random_tensor({7, 6, 2}, rng),
                                  random_tensor({3, 3, 3, 2}, rng), random_tensor({1, 3}, rng)};
    {
        Tape t;
        Var x = t.input(params[0], false);
        Var w = t.input(params[1], false);
        Var b = t.input(params[2], false);
        Var y = t.conv2d_s2(x, w, b);
        CHECK(y.val().shape == std::vector<int>{4, 3, 3});
    }
    fd_case(params, [](Tape& t, std::vector<Var>& p) {
        Var y = t.conv2d_s2(p[0], p[1], p[2]);
        return t.sum_all(t.swish(y));
    });
}

TEST_CASE("dropout backward uses the forward mask") {
    Rng rng(3);
    Tensor x = random_tensor({20, 10}, rng);
    Tape t;
    Var xv = t.input(x, true);
    Rng drop_rng(11);
    Var y = t.dropout(xv, 0.5, drop_rng);
    Var loss = t.sum_all(y);
    t.backward(loss);
    const Tensor& g = t.grad(xv);
    int kept = 0;
    for (size_t i = 0; i < x.size(); ++i) {
        if (y.val().v[i] == 0.0) {
            CHECK(g.v[i] == 0.0);
        } else {
            CHECK(g.v[i] == doctest::Approx(2.0));
            kept++;
        }
    }
    CHECK(kept > 50);
    CHECK(kept < 150);

    // p = 0 is an exact identity
    Tape t2;
    Var x2 = t2.input(x, true);
    Rng r2(1);
    Var y2 = t2.dropout(x2, 0.0, r2);
    CHECK(y2.idx == x2.idx);
}

TEST_CASE("cross_entropy_sum: analytic uniform value and finite differences") {
    // zero logits -> every row contributes ln(C)
    Tape t;
    Tensor z(4, 7);
    Var logits = t.input(z, true);
    std::vector<int> targets = {0, -1, 3, 6};
    Var loss = t.cross_entropy_sum(logits, targets);
    CHECK(loss.val().v[0] == doctest::Approx(3.0 * std::log(7.0)).epsilon(1e-9));

    Rng rng(17);
    std::vector<Tensor> params = {random_tensor({5, 6}, rng, 2.0)};
    std::vector<int> tg = {1, -1, 0, 5, 2};
    fd_case(params, [tg](Tape& tp, std::vector<Var>& p) {
        return tp.cross_entropy_sum(p[0], tg);
    });
}

TEST_CASE("ctc_loss equals exhaustive path enumeration") {
    Rng rng(2024);
    for (int trial = 0; trial < 20; ++trial) {
        int t_len = 2 + int(rng.uniform_int(5));   // 2..6
        int n_cls = 3 + int(rng.uniform_int(2));   // 3..4 incl. blank
        int l_len = 1 + int(rng.uniform_int(3));   // 1..3
        std::vector<int> labels;
        for (int i = 0; i < l_len; ++i) labels.push_back(int(rng.uniform_int(n_cls - 1)));
        int min_frames = l_len;
        for (int i = 0; i + 1 < l_len; ++i)
            if (labels[i] == labels[i + 1]) min_frames++;
        if (t_len < min_frames) {
            t_len = min_frames;
        }
        Tensor logits = random_tensor({t_len, n_cls}, rng, 2.0);
        int blank = n_cls - 1;

        Tape tape;
        Var lv = tape.input(logits, true);
        Var loss = tape.ctc_loss(lv, labels, blank);
        double oracle = duet::testing::ctc_enumeration_nll(logits, labels, blank);
        CHECK(loss.val().v[0] == doctest::Approx(oracle).epsilon(1e-9));

        // gradient against finite differences
        tape.backward(loss);
        std::vector<Tensor> params = {logits};
        auto forward = [&]() {
            Tape t2;
            Var l2 = t2.input(params[0], false);
            return t2.ctc_loss(l2, labels, blank).val().v[0];
        };
        auto rep = check_gradient(forward, params[0], tape.grad(lv),
                                  all_indices(params[0]), 1e-5, 1e-6, 1e-8, true);
        CHECK(rep.failed == 0);
    }
}

TEST_CASE("ctc_loss rejects transcripts that cannot align") {
    Tape t;
    Tensor logits(2, 4);
    Var lv = t.input(logits, false);
    CHECK_THROWS_AS((void)t.ctc_loss(lv, {0, 0}, 3), NoAlignment);   // needs 3 frames
    CHECK_THROWS_AS((void)t.ctc_loss(lv, {0, 1, 2}, 3), NoAlignment);
    CHECK_THROWS_AS((void)t.ctc_loss(lv, {}, 3), InvalidInput);
    CHECK_THROWS_AS((void)t.ctc_loss(lv, {3}, 3), InvalidInput);  // blank as label
}

TEST_CASE("ctc_loss single-frame analytic case") {
    // T=1, one label: loss = -log softmax(logits)[label]
    Tape t;
    Tensor logits(1, 3);
    logits.v = {0.2, 1.4, -0.3};
    Var lv = t.input(logits, false);
    Var loss = t.ctc_loss(lv, {1}, 2);
    double z = std::exp(0.2) + std::exp(1.4) + std::exp(-0.3);
    CHECK(loss.val().v[0] == doctest::Approx(-std::log(std::exp(1.4) / z)).epsilon(1e-12));
}

TEST_CASE("backward accumulates through shared subexpressions") {
    // f = sum(x*x) used twice -> grad = 4x
    Tape t;
    Tensor x(2, 2);
    x.v = {1.0, -2.0, 3.0, 0.5};
    Var xv = t.input(x, true);
    Var sq = t.hadamard(xv, xv);
    Var loss = t.add(t.sum_all(sq), t.sum_all(sq));
    t.backward(loss);
    const Tensor& g = t.grad(xv);
    for (size_t i = 0; i < x.size(); ++i) CHECK(g.v[i] == doctest::Approx(4.0 * x.v[i]));
}
