// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "d2vr/drfa.hpp"
#include "support/gradcheck.hpp"
#include "support/testkit.hpp"

using namespace d2vr;
using namespace d2vr::drfa;

namespace {
PosTable zero_pos(int radius = 7) {
    PosTable pos;
    pos.radius = radius;
    pos.table = Tensor::zeros({(2 * radius + 1) * (2 * radius + 1)});
    return pos;
}
}  // namespace

TEST_CASE("constant confidence reduces to the unbiased attention") {
    Rng rng(4);
    const int n = 16, d = 8;  // 4x4 grid
    Tensor Q = rand_uniform({n, d}, rng, -1.f, 1.f);
    Tensor K = rand_uniform({n, d}, rng, -1.f, 1.f);
    PosTable pos = zero_pos();
    Tensor ones = Tensor::full({n}, 1.f);

    Tensor biased = attention_scores(Q, K, pos, 4, 4, ones, 1e-6f);
    Tensor plain = attention_scores(Q, K, pos, 4, 4, Tensor(), 1e-6f);

    // scores shift by exactly log(1 + 1e-6), uniformly
    const float shift = std::log(1.f + 1e-6f);
    for (int i = 0; i < n * n; ++i)
        CHECK(biased.data()[i] - plain.data()[i] == Catch::Approx(shift).margin(1e-9));

    // post-softmax weights coincide to 1e-6
    Tensor wa = softmax(biased, 1), wb = softmax(plain, 1);
    for (int i = 0; i < n * n; ++i)
        CHECK(std::fabs(wa.data()[i] - wb.data()[i]) < 1e-6f);
}

TEST_CASE("log-confidence bias turns softmax into normalized confidences") {
    // Q = K = 0, Pos = 0, eps -> 0: rows become C / sum(C)
    const int n = 3;
    Tensor Q = Tensor::zeros({n, 4}), K = Tensor::zeros({n, 4});
    Tensor C = Tensor::from({n}, {0.1f, 0.2f, 0.5f});
    PosTable pos = zero_pos(2);
    Tensor w = softmax(attention_scores(Q, K, pos, 1, 3, C, 1e-12f), 1);
    for (int r = 0; r < n; ++r) {
        CHECK(w.data()[r * n + 0] == Catch::Approx(0.125).margin(1e-5));
        CHECK(w.data()[r * n + 1] == Catch::Approx(0.25).margin(1e-5));
        CHECK(w.data()[r * n + 2] == Catch::Approx(0.625).margin(1e-5));
    }
}

TEST_CASE("a fully corrupted key is suppressed by orders of magnitude") {
    const int n = 16;
    Tensor Q = Tensor::zeros({n, 4}), K = Tensor::zeros({n, 4});
    std::vector<float> c(n, 1.f);
    c[5] = 1e-6f;
    Tensor C = Tensor::from({n}, c);
    Tensor w = softmax(attention_scores(Q, K, zero_pos(), 4, 4, C, 1e-6f), 1);
    const float uniform = 1.f / n;
    for (int r = 0; r < n; ++r) {
        const float suppressed = w.data()[r * n + 5];
        CHECK(suppressed < 2e-6f * uniform * n);  // ~ 2e-6 in absolute terms
        CHECK(uniform / suppressed > 1e3f);       // at least three orders of magnitude
    }
}

TEST_CASE("key-side monotonicity: lowering C_j lowers column j in every row") {
    Rng rng(9);
    const int n = 9;
    Tensor Q = rand_uniform({n, 6}, rng, -1.f, 1.f);
    Tensor K = rand_uniform({n, 6}, rng, -1.f, 1.f);
    std::vector<float> base(n);
    for (auto& v : base) v = static_cast<float>(rng.uniform(0.3, 0.9));
    for (int j = 0; j < n; ++j) {
        auto lowered = base;
        lowered[j] *= 0.25f;
        Tensor w_hi = softmax(attention_scores(Q, K, zero_pos(3), 3, 3,
                                               Tensor::from({n}, base), 1e-6f), 1);
        Tensor w_lo = softmax(attention_scores(Q, K, zero_pos(3), 3, 3,
                                               Tensor::from({n}, lowered), 1e-6f), 1);
        for (int r = 0; r < n; ++r)
            CHECK(w_lo.data()[r * n + j] < w_hi.data()[r * n + j]);
    }
}

TEST_CASE("aggregate basics") {
    // one-hot rows pick individual values
    const int n = 4, d = 3;
    std::vector<float> logits(n * n, -1e4f);
    for (int r = 0; r < n; ++r) logits[r * n + (n - 1 - r)] = 1e4f;
    Rng rng(2);
    Tensor V = rand_uniform({n, d}, rng);
    Tensor P = aggregate(Tensor::from({n, n}, logits), V);
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < d; ++c)
            CHECK(P.data()[r * d + c] == Catch::Approx(V.data()[(n - 1 - r) * d + c]).margin(1e-6));

    // constant V is invariant under any attention
    Tensor Vc = Tensor::full({n, d}, 0.7f);
    Tensor scores = rand_uniform({n, n}, rng, -2.f, 2.f);
    Tensor Pc = aggregate(scores, Vc);
    for (int i = 0; i < n * d; ++i) CHECK(Pc.data()[i] == Catch::Approx(0.7f).margin(1e-6));
}

TEST_CASE("aggregate matches a brute-force double loop") {
    Rng rng(13);
    const int n = 9, d = 4;
    Tensor scores = rand_uniform({n, n}, rng, -2.f, 2.f);
    Tensor V = rand_uniform({n, d}, rng, -1.f, 1.f);
    Tensor P = aggregate(scores, V);
    auto sm = kit::ref_softmax_rows(kit::to_double(scores.vec()), n, n);
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < d; ++c) {
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += sm[i * n + j] * V.data()[j * d + c];
            CHECK(P.data()[i * d + c] == Catch::Approx(acc).margin(1e-6));
        }
}

TEST_CASE("confidence map saturation and shape") {
    DrfaConfig cfg;
    DrfaParams p = init_drfa(cfg, 1);
    // zero weights -> C = 0.5 everywhere
    for (auto& prm : p.state.params)
        if (prm.name.rfind("conf.", 0) == 0) std::fill(prm.value.data(), prm.value.data() + prm.value.numel(), 0.f);
    Rng crng(3);
    Tensor ctx = rand_uniform({cfg.feat_dim, 8, 8}, crng);
    Tensor c = confidence_map(ctx, p);
    REQUIRE(c.shape() == Shape{8, 8});
    for (int i = 0; i < 64; ++i) CHECK(c.data()[i] == Catch::Approx(0.5));

    // a large positive bias saturates toward 1
    p.state.find("conf.c2.b").data()[0] = 20.f;
    Tensor chigh = confidence_map(ctx, p);
    for (int i = 0; i < 64; ++i) CHECK(chigh.data()[i] >= 0.999999f);
}

TEST_CASE("confidence head gradient matches finite differences") {
    DrfaConfig cfg;
    cfg.feat_dim = 8;
    Rng rng(5);
    // a small hand-built head so the double reference stays simple
    Tensor w1 = (randn({4, 8, 3, 3}, rng) * 0.2f).with_grad();
    Tensor b1 = Tensor::zeros({4}).with_grad();
    Tensor w2 = (randn({1, 4, 3, 3}, rng) * 0.2f).with_grad();
    Tensor b2 = Tensor::zeros({1}).with_grad();
    Tensor ctx = rand_uniform({1, 8, 5, 5}, rng, -1.f, 1.f);

    Tensor c = sigmoid(nn::bias_nchw(conv2d(relu(nn::bias_nchw(conv2d(ctx, w1), b1)), w2), b2));
    backward(mean(c));

    auto ref = [&](const std::vector<double>& wv, int which) {
        auto w1d = kit::to_double(w1.vec());
        auto w2d = kit::to_double(w2.vec());
        auto b1d = kit::to_double(b1.vec());
        auto b2d = kit::to_double(b2.vec());
        if (which == 0) w1d = wv;
        if (which == 1) w2d = wv;
        if (which == 2) b1d = wv;
        if (which == 3) b2d = wv;
        auto xd = kit::to_double(ctx.vec());
        auto h1 = kit::ref_conv2d(xd, w1d, 1, 8, 5, 5, 4, 3, 3, 1, true);
        for (int c4 = 0; c4 < 4; ++c4)
            for (int i = 0; i < 25; ++i) {
                h1[c4 * 25 + i] += b1d[c4];
                h1[c4 * 25 + i] = std::max(0.0, h1[c4 * 25 + i]);
            }
        auto h2 = kit::ref_conv2d(h1, w2d, 1, 4, 5, 5, 1, 3, 3, 1, true);
        double acc = 0.0;
        for (int i = 0; i < 25; ++i) acc += 1.0 / (1.0 + std::exp(-(h2[i] + b2d[0])));
        return acc / 25.0;
    };
    auto fd_w1 = kit::fd_grad([&](const std::vector<double>& v) { return ref(v, 0); },
                              kit::to_double(w1.vec()));
    CHECK(kit::rel_err(fd_w1, w1.grad()) < 1e-3);
    auto fd_w2 = kit::fd_grad([&](const std::vector<double>& v) { return ref(v, 1); },
                              kit::to_double(w2.vec()));
    CHECK(kit::rel_err(fd_w2, w2.grad()) < 1e-3);
}

TEST_CASE("composite attention loss gradient matches finite differences") {
    // Q, K, V projections + confidence + positional table, all trainable
    Rng rng(21);
    const int n = 9, d = 4;
    Tensor Q = rand_uniform({n, d}, rng, -0.8f, 0.8f).with_grad();
    Tensor K = rand_uniform({n, d}, rng, -0.8f, 0.8f).with_grad();
    Tensor V = rand_uniform({n, d}, rng, -0.8f, 0.8f).with_grad();
    Tensor craw = rand_uniform({n}, rng, -1.f, 1.f).with_grad();
    PosTable pos;
    pos.radius = 2;
    pos.table = rand_uniform({25}, rng, -0.3f, 0.3f).with_grad();

    auto cw = kit::random_vec(rng, n * d);
    Tensor mix = Tensor::from({n, d}, cw);

    Tensor C = sigmoid(craw);
    Tensor loss = mean(mix * aggregate(attention_scores(Q, K, pos, 3, 3, C, 1e-6f), V));
    backward(loss);

    auto ref = [&](const std::vector<double>& qv, const std::vector<double>& kv,
                   const std::vector<double>& vv, const std::vector<double>& cv,
                   const std::vector<double>& pv) {
        std::vector<double> scores(n * n);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                double dot = 0.0;
                for (int k = 0; k < d; ++k) dot += qv[i * d + k] * kv[j * d + k];
                const int yi = i / 3, xi = i % 3, yj = j / 3, xj = j % 3;
                const int dy = std::clamp(yj - yi, -2, 2), dx = std::clamp(xj - xi, -2, 2);
                const double conf = 1.0 / (1.0 + std::exp(-cv[j]));
                scores[i * n + j] = dot / std::sqrt(static_cast<double>(d)) +
                                    pv[(dy + 2) * 5 + (dx + 2)] + std::log(conf + 1e-6);
            }
        auto sm = kit::ref_softmax_rows(scores, n, n);
        double acc = 0.0;
        for (int i = 0; i < n; ++i)
            for (int c = 0; c < d; ++c) {
                double p = 0.0;
                for (int j = 0; j < n; ++j) p += sm[i * n + j] * vv[j * d + c];
                acc += cw[i * d + c] * p;
            }
        return acc / (n * d);
    };
    auto dq = kit::to_double(Q.vec()), dk = kit::to_double(K.vec()), dv = kit::to_double(V.vec()),
         dc = kit::to_double(craw.vec()), dp = kit::to_double(pos.table.vec());
    CHECK(kit::rel_err(kit::fd_grad([&](const std::vector<double>& x) { return ref(x, dk, dv, dc, dp); }, dq), Q.grad()) < 1e-3);
    CHECK(kit::rel_err(kit::fd_grad([&](const std::vector<double>& x) { return ref(dq, x, dv, dc, dp); }, dk), K.grad()) < 1e-3);
    CHECK(kit::rel_err(kit::fd_grad([&](const std::vector<double>& x) { return ref(dq, dk, x, dc, dp); }, dv), V.grad()) < 1e-3);
    CHECK(kit::rel_err(kit::fd_grad([&](const std::vector<double>& x) { return ref(dq, dk, dv, x, dp); }, dc), craw.grad()) < 1e-3);
    CHECK(kit::rel_err(kit::fd_grad([&](const std::vector<double>& x) { return ref(dq, dk, dv, dc, x); }, dp), pos.table.grad()) < 1e-3);
}

TEST_CASE("untrained estimator returns finite flow within the clamp bound") {
    DrfaParams p = init_drfa(DrfaConfig{}, 7);
    Rng rng(8);
    Tensor a = rand_uniform({1, 32, 32}, rng);
    Tensor b = rand_uniform({1, 32, 32}, rng);
    FlowField f = estimate_flow(a, b, p);
    REQUIRE(f.flow.shape() == Shape{2, 32, 32});
    for (int i = 0; i < f.flow.numel(); ++i) {
        CHECK(std::isfinite(f.flow.data()[i]));
        CHECK(std::fabs(f.flow.data()[i]) <= 32.f);
    }
    REQUIRE(f.confidence.defined());
    for (int i = 0; i < f.confidence.numel(); ++i) {
        CHECK(f.confidence.data()[i] > 0.f);
        CHECK(f.confidence.data()[i] < 1.f);
    }
    CHECK_THROWS_AS(estimate_flow(a, rand_uniform({1, 16, 16}, rng), p), ShapeError);
}

TEST_CASE("checkpoint round trip preserves the estimator exactly") {
    auto dir = std::filesystem::temp_directory_path() / "d2vr_test_drfa_ckpt";
    std::filesystem::remove_all(dir);
    DrfaParams p = init_drfa(DrfaConfig{}, 3);
    save_drfa(dir, p);
    DrfaParams q = load_drfa(dir);
    CHECK(q.cfg.use_confidence == p.cfg.use_confidence);
    Rng rng(1);
    Tensor a = rand_uniform({1, 32, 32}, rng), b = rand_uniform({1, 32, 32}, rng);
    CHECK(estimate_flow(a, b, p).flow.vec() == estimate_flow(a, b, q).flow.vec());
}

TEST_CASE("short training run reduces the flow loss") {
    synthgen::DatasetConfig dcfg;
    dcfg.train_lo = 0;
    dcfg.train_hi = 6;
    dcfg.eval_lo = 6;
    dcfg.eval_hi = 7;
    dcfg.clean.T = 4;
    dcfg.motion = "translate";
    auto data = synthgen::make_split(dcfg, true);

    DrfaConfig cfg;
    DrfaParams p = init_drfa(cfg, 11);
    FlowTrainConfig tc;
    tc.steps = 60;
    tc.batch = 4;
    auto curve = train_flow(data, p, tc);
    REQUIRE(curve.size() == 60);
    float head = 0.f, tail = 0.f;
    for (int i = 0; i < 10; ++i) {
        head += curve[i];
        tail += curve[curve.size() - 1 - i];
    }
    CHECK(tail < head);

    SECTION("training without ground-truth flow is rejected") {
        auto no_flow = data;
        for (auto& pair : no_flow) pair.clean.gt_flow = Tensor();
        CHECK_THROWS_AS(train_flow(no_flow, p, tc), ConfigError);
    }
}
