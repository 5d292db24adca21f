#include <catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include <gmoe/fusion.hpp>

#include "test_support.hpp"

using namespace gmoe;
using gmoe::testing::brute_force_conv;
using gmoe::testing::random_tensor;

namespace {

// Interleaving written from the 1-based index formula: channel 2d <- xa_d, 2d-1 <- xb_d.
Tensor interleave_oracle(const Tensor& xa, const Tensor& xb) {
    const std::size_t h = xa.dim(0), w = xa.dim(1), d = xa.dim(2);
    Tensor out({h, w, 2 * d});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t one_based = 1; one_based <= d; ++one_based) {
                out.at(y, x, 2 * one_based - 1) = xa.at(y, x, one_based - 1);
                out.at(y, x, 2 * one_based - 2) = xb.at(y, x, one_based - 1);
            }
    return out;
}

GateConfig small_config(FusionStyle style, std::size_t d = 3, std::size_t classes = 4) {
    GateConfig c;
    c.style = style;
    c.feature_channels = d;
    c.num_classes = classes;
    c.dropout_ratio = 0.5;
    return c;
}

std::vector<FeaturePair> random_pairs(std::size_t k, std::size_t hw, std::size_t d, Rng& rng) {
    std::vector<FeaturePair> out;
    for (std::size_t i = 0; i < k; ++i) {
        out.push_back({random_tensor({hw, hw, d}, rng, 0.0, 1.0), random_tensor({hw, hw, d}, rng, 0.0, 1.0)});
    }
    return out;
}

void randomize(GateNet& gate, Rng& rng, double scale = 0.5) {
    for (Parameter& p : gate.parameters()) {
        for (double& v : p.value.data()) v = rng.uniform(-scale, scale);
    }
}

}  // namespace

TEST_CASE("concat_fuse interleaves channels") {
    Tensor xa({1, 1, 2}, std::vector<double>{10, 20});
    Tensor xb({1, 1, 2}, std::vector<double>{1, 2});
    CHECK(concat_fuse(xa, xb).storage() == std::vector<double>{1, 10, 2, 20});

    Rng rng(1);
    const Tensor same = random_tensor({2, 2, 3}, rng);
    const Tensor f = concat_fuse(same, same);
    for (std::size_t i = 0; i < f.size(); i += 2) CHECK(f[i] == f[i + 1]);

    const Tensor a = random_tensor({3, 3, 4}, rng), b = random_tensor({3, 3, 4}, rng);
    CHECK(concat_fuse(a, b) == interleave_oracle(a, b));
    CHECK_THROWS_AS(concat_fuse(a, random_tensor({3, 3, 5}, rng)), ShapeError);
}

TEST_CASE("concat_fuse gradient routes back to each stream") {
    Rng rng(2);
    Parameter a("a", random_tensor({2, 2, 3}, rng)), b("b", random_tensor({2, 2, 3}, rng));
    const Tensor r = random_tensor({2, 2, 6}, rng);
    Graph g;
    Var f = concat_fuse(g, g.parameter(a), g.parameter(b));
    Var weighted = fully_connected(g, f, g.constant(r.reshaped({r.size(), 1})), g.constant(Tensor({1})));
    Var loss = weighted;
    g.backward(loss);
    for (std::size_t i = 0; i < 12; ++i) {
        CHECK(a.grad[i] == r[2 * i + 1]);
        CHECK(b.grad[i] == r[2 * i]);
    }
}

TEST_CASE("conv_fuse") {
    Rng rng(3);
    const std::size_t d = 3;
    const Tensor xa = random_tensor({4, 4, d}, rng), xb = random_tensor({4, 4, d}, rng);

    SECTION("selection filter returns xa") {
        Tensor f({1, 1, 2 * d, d});
        for (std::size_t c = 0; c < d; ++c) f[(2 * c + 1) * d + c] = 1.0;
        CHECK(conv_fuse(xa, xb, f, Tensor({d})) == xa);
    }
    SECTION("zero filter gives the bias everywhere") {
        const Tensor bias = Tensor::vector({0.5, -1.0, 2.0});
        const Tensor out = conv_fuse(xa, xb, Tensor({1, 1, 2 * d, d}), bias);
        for (std::size_t p = 0; p < 16; ++p)
            for (std::size_t c = 0; c < d; ++c) CHECK(out[p * d + c] == bias[c]);
    }
    SECTION("equals concatenation followed by a 1x1 convolution") {
        const Tensor f = random_tensor({1, 1, 2 * d, d}, rng), b = random_tensor({d}, rng);
        CHECK(conv_fuse(xa, xb, f, b) == brute_force_conv(interleave_oracle(xa, xb), f, b, 1, 0));
    }
    SECTION("averaging filter averages the streams") {
        const Tensor out = conv_fuse(xa, xb, averaging_fusion_filter(d), Tensor({d}));
        CHECK(max_abs_diff(out, (xa + xb) * 0.5) < 1e-15);
    }
    SECTION("filter shape is checked") {
        CHECK_THROWS_AS(conv_fuse(xa, xb, Tensor({1, 1, d, d}), Tensor({d})), ShapeError);
    }
}

TEST_CASE("gate output with zero-initialized weight head") {
    Rng rng(4);
    const auto pairs = random_pairs(3, 4, 3, rng);
    GateNet soft(small_config(FusionStyle::Conv), GateActivation::Softmax, rng);
    const GateOutput s = gate_forward(soft, pairs, GateActivation::Softmax, false, rng);
    CHECK(s.w1 == 0.5);
    CHECK(s.w2 == 0.5);
    CHECK(s.per_segment_raw.size() == 3);
    CHECK(s.g_c.shape() == Shape{4});

    GateNet relu_gate(small_config(FusionStyle::Concat), GateActivation::ReLU, rng);
    const GateOutput r = gate_forward(relu_gate, pairs, GateActivation::ReLU, false, rng);
    CHECK(r.w1 == 0.5);
    CHECK(r.w2 == 0.5);
    CHECK_FALSE(r.dead);
}

TEST_CASE("ReLU gate applies the activation to the pooled raw vector") {
    Rng rng(5);
    GateNet gate(small_config(FusionStyle::Concat), GateActivation::ReLU, rng);
    gate.param("gate.head_g.weight").value.fill(0.0);
    gate.param("gate.head_g.bias").value = Tensor::vector({-1.0, 2.0});
    const auto pairs = random_pairs(2, 4, 3, rng);
    const GateOutput out = gate_forward(gate, pairs, GateActivation::ReLU, false, rng);
    CHECK(out.w1 == 0.0);
    CHECK(out.w2 == 2.0);
    CHECK_FALSE(out.dead);

    gate.param("gate.head_g.bias").value = Tensor::vector({-1.0, -0.5});
    const GateOutput dead = gate_forward(gate, pairs, GateActivation::ReLU, false, rng);
    CHECK(dead.dead);
    CHECK(dead.w1 == kDeadGateFallback);
    CHECK(dead.w2 == kDeadGateFallback);
}

TEST_CASE("pooling precedes the activation") {
    // Per-snippet raw outputs [-3, 1] and [1, 1] pool to [-1, 1]; the literal
    // order gives ReLU -> (0, 1), while activating per snippet would give (0.5, 1).
    Rng rng(6);
    GateConfig cfg = small_config(FusionStyle::Concat, 1, 2);
    cfg.dropout_ratio = 0.0;
    GateNet gate(cfg, GateActivation::ReLU, rng);
    // Identity-like trunk: 1x1-centred kernels pass the fused input through.
    Tensor k1({3, 3, 2, 1});
    k1[(4 * 2 + 0) * 1 + 0] = 1.0;  // centre tap, channel 0 (xb)
    gate.param("gate.trunk1.kernel").value = k1;
    Tensor k2({3, 3, 1, 2});
    k2[4 * 2 + 0] = 1.0;
    gate.param("gate.trunk2.kernel").value = k2;
    // pooled feature f = [v, 0] with v the temporal input value; raw = [4v - 3, 1].
    gate.param("gate.head_g.weight").value = Tensor({2, 2}, std::vector<double>{4, 0, 0, 0});
    gate.param("gate.head_g.bias").value = Tensor::vector({-3, 1});

    std::vector<FeaturePair> pairs{{Tensor({4, 4, 1}), Tensor({4, 4, 1}, 0.0)}, {Tensor({4, 4, 1}), Tensor({4, 4, 1}, 1.0)}};
    const GateOutput out = gate_forward(gate, pairs, GateActivation::ReLU, false, rng);
    REQUIRE(out.per_segment_raw.size() == 2);
    CHECK(out.per_segment_raw[0] == Tensor::vector({-3, 1}));
    CHECK(out.per_segment_raw[1] == Tensor::vector({1, 1}));
    CHECK(out.w1 == 0.0);
    CHECK(out.w2 == 1.0);
}

TEST_CASE("K=3 pooled outputs match a hand-traced forward pass") {
    Rng rng(7);
    GateConfig cfg = small_config(FusionStyle::Conv, 2, 3);
    GateNet gate(cfg, GateActivation::Softmax, rng);
    randomize(gate, rng);
    const auto pairs = random_pairs(3, 4, 2, rng);
    const GateOutput out = gate_forward(gate, pairs, GateActivation::Softmax, false, rng);

    // Recompute every stage with the independent oracles.
    auto p = [&](const char* n) { return gate.param(n).value; };
    Tensor raw_mean({2}), c_mean({3});
    for (const FeaturePair& fp : pairs) {
        Tensor h = brute_force_conv(interleave_oracle(fp.spatial, fp.temporal), p("gate.fuse.filter"), p("gate.fuse.bias"), 1, 0);
        h = brute_force_conv(h, p("gate.trunk1.kernel"), p("gate.trunk1.bias"), 1, 1);
        for (double& v : h.data()) v = std::max(v, 0.0);
        h = brute_force_conv(h, p("gate.trunk2.kernel"), p("gate.trunk2.bias"), 1, 1);
        for (double& v : h.data()) v = std::max(v, 0.0);
        Tensor f({4});
        for (std::size_t q = 0; q < 16; ++q)
            for (std::size_t c = 0; c < 4; ++c) f[c] += h[q * 4 + c] / 16.0;
        for (std::size_t j = 0; j < 2; ++j) {
            double acc = p("gate.head_g.bias")[j];
            for (std::size_t i = 0; i < 4; ++i) acc += f[i] * p("gate.head_g.weight")[i * 2 + j];
            raw_mean[j] += acc / 3.0;
        }
        for (std::size_t j = 0; j < 3; ++j) {
            double acc = p("gate.head_c.bias")[j];
            for (std::size_t i = 0; i < 4; ++i) acc += f[i] * p("gate.head_c.weight")[i * 3 + j];
            c_mean[j] += acc / 3.0;
        }
    }
    const double e0 = std::exp(raw_mean[0]), e1 = std::exp(raw_mean[1]);
    CHECK(std::abs(out.w1 - e0 / (e0 + e1)) < 1e-12);
    CHECK(std::abs(out.w2 - e1 / (e0 + e1)) < 1e-12);
    CHECK(max_abs_diff(out.g_c, c_mean) < 1e-12);
}

TEST_CASE("gate invariants on random inputs") {
    Rng rng(8);
    for (int trial = 0; trial < 200; ++trial) {
        const auto style = trial % 2 ? FusionStyle::Conv : FusionStyle::Concat;
        const auto act = trial % 4 < 2 ? GateActivation::ReLU : GateActivation::Softmax;
        GateNet gate(small_config(style, 2, 3), act, rng);
        randomize(gate, rng, 1.0);
        auto pairs = random_pairs(1 + trial % 4, 4, 2, rng);
        const GateOutput out = gate_forward(gate, pairs, act, false, rng);
        CHECK(out.w1 >= 0.0);
        CHECK(out.w2 >= 0.0);
        if (act == GateActivation::Softmax) CHECK(std::abs(out.w1 + out.w2 - 1.0) < 1e-12);
        std::reverse(pairs.begin(), pairs.end());
        const GateOutput rev = gate_forward(gate, pairs, act, false, rng);
        CHECK(max_abs_diff(rev.g_c, out.g_c) < 1e-15);
        CHECK(std::abs(rev.w1 - out.w1) < 1e-15);
    }
    GateNet gate(small_config(FusionStyle::Concat), GateActivation::ReLU, rng);
    CHECK_THROWS_AS(gate_forward(gate, std::vector<FeaturePair>{}, GateActivation::ReLU, false, rng), std::invalid_argument);
    CHECK_THROWS_AS(gate_forward(gate, random_pairs(1, 4, 5, rng), GateActivation::ReLU, false, rng), ShapeError);
}

TEST_CASE("gated_fuse") {
    ExpertScores s{Tensor::vector({2, 0}), Tensor::vector({0, 2})};
    CHECK(gated_fuse(s, 1, 0) == s.g_rgb);
    CHECK(gated_fuse(s, 0.5, 0.5) == Tensor::vector({1, 1}));
    CHECK_THROWS_AS(gated_fuse(s, -0.1, 1), std::invalid_argument);

    Rng rng(9);
    for (int i = 0; i < 100; ++i) {
        ExpertScores r{random_tensor({6}, rng), random_tensor({6}, rng)};
        const double w1 = rng.uniform(), w2 = rng.uniform(), alpha = rng.uniform(0.1, 10.0);
        CHECK(gated_fuse(r, alpha * w1, alpha * w2).argmax() == gated_fuse(r, w1, w2).argmax());
    }
}

TEST_CASE("multitask loss") {
    const Tensor uniform({4});
    CHECK(std::abs(multitask_loss(1, uniform, uniform, 1.0) - 2.0 * std::log(4.0)) < 1e-12);
    Rng rng(10);
    const Tensor a = random_tensor({5}, rng, -3, 3), c = random_tensor({5}, rng, -3, 3);
    CHECK(multitask_loss(2, a, c, 0.0) == cross_entropy_value(a, 2));

    auto ce = [](const Tensor& s, std::size_t y) {
        double m = s[0];
        for (double v : s.data()) m = std::max(m, v);
        double z = 0.0;
        for (double v : s.data()) z += std::exp(v - m);
        return -(s[y] - m - std::log(z));
    };
    CHECK(std::abs(multitask_loss(3, a, c, 1.0) - (ce(a, 3) + ce(c, 3))) < 1e-12);
    CHECK_THROWS_AS(multitask_loss(5, a, c, 1.0), std::out_of_range);
    CHECK_THROWS_AS(multitask_loss(0, a, c, -1.0), std::invalid_argument);
}

namespace {

std::vector<GateSample> random_samples(std::size_t n, std::size_t k, std::size_t d, std::size_t classes, Rng& rng) {
    std::vector<GateSample> out;
    for (std::size_t i = 0; i < n; ++i) {
        GateSample s;
        s.snippets = random_pairs(k, 4, d, rng);
        s.scores = {random_tensor({classes}, rng, -2, 2), random_tensor({classes}, rng, -2, 2)};
        s.label = static_cast<std::size_t>(rng.below(classes));
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<Tensor> gradients_for(GateNet& gate, const GateSample& sample, GateActivation act, double lambda,
                                  bool classification_only = false) {
    for (Parameter& p : gate.parameters()) p.zero_grad();
    Rng rng(99);
    Graph g;
    GateLoss l = gated_loss(g, gate, sample, act, lambda, true, rng);
    Var loss = l.loss;
    if (classification_only) loss = scale(g, cross_entropy(g, l.trace.class_scores, sample.label), lambda);
    g.backward(loss);
    std::vector<Tensor> out;
    for (const Parameter& p : gate.parameters()) out.push_back(p.grad);
    return out;
}

}  // namespace

TEST_CASE("gate gradients against finite differences") {
    Rng rng(11);
    for (FusionStyle style : {FusionStyle::Concat, FusionStyle::Conv}) {
        for (GateActivation act : {GateActivation::ReLU, GateActivation::Softmax}) {
            for (double lambda : {0.0, 1.0}) {
                GateNet gate(small_config(style, 2, 3), act, rng);
                randomize(gate, rng);
                const auto samples = random_samples(2, 2, 2, 3, rng);
                const auto r = gate_backward_check(gate, samples, act, lambda, 1e-5, 5);
                INFO(to_string(style) << " " << to_string(act) << " lambda " << lambda << " worst " << r.worst_parameter
                                      << " margin " << r.relu_margin);
                CHECK(r.checked > 0);
                if (r.relu_margin > 1e-6) CHECK(r.max_relative_error < 1e-4);
            }
        }
    }
}

TEST_CASE("lambda 0 leaves the classification head without gradient") {
    Rng rng(12);
    GateNet gate(small_config(FusionStyle::Conv), GateActivation::Softmax, rng);
    randomize(gate, rng);
    const auto samples = random_samples(1, 3, 3, 4, rng);
    gradients_for(gate, samples[0], GateActivation::Softmax, 0.0);
    CHECK(gate.param("gate.head_c.weight").grad == Tensor(gate.param("gate.head_c.weight").value.shape()));
    CHECK(gate.param("gate.head_c.bias").grad == Tensor({4}));
    gradients_for(gate, samples[0], GateActivation::Softmax, 1.0);
    CHECK_FALSE(gate.param("gate.head_c.bias").grad == Tensor({4}));
}

TEST_CASE("dead ReLU gate passes no gradient to the weight head") {
    Rng rng(13);
    GateNet gate(small_config(FusionStyle::Concat), GateActivation::ReLU, rng);
    randomize(gate, rng);
    gate.param("gate.head_g.weight").value.fill(0.0);
    gate.param("gate.head_g.bias").value = Tensor::vector({-1.0, -2.0});
    const auto samples = random_samples(1, 2, 3, 4, rng);
    gradients_for(gate, samples[0], GateActivation::ReLU, 1.0);
    CHECK(gate.param("gate.head_g.weight").grad == Tensor({6, 2}));
    CHECK(gate.param("gate.head_g.bias").grad == Tensor({2}));
    CHECK_FALSE(gate.param("gate.head_c.bias").grad == Tensor({4}));
}

TEST_CASE("trunk gradient splits into fusion and classification terms") {
    Rng rng(14);
    GateNet gate(small_config(FusionStyle::Conv), GateActivation::Softmax, rng);
    randomize(gate, rng);
    const auto samples = random_samples(1, 3, 3, 4, rng);
    const double lambda = 0.7;
    const auto total = gradients_for(gate, samples[0], GateActivation::Softmax, lambda);
    const auto fused_only = gradients_for(gate, samples[0], GateActivation::Softmax, 0.0);
    const auto class_only = gradients_for(gate, samples[0], GateActivation::Softmax, lambda, true);
    for (std::size_t i = 0; i < total.size(); ++i) {
        CHECK(max_abs_diff(total[i], fused_only[i] + class_only[i]) < 1e-12);
    }
}

TEST_CASE("gated fusion depends only on expert scores") {
    // Changing feature maps while holding the gate output fixed cannot change G_adap.
    ExpertScores s{Tensor::vector({1, -1, 3}), Tensor::vector({0, 2, 1})};
    const Tensor a = gated_fuse(s, 0.3, 0.9);
    CHECK(a == Tensor::vector({0.3 * 1 + 0.9 * 0, 0.3 * -1 + 0.9 * 2, 0.3 * 3 + 0.9 * 1}));
}
