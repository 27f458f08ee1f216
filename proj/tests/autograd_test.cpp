#include <gtest/gtest.h>

#include <numeric>

#include "polypflow/nn.hpp"
#include "test_util.hpp"

using namespace pf;

namespace {

// Central finite differences on a leaf tensor against a scalar-valued forward.
double fd_max_rel_err(Tensor& x, const std::function<double()>& scalar_fn,
                      const Tensor& analytic, double eps = 1e-5) {
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + eps;
        const double up = scalar_fn();
        x[i] = orig - eps;
        const double down = scalar_fn();
        x[i] = orig;
        const double numeric = (up - down) / (2.0 * eps);
        const double denom = std::max(1e-6, std::abs(numeric) + std::abs(analytic[i]));
        worst = std::max(worst, std::abs(numeric - analytic[i]) / denom);
    }
    return worst;
}

}  // namespace

TEST(Autograd, AddSubMulValues) {
    std::mt19937 rng(1);
    Tensor a = Tensor::randn({2, 3}, rng), b = Tensor::randn({2, 3}, rng);
    Var va = leaf(a), vb = leaf(b);
    Tensor s = add(va, vb).val(), d = sub(va, vb).val(), m = mul(va, vb).val();
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_DOUBLE_EQ(s[i], a[i] + b[i]);
        EXPECT_DOUBLE_EQ(d[i], a[i] - b[i]);
        EXPECT_DOUBLE_EQ(m[i], a[i] * b[i]);
    }
    EXPECT_THROW(add(va, leaf(Tensor::zeros({3, 2}))), std::invalid_argument);
}

TEST(Autograd, MulGradient) {
    std::mt19937 rng(2);
    Tensor a = Tensor::randn({4, 4}, rng), b = Tensor::randn({4, 4}, rng);
    Var va = leaf(a), vb = leaf(b);
    backward(mean_sq(mul(va, vb)));
    auto f = [&]() { return mean_sq(mul(constant(a), constant(b))).val()[0]; };
    EXPECT_LT(fd_max_rel_err(a, f, va.grad()), 1e-6);
    EXPECT_LT(fd_max_rel_err(b, f, vb.grad()), 1e-6);
}

TEST(Autograd, ReluSigmoidMeanSqGradients) {
    std::mt19937 rng(3);
    Tensor x = Tensor::randn({3, 5}, rng);
    // keep entries away from the ReLU kink so finite differences are valid
    for (auto& v : x.data)
        if (std::abs(v) < 1e-3) v = 0.1;
    Var vx = leaf(x);
    backward(mean_sq(sigmoid(relu(vx))));
    auto f = [&]() { return mean_sq(sigmoid(relu(constant(x)))).val()[0]; };
    EXPECT_LT(fd_max_rel_err(x, f, vx.grad()), 1e-6);
}

TEST(Autograd, SharedSubexpressionAccumulates) {
    // y = x*x + x => dy/dx = 2x + 1, with x used by two ops
    Tensor x = Tensor::full({4}, 1.5);
    Var vx = leaf(x);
    Var y = add(mul(vx, vx), vx);
    // reduce to scalar through mean_sq of sqrt-free path: use add_weighted sum trick
    backward(mean_sq(y));
    // d(mean(y^2))/dx = 2/n * y * (2x+1)
    const double yv = 1.5 * 1.5 + 1.5;
    const double expect = 2.0 / 4.0 * yv * (2.0 * 1.5 + 1.0);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(vx.grad()[i], expect, 1e-12);
}

TEST(Autograd, NoGradGuardSkipsTape) {
    NoGradGuard ng;
    Var a = leaf(Tensor::full({2}, 1.0));
    Var y = mul(a, a);
    EXPECT_FALSE(y.node->needs_grad);
    EXPECT_TRUE(y.node->parents.empty());
}

TEST(Autograd, ParamLeafAccumulatesIntoGrad) {
    Param p;
    p.name = "p";
    p.value = Tensor::full({3}, 2.0);
    p.zero_grad();
    Var v1 = use(p), v2 = use(p);
    backward(mean_sq(add(v1, v2)));  // y = mean((2p)^2), dy/dp = 8p/3
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(p.grad[i], 8.0 * 2.0 / 3.0, 1e-12);

    p.frozen = true;
    p.zero_grad();
    backward(mean_sq(use(p)));
    EXPECT_EQ(p.grad.max_abs(), 0.0);
}

TEST(Autograd, ConvForwardMatchesNaiveOracle) {
    std::mt19937 rng(4);
    for (auto [stride, pad] : {std::pair{1, 0}, {1, 1}, {2, 0}, {8, 0}}) {
        Tensor x = Tensor::randn({2, 3, 16, 16}, rng);
        Tensor w = Tensor::randn({4, 3, 3, 3}, rng);
        Tensor b = Tensor::randn({4}, rng);
        Tensor got = conv2d(constant(x), constant(w), constant(b), stride, pad).val();
        Tensor want = pftest::naive_conv2d(x, w, b, stride, pad);
        ASSERT_EQ(got.shape, want.shape) << "stride " << stride << " pad " << pad;
        EXPECT_LT(pftest::max_abs_diff(got, want), 1e-12);
    }
}

TEST(Autograd, ConvGradients) {
    std::mt19937 rng(5);
    Tensor x = Tensor::randn({1, 2, 6, 6}, rng);
    Tensor w = Tensor::randn({3, 2, 3, 3}, rng);
    Tensor b = Tensor::randn({3}, rng);
    Var vx = leaf(x), vw = leaf(w), vb = leaf(b);
    backward(mean_sq(conv2d(vx, vw, vb, 1, 1)));
    auto f = [&]() {
        return mean_sq(conv2d(constant(x), constant(w), constant(b), 1, 1)).val()[0];
    };
    EXPECT_LT(fd_max_rel_err(x, f, vx.grad()), 1e-5);
    EXPECT_LT(fd_max_rel_err(w, f, vw.grad()), 1e-5);
    EXPECT_LT(fd_max_rel_err(b, f, vb.grad()), 1e-5);
}

TEST(Autograd, ConvTransposeShapeAndGradients) {
    std::mt19937 rng(6);
    Tensor x = Tensor::randn({1, 3, 4, 4}, rng);
    Tensor w = Tensor::randn({3, 2, 2, 2}, rng);
    Tensor b = Tensor::randn({2}, rng);
    Var vx = leaf(x), vw = leaf(w), vb = leaf(b);
    Var y = conv_transpose2x2(vx, vw, vb);
    ASSERT_EQ(y.val().shape, (std::vector<int>{1, 2, 8, 8}));
    // every output pixel sees exactly one input pixel and one kernel tap
    Tensor want({1, 2, 8, 8});
    for (int co = 0; co < 2; ++co)
        for (int oh = 0; oh < 8; ++oh)
            for (int ow = 0; ow < 8; ++ow) {
                double acc = b[co];
                for (int ci = 0; ci < 3; ++ci)
                    acc += x.at4(0, ci, oh / 2, ow / 2) * w.at4(ci, co, oh % 2, ow % 2);
                want.at4(0, co, oh, ow) = acc;
            }
    EXPECT_LT(pftest::max_abs_diff(y.val(), want), 1e-12);

    backward(mean_sq(y));
    auto f = [&]() {
        return mean_sq(conv_transpose2x2(constant(x), constant(w), constant(b))).val()[0];
    };
    EXPECT_LT(fd_max_rel_err(x, f, vx.grad()), 1e-5);
    EXPECT_LT(fd_max_rel_err(w, f, vw.grad()), 1e-5);
}

TEST(Autograd, MaxPoolValuesAndGradient) {
    Tensor x({1, 1, 2, 4});
    x.data = {1, 5, 2, 0, 3, -1, 2, 7};
    Var vx = leaf(x);
    Var y = maxpool2x2(vx);
    ASSERT_EQ(y.val().shape, (std::vector<int>{1, 1, 1, 2}));
    EXPECT_DOUBLE_EQ(y.val()[0], 5.0);
    EXPECT_DOUBLE_EQ(y.val()[1], 7.0);
    backward(mean_sq(y));
    // only the argmax positions receive gradient
    EXPECT_NE(vx.grad()[1], 0.0);
    EXPECT_NE(vx.grad()[7], 0.0);
    EXPECT_EQ(vx.grad()[0], 0.0);
    EXPECT_EQ(vx.grad()[4], 0.0);
    EXPECT_THROW(maxpool2x2(leaf(Tensor::zeros({1, 1, 3, 4}))), std::invalid_argument);
}

TEST(Autograd, BatchNormTrainingNormalizes) {
    std::mt19937 rng(7);
    Tensor x = Tensor::randn({4, 3, 5, 5}, rng, 3.0);
    Tensor rm = Tensor::zeros({3}), rv = Tensor::full({3}, 1.0);
    Var y = batch_norm(constant(x), leaf(Tensor::full({3}, 1.0), false),
                       leaf(Tensor::zeros({3}), false), rm, rv, /*training=*/true);
    // per-channel batch mean ~0, batch variance ~1
    for (int c = 0; c < 3; ++c) {
        double m = 0.0, v = 0.0;
        for (int n = 0; n < 4; ++n)
            for (int h = 0; h < 5; ++h)
                for (int w = 0; w < 5; ++w) m += y.val().at4(n, c, h, w);
        m /= 100.0;
        for (int n = 0; n < 4; ++n)
            for (int h = 0; h < 5; ++h)
                for (int w = 0; w < 5; ++w) {
                    double d = y.val().at4(n, c, h, w) - m;
                    v += d * d;
                }
        v /= 100.0;
        EXPECT_NEAR(m, 0.0, 1e-9);
        EXPECT_NEAR(v, 1.0, 1e-4);
    }
    // running stats moved toward batch stats
    EXPECT_GT(rm.max_abs(), 0.0);
}

TEST(Autograd, BatchNormGradients) {
    std::mt19937 rng(8);
    Tensor x = Tensor::randn({2, 2, 3, 3}, rng);
    Tensor gamma = Tensor::full({2}, 1.3), beta = Tensor::full({2}, -0.2);
    Tensor rm = Tensor::zeros({2}), rv = Tensor::full({2}, 1.0);
    Var vx = leaf(x), vg = leaf(gamma), vb = leaf(beta);
    backward(mean_sq(batch_norm(vx, vg, vb, rm, rv, true)));
    auto f = [&]() {
        Tensor rm2 = Tensor::zeros({2}), rv2 = Tensor::full({2}, 1.0);
        return mean_sq(batch_norm(constant(x), constant(gamma), constant(beta), rm2, rv2, true))
            .val()[0];
    };
    EXPECT_LT(fd_max_rel_err(x, f, vx.grad()), 1e-4);
    EXPECT_LT(fd_max_rel_err(gamma, f, vg.grad()), 1e-5);
    EXPECT_LT(fd_max_rel_err(beta, f, vb.grad()), 1e-5);
}

TEST(Autograd, BatchNormEvalUsesRunningStats) {
    Tensor x = Tensor::full({1, 1, 2, 2}, 3.0);
    Tensor rm = Tensor::full({1}, 1.0), rv = Tensor::full({1}, 4.0);
    Var y = batch_norm(constant(x), constant(Tensor::full({1}, 1.0)),
                       constant(Tensor::zeros({1})), rm, rv, /*training=*/false);
    EXPECT_NEAR(y.val()[0], (3.0 - 1.0) / std::sqrt(4.0 + 1e-5), 1e-9);
    // eval mode must not update running stats
    EXPECT_DOUBLE_EQ(rm[0], 1.0);
    EXPECT_DOUBLE_EQ(rv[0], 4.0);
}

TEST(Autograd, ConcatAndSliceRoundTrip) {
    std::mt19937 rng(9);
    Tensor a = Tensor::randn({2, 2, 3, 3}, rng), b = Tensor::randn({2, 1, 3, 3}, rng);
    Var va = leaf(a), vb = leaf(b);
    Var c = concat_channels({va, vb});
    ASSERT_EQ(c.val().shape, (std::vector<int>{2, 3, 3, 3}));
    EXPECT_DOUBLE_EQ(c.val().at4(1, 2, 0, 0), b.at4(1, 0, 0, 0));
    backward(mean_sq(c));
    auto f = [&]() {
        return mean_sq(concat_channels({constant(a), constant(b)})).val()[0];
    };
    EXPECT_LT(fd_max_rel_err(a, f, va.grad()), 1e-6);
    EXPECT_LT(fd_max_rel_err(b, f, vb.grad()), 1e-6);

    Var s = slice_batch(c, 1);
    ASSERT_EQ(s.val().shape, (std::vector<int>{1, 3, 3, 3}));
    EXPECT_DOUBLE_EQ(s.val().at4(0, 0, 1, 1), a.at4(1, 0, 1, 1));
}

TEST(Autograd, MatmulSoftmaxLinearGradients) {
    std::mt19937 rng(10);
    Tensor a = Tensor::randn({3, 4}, rng), b = Tensor::randn({5, 4}, rng);
    Tensor w = Tensor::randn({5}, rng), bias = Tensor::randn({1}, rng);
    Var va = leaf(a), vb = leaf(b), vw = leaf(w), vbias = leaf(bias);
    backward(mean_sq(linear_vec(softmax_rows(matmul(va, vb, true)), vw, vbias)));
    auto f = [&]() {
        return mean_sq(linear_vec(softmax_rows(matmul(constant(a), constant(b), true)),
                                  constant(w), constant(bias)))
            .val()[0];
    };
    EXPECT_LT(fd_max_rel_err(a, f, va.grad()), 1e-5);
    EXPECT_LT(fd_max_rel_err(b, f, vb.grad()), 1e-5);
    EXPECT_LT(fd_max_rel_err(w, f, vw.grad()), 1e-5);
    EXPECT_LT(fd_max_rel_err(bias, f, vbias.grad()), 1e-5);
}

TEST(Autograd, BilinearResizeIdentityAndGradient) {
    std::mt19937 rng(11);
    Tensor x = Tensor::randn({1, 1, 5, 5}, rng);
    Var same = bilinear_resize(constant(x), 5, 5);
    EXPECT_LT(pftest::max_abs_diff(same.val(), x), 0.0 + 1e-15);

    // constant map resizes to the same constant at any size
    Var c = bilinear_resize(constant(Tensor::full({1, 1, 4, 4}, 0.7)), 11, 9);
    for (double v : c.val().data) EXPECT_NEAR(v, 0.7, 1e-12);

    Var vx = leaf(x);
    backward(mean_sq(bilinear_resize(vx, 8, 8)));
    auto f = [&]() { return mean_sq(bilinear_resize(constant(x), 8, 8)).val()[0]; };
    EXPECT_LT(fd_max_rel_err(x, f, vx.grad()), 1e-5);
}

TEST(Autograd, UpsampleNearestAndTokens) {
    Tensor x({1, 1, 2, 2});
    x.data = {1, 2, 3, 4};
    Var up = upsample_nearest(constant(x), 2);
    ASSERT_EQ(up.val().shape, (std::vector<int>{1, 1, 4, 4}));
    EXPECT_DOUBLE_EQ(up.val().at4(0, 0, 1, 1), 1.0);
    EXPECT_DOUBLE_EQ(up.val().at4(0, 0, 3, 2), 4.0);

    Tensor f({1, 2, 2, 2});
    std::iota(f.data.begin(), f.data.end(), 0.0);
    Var tok = chw_to_tokens(constant(f));
    ASSERT_EQ(tok.val().shape, (std::vector<int>{4, 2}));
    // token i = h*W+w carries [x[0,:,h,w]]
    EXPECT_DOUBLE_EQ(tok.val().at2(3, 0), f.at4(0, 0, 1, 1));
    EXPECT_DOUBLE_EQ(tok.val().at2(3, 1), f.at4(0, 1, 1, 1));

    Tensor t({4});
    t.data = {5, 6, 7, 8};
    Var map = tokens_to_map(constant(t), 2, 2);
    ASSERT_EQ(map.val().shape, (std::vector<int>{1, 1, 2, 2}));
    EXPECT_DOUBLE_EQ(map.val().at4(0, 0, 1, 0), 7.0);
}

TEST(Autograd, MulGateBroadcastGradient) {
    std::mt19937 rng(12);
    Tensor x = Tensor::randn({2, 3, 4, 4}, rng);
    Tensor g = Tensor::uniform({2, 1, 4, 4}, rng, 0.1, 0.9);
    Var vx = leaf(x), vg = leaf(g);
    Var y = mul_gate(vx, vg);
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 3; ++c)
            EXPECT_DOUBLE_EQ(y.val().at4(n, c, 1, 2), x.at4(n, c, 1, 2) * g.at4(n, 0, 1, 2));
    backward(mean_sq(y));
    auto f = [&]() { return mean_sq(mul_gate(constant(x), constant(g))).val()[0]; };
    EXPECT_LT(fd_max_rel_err(x, f, vx.grad()), 1e-6);
    EXPECT_LT(fd_max_rel_err(g, f, vg.grad()), 1e-6);
}

TEST(Autograd, RepeatAndStackBatch) {
    std::mt19937 rng(13);
    Tensor x = Tensor::randn({1, 2, 3, 3}, rng);
    Var vx = leaf(x);
    Var r = repeat_batch(vx, 3);
    ASSERT_EQ(r.val().shape, (std::vector<int>{3, 2, 3, 3}));
    backward(mean_sq(r));
    auto f = [&]() { return mean_sq(repeat_batch(constant(x), 3)).val()[0]; };
    EXPECT_LT(fd_max_rel_err(x, f, vx.grad()), 1e-6);

    Var s = stack_batch({constant(x), constant(x)});
    ASSERT_EQ(s.val().shape, (std::vector<int>{2, 2, 3, 3}));
    EXPECT_DOUBLE_EQ(s.val().at4(1, 1, 2, 2), x.at4(0, 1, 2, 2));
}
