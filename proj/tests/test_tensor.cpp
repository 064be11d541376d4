// Tensor core and nn op tests. Analytic gradients are checked against
// central finite differences; convolution forward values against an
// independent per-output-element reference.

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "ptq4vm/nn.hpp"
#include "ptq4vm/tensor.hpp"

using namespace ptq4vm;

namespace {

// Per-output-element convolution reference, dense or depthwise.
std::vector<float> conv_reference(const std::vector<float>& x,
                                  const std::vector<float>& w,
                                  const std::vector<float>& b, int n, int ci,
                                  int h, int wd, int co, int kh, int kw,
                                  int stride, int pad, bool depthwise) {
    int ho = (h + 2 * pad - kh) / stride + 1;
    int wo = (wd + 2 * pad - kw) / stride + 1;
    std::vector<float> out(static_cast<size_t>(n) * co * ho * wo, 0.0f);
    for (int img = 0; img < n; ++img)
        for (int oc = 0; oc < co; ++oc)
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox) {
                    double acc = b[static_cast<size_t>(oc)];
                    int ic_lo = depthwise ? oc : 0;
                    int ic_hi = depthwise ? oc + 1 : ci;
                    for (int ic = ic_lo; ic < ic_hi; ++ic)
                        for (int ky = 0; ky < kh; ++ky)
                            for (int kx = 0; kx < kw; ++kx) {
                                int iy = oy * stride + ky - pad;
                                int ix = ox * stride + kx - pad;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= wd)
                                    continue;
                                size_t xi =
                                    ((static_cast<size_t>(img) * ci + ic) * h +
                                     iy) *
                                        wd +
                                    ix;
                                size_t wi_ic = depthwise ? 0 : ic;
                                size_t wi =
                                    ((static_cast<size_t>(oc) *
                                          (depthwise ? 1 : ci) +
                                      wi_ic) *
                                         kh +
                                     ky) *
                                        kw +
                                    kx;
                                acc += static_cast<double>(x[xi]) * w[wi];
                            }
                    out[((static_cast<size_t>(img) * co + oc) * ho + oy) * wo +
                        ox] = static_cast<float>(acc);
                }
    return out;
}

// Central-difference derivative of f w.r.t. one scalar slot.
double numeric_grad(const std::function<double()>& f, float* slot, double h) {
    float saved = *slot;
    *slot = static_cast<float>(saved + h);
    double fp = f();
    *slot = static_cast<float>(saved - h);
    double fm = f();
    *slot = saved;
    return (fp - fm) / (2.0 * h);
}

// Checks every analytic gradient of `params` for the scalar loss produced by
// `forward` against finite differences.
void check_gradients(const std::function<Tensor()>& forward,
                     std::vector<Tensor> params, double h = 1e-2,
                     double tol = 1e-3) {
    for (auto& p : params) p.zero_grad();
    {
        Tape tape;
        Tensor loss = forward();
        tape.backward(loss);
    }
    auto f = [&]() -> double { return static_cast<double>(forward().item()); };
    for (auto& p : params) {
        auto grad = p.grad();
        auto data = p.mutable_data();
        for (size_t i = 0; i < data.size(); ++i) {
            double num = numeric_grad(f, &data[i], h);
            double ana = grad[i];
            double scale = std::max({1.0, std::fabs(num), std::fabs(ana)});
            EXPECT_NEAR(ana, num, tol * scale)
                << "param slot " << i << " of " << data.size();
        }
    }
}

Tensor randu(Shape shape, Rng& rng, float lo = -1.0f, float hi = 1.0f,
             bool requires_grad = false) {
    std::vector<float> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
    return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

}  // namespace

TEST(Tensor, ShapeValidation) {
    EXPECT_THROW(Tensor::from_data({2, 3}, {1.0f, 2.0f}),
                 std::invalid_argument);
    EXPECT_THROW(Tensor::from_data({0}, {}), std::invalid_argument);
    EXPECT_THROW(Tensor::from_data({1}, {NAN}), std::invalid_argument);
    EXPECT_THROW(Tensor::from_data({1}, {INFINITY}), std::invalid_argument);
    Tensor t = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    EXPECT_EQ(t.numel(), 4);
}

TEST(Tensor, BroadcastPatterns) {
    Tensor x = Tensor::from_data({1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
    Tensor c = Tensor::from_data({2}, {10, 100});
    Tensor y = mul(x, c);
    std::vector<float> want = {10, 20, 30, 40, 500, 600, 700, 800};
    for (int i = 0; i < 8; ++i) EXPECT_FLOAT_EQ(y.data()[i], want[i]);

    Tensor c4 = Tensor::from_data({1, 2, 1, 1}, {10, 100});
    Tensor y4 = mul(x, c4);
    for (int i = 0; i < 8; ++i) EXPECT_FLOAT_EQ(y4.data()[i], want[i]);

    Tensor s = Tensor::scalar(2.0f);
    Tensor ys = mul(s, x);
    for (int i = 0; i < 8; ++i) EXPECT_FLOAT_EQ(ys.data()[i], 2.0f * x.data()[i]);

    // NC11 with batch dim against NCHW
    Tensor xb = Tensor::from_data({2, 1, 1, 2}, {1, 2, 3, 4});
    Tensor cb = Tensor::from_data({2, 1, 1, 1}, {10, 100});
    Tensor yb = mul(xb, cb);
    EXPECT_FLOAT_EQ(yb.data()[0], 10);
    EXPECT_FLOAT_EQ(yb.data()[1], 20);
    EXPECT_FLOAT_EQ(yb.data()[2], 300);
    EXPECT_FLOAT_EQ(yb.data()[3], 400);

    Tensor bad = Tensor::from_data({3}, {1, 2, 3});
    EXPECT_THROW(mul(x, bad), std::invalid_argument);
}

TEST(Tensor, BinaryOpGradients) {
    Rng rng(7);
    Tensor a = randu({2, 3, 4, 4}, rng, -1, 1, true);
    Tensor b = randu({2, 3, 4, 4}, rng, -1, 1, true);
    Tensor c = randu({3}, rng, 0.5f, 1.5f, true);
    Tensor s = randu({1}, rng, 0.5f, 1.5f, true);
    Tensor coeff = randu({2, 3, 4, 4}, rng);

    check_gradients(
        [&] {
            Tensor t = add(mul(a, b), mul(sub(a, c), s));
            return sum_all(mul(t, coeff));
        },
        {a, b, c, s});
}

TEST(Tensor, SubBroadcastOrientation) {
    Tensor x = Tensor::from_data({1, 1, 1, 2}, {5, 7});
    Tensor s = Tensor::scalar(1.0f);
    Tensor d1 = sub(x, s);
    EXPECT_FLOAT_EQ(d1.data()[0], 4);
    EXPECT_FLOAT_EQ(d1.data()[1], 6);
    Tensor d2 = sub(s, x);
    EXPECT_FLOAT_EQ(d2.data()[0], -4);
    EXPECT_FLOAT_EQ(d2.data()[1], -6);
}

TEST(Tensor, UnaryOpsAndGradients) {
    Rng rng(11);
    Tensor a = randu({1, 2, 3, 3}, rng, -2, 2, true);
    Tensor coeff = randu({1, 2, 3, 3}, rng);
    for (auto op : {0, 1, 2, 3}) {
        check_gradients(
            [&] {
                Tensor y;
                switch (op) {
                    case 0: y = relu(a); break;
                    case 1: y = sigmoid(a); break;
                    case 2: y = tanh_op(a); break;
                    default: y = abs_op(a); break;
                }
                return sum_all(mul(y, coeff));
            },
            {a}, 1e-3);
    }
}

TEST(Tensor, Reductions) {
    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    EXPECT_FLOAT_EQ(sum_all(a).item(), 10.0f);
    EXPECT_FLOAT_EQ(mean_all(a).item(), 2.5f);

    Tensor x = Tensor::from_data({1, 2, 2, 2}, {1, 2, 3, 4, 10, 20, 30, 40});
    Tensor m = spatial_mean(x);
    ASSERT_EQ(m.shape(), (Shape{1, 2, 1, 1}));
    EXPECT_FLOAT_EQ(m.data()[0], 2.5f);
    EXPECT_FLOAT_EQ(m.data()[1], 25.0f);

    Rng rng(3);
    Tensor b = randu({2, 3, 2, 2}, rng, -1, 1, true);
    Tensor coeff = randu({2, 3, 1, 1}, rng);
    check_gradients([&] { return sum_all(mul(spatial_mean(b), coeff)); }, {b});
}

TEST(Tensor, ConcatSliceRoundTrip) {
    Rng rng(5);
    Tensor a = randu({2, 2, 3, 3}, rng, -1, 1, true);
    Tensor b = randu({2, 3, 3, 3}, rng, -1, 1, true);
    Tensor cat = concat_channels({a, b});
    ASSERT_EQ(cat.shape(), (Shape{2, 5, 3, 3}));
    Tensor a2 = slice_channels(cat, 0, 2);
    Tensor b2 = slice_channels(cat, 2, 5);
    for (int64_t i = 0; i < a.numel(); ++i)
        EXPECT_FLOAT_EQ(a2.data()[i], a.data()[i]);
    for (int64_t i = 0; i < b.numel(); ++i)
        EXPECT_FLOAT_EQ(b2.data()[i], b.data()[i]);

    Tensor coeff = randu({2, 5, 3, 3}, rng);
    check_gradients([&] { return sum_all(mul(concat_channels({a, b}), coeff)); },
                    {a, b});
    Tensor coeff2 = randu({2, 2, 3, 3}, rng);
    check_gradients(
        [&] { return sum_all(mul(slice_channels(concat_channels({a, b}), 1, 3), coeff2)); },
        {a, b});

    EXPECT_THROW(slice_channels(cat, 3, 3), std::invalid_argument);
    EXPECT_THROW(slice_channels(cat, 0, 6), std::invalid_argument);
}

TEST(Tensor, LossValuesAndGradients) {
    Tensor a = Tensor::from_data({1, 1, 1, 4}, {1, 2, 3, 4});
    Tensor b = Tensor::from_data({1, 1, 1, 4}, {1, 2, 5, 1});
    EXPECT_FLOAT_EQ(mse_loss(a, b).item(), (0 + 0 + 4 + 9) / 4.0f);
    EXPECT_FLOAT_EQ(l1_loss(a, b).item(), (0 + 0 + 2 + 3) / 4.0f);

    Rng rng(9);
    Tensor x = randu({2, 2, 3, 3}, rng, -1, 1, true);
    Tensor t = randu({2, 2, 3, 3}, rng);
    check_gradients([&] { return mse_loss(x, t); }, {x});
    check_gradients([&] { return l1_loss(x, t); }, {x}, 1e-3);
}

TEST(Tensor, TapeDiscipline) {
    Tensor a = Tensor::from_data({1}, {2.0f}, true);
    Tape tape;
    Tensor y = mul(a, a);
    tape.backward(y);
    EXPECT_FLOAT_EQ(a.grad()[0], 4.0f);
    EXPECT_THROW(tape.backward(y), std::runtime_error);

    Tensor big = Tensor::from_data({2}, {1, 2}, true);
    Tape tape2;
    Tensor z = mul(big, big);
    EXPECT_THROW(tape2.backward(z), std::invalid_argument);
}

TEST(Tensor, LeafGradAccumulation) {
    Tensor a = Tensor::from_data({1}, {3.0f}, true);
    {
        Tape tape;
        Tensor y = mul(a, a);
        tape.backward(y);
    }
    EXPECT_FLOAT_EQ(a.grad()[0], 6.0f);
    {
        Tape tape;
        Tensor y = mul(a, a);
        tape.backward(y);
    }
    EXPECT_FLOAT_EQ(a.grad()[0], 12.0f);
    a.zero_grad();
    EXPECT_FLOAT_EQ(a.grad()[0], 0.0f);
}

TEST(Tensor, NoTapeNoGraph) {
    Tensor a = Tensor::from_data({1}, {2.0f}, true);
    Tensor y = mul(a, a);
    EXPECT_TRUE(y.node()->parents.empty());
    Tape tape;
    Tensor z = mul(a, a);
    EXPECT_EQ(z.node()->parents.size(), 2u);
    Tensor cold = mul(z.detach(), z.detach());
    EXPECT_TRUE(cold.node()->parents.empty());
    tape.backward(mean_all(z));
}

TEST(Conv2d, ForwardMatchesReference) {
    Rng rng(21);
    struct Case {
        int n, ci, h, w, co, k, stride, pad;
    };
    std::vector<Case> cases = {
        {1, 1, 5, 5, 1, 3, 1, 1}, {2, 3, 8, 6, 4, 3, 1, 1},
        {1, 4, 7, 7, 2, 3, 2, 1}, {2, 2, 6, 6, 5, 1, 1, 0},
        {1, 3, 9, 5, 2, 5, 2, 2}, {1, 2, 4, 4, 3, 3, 1, 0},
    };
    for (const auto& c : cases) {
        Tensor x = randu({c.n, c.ci, c.h, c.w}, rng);
        Tensor w = randu({c.co, c.ci, c.k, c.k}, rng);
        Tensor b = randu({c.co}, rng);
        Tensor y = conv2d(x, w, b, c.stride, c.pad);
        std::vector<float> ref = conv_reference(
            {x.data().begin(), x.data().end()},
            {w.data().begin(), w.data().end()},
            {b.data().begin(), b.data().end()}, c.n, c.ci, c.h, c.w, c.co,
            c.k, c.k, c.stride, c.pad, false);
        ASSERT_EQ(static_cast<size_t>(y.numel()), ref.size());
        for (size_t i = 0; i < ref.size(); ++i)
            EXPECT_NEAR(y.data()[i], ref[i], 1e-4)
                << "case n=" << c.n << " ci=" << c.ci << " i=" << i;
    }
}

TEST(Conv2d, DepthwiseForwardMatchesReference) {
    Rng rng(22);
    Tensor x = randu({2, 3, 6, 7}, rng);
    Tensor w = randu({3, 1, 3, 3}, rng);
    Tensor b = randu({3}, rng);
    for (int stride : {1, 2}) {
        Tensor y = depthwise_conv2d(x, w, b, stride, 1);
        std::vector<float> ref = conv_reference(
            {x.data().begin(), x.data().end()},
            {w.data().begin(), w.data().end()},
            {b.data().begin(), b.data().end()}, 2, 3, 6, 7, 3, 3, 3, stride,
            1, true);
        ASSERT_EQ(static_cast<size_t>(y.numel()), ref.size());
        for (size_t i = 0; i < ref.size(); ++i)
            EXPECT_NEAR(y.data()[i], ref[i], 1e-4);
    }
}

TEST(Conv2d, Gradients) {
    Rng rng(23);
    Tensor x = randu({1, 2, 5, 5}, rng, -1, 1, true);
    Tensor w = randu({3, 2, 3, 3}, rng, -1, 1, true);
    Tensor b = randu({3}, rng, -1, 1, true);
    Tensor coeff = randu({1, 3, 5, 5}, rng);
    check_gradients(
        [&] { return sum_all(mul(conv2d(x, w, b, 1, 1), coeff)); },
        {x, w, b});

    Tensor coeff2 = randu({1, 3, 3, 3}, rng);
    check_gradients(
        [&] { return sum_all(mul(conv2d(x, w, b, 2, 1), coeff2)); },
        {x, w, b});
}

TEST(Conv2d, DepthwiseGradients) {
    Rng rng(24);
    Tensor x = randu({2, 3, 4, 4}, rng, -1, 1, true);
    Tensor w = randu({3, 1, 3, 3}, rng, -1, 1, true);
    Tensor b = randu({3}, rng, -1, 1, true);
    Tensor coeff = randu({2, 3, 4, 4}, rng);
    check_gradients(
        [&] { return sum_all(mul(depthwise_conv2d(x, w, b, 1, 1), coeff)); },
        {x, w, b});
}

TEST(Conv2d, ShapeErrors) {
    Rng rng(25);
    Tensor x = randu({1, 2, 4, 4}, rng);
    Tensor w = randu({3, 3, 3, 3}, rng);
    Tensor b = randu({3}, rng);
    EXPECT_THROW(conv2d(x, w, b, 1, 1), std::invalid_argument);
    Tensor w2 = randu({3, 2, 3, 3}, rng);
    Tensor bbad = randu({4}, rng);
    EXPECT_THROW(conv2d(x, w2, bbad, 1, 1), std::invalid_argument);
    Tensor wbig = randu({3, 2, 7, 7}, rng);
    EXPECT_THROW(conv2d(x, wbig, b, 1, 1), std::invalid_argument);
    EXPECT_THROW(conv2d(x, w2, b, 0, 1), std::invalid_argument);
}

TEST(Upsample, FactorTwoRowValues) {
    // 2x upsample of [0, 1] along width: [0, 0.25, 0.75, 1].
    Tensor x = Tensor::from_data({1, 1, 1, 2}, {0.0f, 1.0f});
    Tensor y = bilinear_upsample(x, 2);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 4}));
    std::vector<float> want = {0.0f, 0.25f, 0.75f, 1.0f};
    for (int r = 0; r < 2; ++r)
        for (int i = 0; i < 4; ++i)
            EXPECT_FLOAT_EQ(y.data()[r * 4 + i], want[static_cast<size_t>(i)]);
}

TEST(Upsample, FactorFourValues) {
    Tensor x = Tensor::from_data({1, 1, 1, 2}, {0.0f, 1.0f});
    Tensor y = bilinear_upsample(x, 4);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 4, 8}));
    // src = (o + 0.5)/4 - 0.5 against samples at 0 and 1, edge-clamped.
    std::vector<float> want = {0.0f, 0.0f, 0.125f, 0.375f,
                               0.625f, 0.875f, 1.0f, 1.0f};
    for (int i = 0; i < 8; ++i) EXPECT_FLOAT_EQ(y.data()[i], want[static_cast<size_t>(i)]);
}

TEST(Upsample, GradientsAndErrors) {
    Rng rng(31);
    Tensor x = randu({1, 2, 3, 3}, rng, -1, 1, true);
    Tensor coeff = randu({1, 2, 6, 6}, rng);
    check_gradients(
        [&] { return sum_all(mul(bilinear_upsample(x, 2), coeff)); }, {x});
    EXPECT_THROW(bilinear_upsample(x, 1), std::invalid_argument);
    EXPECT_THROW(bilinear_upsample(x, 0), std::invalid_argument);
}

TEST(Adam, HandComputedSteps) {
    // p=1, g=0.5 (constant), lr=0.1: mhat=0.5, vhat=0.25 every step, so each
    // update is lr*0.5/(0.5+1e-8) ~= 0.099999998.
    std::vector<Tensor> params = {Tensor::from_data({1}, {1.0f}, true)};
    AdamState st;
    st.init(params);
    std::vector<float> g = {0.5f};
    std::vector<std::span<const float>> grads = {std::span<const float>(g)};
    adam_step(params, grads, st, 0.1f);
    EXPECT_NEAR(params[0].data()[0], 0.900000002, 2e-6);
    adam_step(params, grads, st, 0.1f);
    EXPECT_NEAR(params[0].data()[0], 0.800000004, 2e-6);
    EXPECT_EQ(st.step, 2);
}

TEST(Adam, ZeroGradLeavesParamsUnchanged) {
    std::vector<Tensor> params = {Tensor::from_data({2}, {1.5f, -2.5f}, true)};
    AdamState st;
    st.init(params);
    std::vector<float> g = {0.0f, 0.0f};
    std::vector<std::span<const float>> grads = {std::span<const float>(g)};
    adam_step(params, grads, st, 0.1f);
    EXPECT_FLOAT_EQ(params[0].data()[0], 1.5f);
    EXPECT_FLOAT_EQ(params[0].data()[1], -2.5f);
}

TEST(Adam, StateMismatchRejected) {
    std::vector<Tensor> params = {Tensor::from_data({2}, {1, 2}, true)};
    AdamState st;  // never initialized
    std::vector<float> g = {0.1f, 0.2f};
    std::vector<std::span<const float>> grads = {std::span<const float>(g)};
    EXPECT_THROW(adam_step(params, grads, st, 0.1f), std::runtime_error);
}

TEST(Adam, GradPulledFromTape) {
    Tensor p = Tensor::from_data({1}, {2.0f}, true);
    std::vector<Tensor> params = {p};
    AdamState st;
    st.init(params);
    p.zero_grad();
    {
        Tape tape;
        Tensor loss = mul(p, p);
        tape.backward(loss);
    }
    adam_step(params, st, 0.01f);
    EXPECT_LT(p.data()[0], 2.0f);
    EXPECT_GT(p.data()[0], 1.98f);
}

TEST(Rng, Determinism) {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
    Rng c(42), d(43);
    EXPECT_NE(c.next_u64(), d.next_u64());
    // Normal moments sanity
    Rng e(7);
    double sum = 0, sq = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        double v = e.normal();
        sum += v;
        sq += v * v;
    }
    EXPECT_NEAR(sum / n, 0.0, 0.05);
    EXPECT_NEAR(sq / n, 1.0, 0.05);
}
