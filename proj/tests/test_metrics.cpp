#include "ptq4vm/metrics.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "ptq4vm/flow.hpp"

using namespace ptq4vm;

namespace {

Tensor make_matte(Rng& rng, int h, int w) {
    std::vector<float> v(static_cast<std::size_t>(h) * w);
    for (float& x : v) x = static_cast<float>(rng.uniform());
    return Tensor::from_data({1, 1, h, w}, std::move(v));
}

// Union-find largest component, ties broken by smallest member index. A
// deliberately different algorithm from the library's seed-order BFS.
std::vector<std::uint8_t> uf_largest(const std::vector<std::uint8_t>& mask, int h, int w) {
    std::vector<int> parent(mask.size());
    std::iota(parent.begin(), parent.end(), 0);
    std::function<int(int)> find = [&](int a) {
        while (parent[a] != a) a = parent[a] = parent[parent[a]];
        return a;
    };
    auto unite = [&](int a, int b) { parent[std::max(find(a), find(b))] = std::min(find(a), find(b)); };
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int p = y * w + x;
            if (!mask[p]) continue;
            if (x + 1 < w && mask[p + 1]) unite(p, p + 1);
            if (y + 1 < h && mask[p + w]) unite(p, p + w);
        }
    std::map<int, std::size_t> sizes;
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) ++sizes[find(static_cast<int>(i))];
    int best = -1;
    std::size_t best_size = 0;
    for (const auto& [root, size] : sizes)
        if (size > best_size) {  // map iterates roots ascending = smallest member first
            best = root;
            best_size = size;
        }
    std::vector<std::uint8_t> out(mask.size(), 0);
    if (best >= 0)
        for (std::size_t i = 0; i < mask.size(); ++i)
            out[i] = mask[i] && find(static_cast<int>(i)) == best;
    return out;
}

double conn_oracle(const Tensor& pred, const Tensor& gt) {
    const int h = pred.shape()[2], w = pred.shape()[3];
    const auto p = pred.data();
    const auto g = gt.data();
    const std::size_t n = p.size();
    std::vector<double> l_map(n, -1.0);
    for (int k = 1; k <= 9; ++k) {
        const double theta = k / 10.0;
        std::vector<std::uint8_t> mask(n);
        for (std::size_t i = 0; i < n; ++i) mask[i] = p[i] >= theta && g[i] >= theta;
        const auto omega = uf_largest(mask, h, w);
        for (std::size_t i = 0; i < n; ++i)
            if (l_map[i] < 0.0 && !omega[i]) l_map[i] = (k - 1) / 10.0;
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double l = l_map[i] < 0.0 ? 1.0 : l_map[i];
        const double dp = p[i] - l, dg = g[i] - l;
        acc += std::abs((1.0 - (dp >= 0.15 ? dp : 0.0)) - (1.0 - (dg >= 0.15 ? dg : 0.0)));
    }
    return acc * 1e3 / static_cast<double>(n);
}

// Dense non-separable gradient-magnitude oracle: full 11x11 kernels from
// outer products, 2-D correlation with replicate border.
double grad_oracle(const Tensor& pred, const Tensor& gt) {
    constexpr int R = 5;
    constexpr double sigma = 1.4;
    double gsum = 0.0, ramp = 0.0;
    double gs[2 * R + 1], gd[2 * R + 1];
    for (int k = -R; k <= R; ++k) {
        gs[k + R] = std::exp(-0.5 * k * k / (sigma * sigma));
        gsum += gs[k + R];
        gd[k + R] = k * std::exp(-0.5 * k * k / (sigma * sigma));
        ramp += k * gd[k + R];
    }
    for (int i = 0; i < 2 * R + 1; ++i) {
        gs[i] /= gsum;
        gd[i] /= ramp;
    }
    const int h = pred.shape()[2], w = pred.shape()[3];
    auto magnitude = [&](std::span<const float> im) {
        std::vector<double> mag(im.size());
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double gx = 0.0, gy = 0.0;
                for (int ky = -R; ky <= R; ++ky)
                    for (int kx = -R; kx <= R; ++kx) {
                        const int sy = std::clamp(y + ky, 0, h - 1);
                        const int sx = std::clamp(x + kx, 0, w - 1);
                        const double v = im[static_cast<std::size_t>(sy) * w + sx];
                        gx += gs[ky + R] * gd[kx + R] * v;
                        gy += gd[ky + R] * gs[kx + R] * v;
                    }
                mag[static_cast<std::size_t>(y) * w + x] = std::sqrt(gx * gx + gy * gy);
            }
        return mag;
    };
    const auto mp = magnitude(pred.data());
    const auto mg = magnitude(gt.data());
    double acc = 0.0;
    for (std::size_t i = 0; i < mp.size(); ++i) acc += (mp[i] - mg[i]) * (mp[i] - mg[i]);
    return acc * 1e3 / static_cast<double>(mp.size());
}

}  // namespace

TEST(Mad, MatchesBruteForceAndGoldenScale) {
    Rng rng(31);
    Tensor p = make_matte(rng, 8, 8);
    Tensor g = make_matte(rng, 8, 8);
    double acc = 0.0;
    for (std::size_t i = 0; i < 64; ++i)
        acc += std::abs(static_cast<double>(p.data()[i]) - g.data()[i]);
    EXPECT_NEAR(mad(p, g), acc / 64.0 * 1e3, 1e-6);
    EXPECT_EQ(mad(p, p), 0.0);

    Tensor ones = Tensor::full({1, 1, 8, 8}, 1.0f);
    Tensor zeros = Tensor::zeros({1, 1, 8, 8});
    EXPECT_DOUBLE_EQ(mad(ones, zeros), 1000.0);

    // One pixel off by 0.5 in an 8x8 matte: 0.5 / 64 * 1e3.
    std::vector<float> v(64, 0.0f);
    v[13] = 0.5f;
    EXPECT_DOUBLE_EQ(mad(Tensor::from_data({1, 1, 8, 8}, std::move(v)), zeros), 7.8125);
}

TEST(Mse, MatchesBruteForceAndGoldenScale) {
    Rng rng(32);
    Tensor p = make_matte(rng, 8, 8);
    Tensor g = make_matte(rng, 8, 8);
    double acc = 0.0;
    for (std::size_t i = 0; i < 64; ++i) {
        const double d = static_cast<double>(p.data()[i]) - g.data()[i];
        acc += d * d;
    }
    EXPECT_NEAR(mse_metric(p, g), acc / 64.0 * 1e3, 1e-6);
    EXPECT_EQ(mse_metric(p, p), 0.0);

    Tensor ones = Tensor::full({1, 1, 8, 8}, 1.0f);
    Tensor zeros = Tensor::zeros({1, 1, 8, 8});
    EXPECT_DOUBLE_EQ(mse_metric(ones, zeros), 1000.0);

    std::vector<float> v(64, 0.0f);
    v[13] = 0.5f;
    EXPECT_DOUBLE_EQ(mse_metric(Tensor::from_data({1, 1, 8, 8}, std::move(v)), zeros), 3.90625);
}

TEST(Mad, ShapeMismatchThrows) {
    Tensor a = Tensor::zeros({1, 1, 8, 8});
    Tensor b = Tensor::zeros({1, 1, 8, 9});
    EXPECT_THROW(mad(a, b), std::invalid_argument);
    EXPECT_THROW(mse_metric(a, b), std::invalid_argument);
    EXPECT_THROW(grad_error(a, b), std::invalid_argument);
    EXPECT_THROW(conn_error(a, b), std::invalid_argument);
}

TEST(Grad, ZeroOnIdenticalAndOnConstants) {
    Rng rng(33);
    Tensor p = make_matte(rng, 8, 8);
    EXPECT_EQ(grad_error(p, p), 0.0);
    Tensor c1 = Tensor::full({1, 1, 8, 8}, 0.3f);
    Tensor c2 = Tensor::full({1, 1, 8, 8}, 0.7f);
    EXPECT_NEAR(grad_error(c1, c2), 0.0, 1e-12);
}

TEST(Grad, MatchesDenseConvolutionOracle) {
    Rng rng(34);
    Tensor p = make_matte(rng, 8, 8);
    Tensor g = make_matte(rng, 8, 8);
    const double got = grad_error(p, g);
    const double want = grad_oracle(p, g);
    EXPECT_GT(got, 0.0);
    EXPECT_NEAR(got, want, 1e-5 * std::max(1.0, std::abs(want)));
}

TEST(Grad, ShiftedStepEdgeIsPositive) {
    std::vector<float> a(64, 0.0f), b(64, 0.0f);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            if (x >= 3) a[static_cast<std::size_t>(y) * 8 + x] = 1.0f;
            if (x >= 4) b[static_cast<std::size_t>(y) * 8 + x] = 1.0f;
        }
    Tensor p = Tensor::from_data({1, 1, 8, 8}, std::move(a));
    Tensor g = Tensor::from_data({1, 1, 8, 8}, std::move(b));
    EXPECT_GT(grad_error(p, g), 0.0);
    EXPECT_NEAR(grad_error(p, g), grad_oracle(p, g), 1e-8);
}

TEST(Grad, RejectsImagesSmallerThanKernelHalfExtent) {
    Tensor small = Tensor::zeros({1, 1, 5, 5});
    EXPECT_THROW(grad_error(small, small), std::invalid_argument);
    Tensor ok = Tensor::zeros({1, 1, 6, 6});
    EXPECT_EQ(grad_error(ok, ok), 0.0);
}

TEST(Conn, ZeroOnIdenticalAndFullyConnected) {
    Rng rng(35);
    Tensor p = make_matte(rng, 8, 8);
    EXPECT_EQ(conn_error(p, p), 0.0);
    Tensor ones = Tensor::full({1, 1, 8, 8}, 1.0f);
    EXPECT_EQ(conn_error(ones, ones), 0.0);
}

TEST(Conn, DetachedBlobMatchesHandValue) {
    // gt: 3x3 unit blob at the top-left. pred: same blob plus a detached
    // 2x2 blob of 0.8 at the bottom-right. The detached pixels never join
    // the largest component, so l = 0 there: phi_pred = 0.2, phi_gt = 1,
    // total 4 * 0.8 * 1e3 / 64 = 50.
    std::vector<float> gt(64, 0.0f), pr(64, 0.0f);
    for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 3; ++x) {
            gt[static_cast<std::size_t>(y) * 8 + x] = 1.0f;
            pr[static_cast<std::size_t>(y) * 8 + x] = 1.0f;
        }
    for (int y = 6; y < 8; ++y)
        for (int x = 6; x < 8; ++x) pr[static_cast<std::size_t>(y) * 8 + x] = 0.8f;
    Tensor p = Tensor::from_data({1, 1, 8, 8}, std::move(pr));
    Tensor g = Tensor::from_data({1, 1, 8, 8}, std::move(gt));
    EXPECT_NEAR(conn_error(p, g), 50.0, 1e-5);
    EXPECT_DOUBLE_EQ(conn_error(p, g), conn_oracle(p, g));
}

TEST(Conn, MatchesUnionFindOracleOnRandomMattes) {
    Rng rng(36);
    for (int trial = 0; trial < 8; ++trial) {
        Tensor p = make_matte(rng, 8, 8);
        Tensor g = make_matte(rng, 8, 8);
        EXPECT_DOUBLE_EQ(conn_error(p, g), conn_oracle(p, g));
    }
}

TEST(Dtssd, ZeroCases) {
    Rng rng(37);
    std::vector<Tensor> p = {make_matte(rng, 8, 8), make_matte(rng, 8, 8)};
    EXPECT_EQ(dtssd(p, p), 0.0);
    std::vector<Tensor> sp = {Tensor::full({1, 1, 8, 8}, 0.2f), Tensor::full({1, 1, 8, 8}, 0.2f)};
    std::vector<Tensor> sg = {Tensor::full({1, 1, 8, 8}, 0.9f), Tensor::full({1, 1, 8, 8}, 0.9f)};
    EXPECT_EQ(dtssd(sp, sg), 0.0);
}

TEST(Dtssd, TwoFrameHandOracle) {
    Rng rng(38);
    std::vector<Tensor> p = {make_matte(rng, 4, 4), make_matte(rng, 4, 4)};
    std::vector<Tensor> g = {make_matte(rng, 4, 4), make_matte(rng, 4, 4)};
    double sq = 0.0;
    for (std::size_t i = 0; i < 16; ++i) {
        const double d = (static_cast<double>(p[1].data()[i]) - p[0].data()[i]) -
                         (static_cast<double>(g[1].data()[i]) - g[0].data()[i]);
        sq += d * d;
    }
    EXPECT_NEAR(dtssd(p, g), std::sqrt(sq / 16.0) * 1e2, 1e-6);
}

TEST(Dtssd, RejectsShortSequences) {
    Rng rng(39);
    std::vector<Tensor> p = {make_matte(rng, 4, 4)};
    EXPECT_THROW(dtssd(p, p), std::invalid_argument);
}

TEST(Evaluate, SelfComparisonIsAllZero) {
    RefNetConfig rc;
    rc.seed = 91;
    RefNet net(rc);
    DatasetConfig dc;
    Rng root(777);
    std::vector<ClipData> clips;
    for (int i = 0; i < 2; ++i) {
        Rng r = root.fork(i);
        clips.push_back(render_clip(sample_clip_spec(r, 3, 64, 64, dc, static_cast<std::uint32_t>(i))));
    }
    // Replace ground truth with the model's own predictions.
    for (ClipData& c : clips) {
        ForwardCtx ctx{RunMode::Float, nullptr};
        RecurrentState st;
        for (int t = 0; t < c.frames; ++t) {
            Tensor a = net.forward_frame(clip_frame(c, t), st, ctx);
            const auto av = a.data();
            std::copy(av.begin(), av.end(),
                      c.alphas.begin() + static_cast<std::size_t>(t) * 64 * 64);
        }
    }
    MetricsReport rep = evaluate(net, clips, RunMode::Float, "fp", 32, 32);
    EXPECT_EQ(rep.aggregate.mad, 0.0);
    EXPECT_EQ(rep.aggregate.mse, 0.0);
    EXPECT_EQ(rep.aggregate.grad, 0.0);
    EXPECT_EQ(rep.aggregate.conn, 0.0);
    EXPECT_TRUE(rep.aggregate.has_dtssd);
    EXPECT_EQ(rep.aggregate.dtssd, 0.0);
    EXPECT_EQ(rep.total_frames, 6);
    EXPECT_EQ(rep.frame_errors.size(), 6u);
}

TEST(Evaluate, DeterministicReportsAndCsvSchema) {
    RefNetConfig rc;
    rc.seed = 92;
    RefNet net(rc);
    DatasetConfig dc;
    Rng root(778);
    std::vector<ClipData> clips;
    for (int i = 0; i < 2; ++i) {
        Rng r = root.fork(i);
        clips.push_back(render_clip(sample_clip_spec(r, 3, 64, 64, dc, static_cast<std::uint32_t>(i))));
    }
    MetricsReport a = evaluate(net, clips, RunMode::Float, "fp", 32, 32);
    MetricsReport b = evaluate(net, clips, RunMode::Float, "fp", 32, 32);
    EXPECT_EQ(metrics_csv(a), metrics_csv(b));
    EXPECT_EQ(frame_errors_csv(a), frame_errors_csv(b));

    const std::string csv = metrics_csv(a);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "method,w_bits,a_bits,clip_id,MAD,MSE,Grad,Conn,DTSSD");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);  // header + 2 clips + aggregate
    EXPECT_NE(csv.find("fp,32,32,aggregate,"), std::string::npos);

    // Aggregate equals the mean of per-clip values.
    EXPECT_DOUBLE_EQ(a.aggregate.mad, (a.clips[0].mad + a.clips[1].mad) / 2.0);
    EXPECT_DOUBLE_EQ(a.aggregate.dtssd, (a.clips[0].dtssd + a.clips[1].dtssd) / 2.0);

    const std::string fcsv = frame_errors_csv(a);
    EXPECT_EQ(fcsv.substr(0, fcsv.find('\n')), "method,w_bits,a_bits,clip_id,frame,alpha_err");
    EXPECT_EQ(std::count(fcsv.begin(), fcsv.end(), '\n'), 7);  // header + 6 frames
}
