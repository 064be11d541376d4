#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "ptq4vm/flow.hpp"

using namespace ptq4vm;

namespace {

Tensor randu(Rng& rng, Shape s, float lo = 0.0f, float hi = 1.0f) {
    std::vector<float> v(shape_numel(s));
    for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
    return Tensor::from_data(std::move(s), std::move(v));
}

Tensor const_flow(int h, int w, float dx, float dy) {
    std::vector<float> f(static_cast<std::size_t>(2) * h * w);
    for (int i = 0; i < h * w; ++i) {
        f[i] = dx;
        f[static_cast<std::size_t>(h) * w + i] = dy;
    }
    return Tensor::from_data({1, 2, h, w}, f);
}

// Smooth random texture: random field box-blurred a few times so LK has
// well-conditioned gradients everywhere.
std::vector<float> smooth_texture(Rng& rng, int h, int w) {
    std::vector<float> img(static_cast<std::size_t>(h) * w);
    for (auto& v : img) v = static_cast<float>(rng.uniform());
    for (int pass = 0; pass < 3; ++pass) {
        std::vector<float> out(img.size());
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                float s = 0;
                int cnt = 0;
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int qy = y + dy, qx = x + dx;
                        if (qy < 0 || qy >= h || qx < 0 || qx >= w) continue;
                        s += img[static_cast<std::size_t>(qy) * w + qx];
                        ++cnt;
                    }
                }
                out[static_cast<std::size_t>(y) * w + x] = s / static_cast<float>(cnt);
            }
        }
        img.swap(out);
    }
    return img;
}

}  // namespace

TEST(Warp, ZeroFlowIsIdentity) {
    Rng rng(1);
    Tensor x = randu(rng, {2, 3, 8, 10});
    Tensor out = warp_bilinear(x, Tensor::zeros({2, 2, 8, 10}));
    auto a = x.data(), b = out.data();
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Warp, ConstantMapSurvivesAnyFlow) {
    Rng rng(2);
    Tensor x = Tensor::full({1, 1, 9, 9}, 0.37f);
    Tensor f = randu(rng, {1, 2, 9, 9}, -5.0f, 5.0f);
    Tensor out = warp_bilinear(x, f);
    auto ov = out.data();
    for (float v : ov) EXPECT_FLOAT_EQ(v, 0.37f);
}

TEST(Warp, IntegerTranslationIsExactOnInterior) {
    Rng rng(3);
    Tensor x = randu(rng, {1, 1, 10, 12});
    Tensor out = warp_bilinear(x, const_flow(10, 12, 1.0f, 0.0f));
    auto xv = x.data(), ov = out.data();
    // out(y,x) = src(y, x-1) wherever the source is in bounds.
    for (int y = 0; y < 10; ++y)
        for (int x2 = 1; x2 < 12; ++x2)
            EXPECT_EQ(ov[static_cast<std::size_t>(y) * 12 + x2],
                      xv[static_cast<std::size_t>(y) * 12 + x2 - 1]);
    // Border clamp: column 0 samples its own clamped position.
    for (int y = 0; y < 10; ++y)
        EXPECT_EQ(ov[static_cast<std::size_t>(y) * 12], xv[static_cast<std::size_t>(y) * 12]);
}

TEST(Warp, OutputStaysInUnitRange) {
    Rng rng(4);
    Tensor x = randu(rng, {1, 1, 16, 16});
    Tensor f = randu(rng, {1, 2, 16, 16}, -30.0f, 30.0f);
    Tensor out = warp_bilinear(x, f);
    auto ov = out.data();
    for (float v : ov) {
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
    }
}

TEST(Warp, GradientMatchesFiniteDifferences) {
    Rng rng(5);
    Tensor x = randu(rng, {1, 2, 6, 7});
    x.set_requires_grad(true);
    Tensor f = randu(rng, {1, 2, 6, 7}, -1.5f, 1.5f);
    Tensor w0 = randu(rng, {1, 2, 6, 7});

    Tape tape;
    Tensor loss = mse_loss(warp_bilinear(x, f), w0);
    tape.backward(loss);
    auto ana = x.grad();

    const float h = 1e-3f;
    auto xm = x.mutable_data();
    for (std::size_t i = 0; i < xm.size(); i += 5) {
        const float keep = xm[i];
        xm[i] = keep + h;
        const double lp = mse_loss(warp_bilinear(x, f), w0).item();
        xm[i] = keep - h;
        const double lm = mse_loss(warp_bilinear(x, f), w0).item();
        xm[i] = keep;
        const double num = (lp - lm) / (2.0 * h);
        EXPECT_NEAR(ana[i], num, 1e-3 * std::max({1.0, std::abs(num), static_cast<double>(std::abs(ana[i]))}))
            << "element " << i;
    }
}

TEST(Warp, NoGradientFlowsIntoFlowField) {
    Rng rng(6);
    Tensor x = randu(rng, {1, 1, 6, 6});
    x.set_requires_grad(true);
    Tensor f = randu(rng, {1, 2, 6, 6}, -1.0f, 1.0f);
    f.set_requires_grad(true);
    Tape tape;
    Tensor loss = mse_loss(warp_bilinear(x, f), Tensor::zeros({1, 1, 6, 6}));
    tape.backward(loss);
    // src got a gradient; the flow field never does, even when marked.
    bool any_src = false;
    auto xg = x.grad();
    for (float g : xg)
        if (g != 0.0f) any_src = true;
    EXPECT_TRUE(any_src);
    EXPECT_THROW(f.grad(), std::runtime_error);
}

TEST(OfaLoss, ValuesMatchBruteForce) {
    EXPECT_EQ(ofa_loss(Tensor::full({1, 1, 4, 4}, 0.6f), Tensor::full({1, 1, 4, 4}, 0.6f)).item(),
              0.0f);
    EXPECT_FLOAT_EQ(
        ofa_loss(Tensor::full({1, 1, 4, 4}, 1.0f), Tensor::zeros({1, 1, 4, 4})).item(), 1.0f);
    Rng rng(7);
    Tensor a = randu(rng, {1, 1, 5, 9});
    Tensor b = randu(rng, {1, 1, 5, 9});
    double want = 0;
    auto av = a.data(), bv = b.data();
    for (std::size_t i = 0; i < av.size(); ++i) want += std::abs(av[i] - bv[i]);
    want /= static_cast<double>(av.size());
    EXPECT_NEAR(ofa_loss(a, b).item(), want, 1e-6);
}

TEST(OfaLoss, ZeroOnSelfWarpWithZeroFlow) {
    Rng rng(8);
    Tensor a = randu(rng, {1, 1, 8, 8});
    EXPECT_EQ(ofa_loss(a, warp_bilinear(a, Tensor::zeros({1, 2, 8, 8}))).item(), 0.0f);
}

TEST(OfaLoss, GradientMatchesFiniteDifferences) {
    Rng rng(9);
    Tensor a = randu(rng, {1, 1, 6, 6});
    Tensor b = randu(rng, {1, 1, 6, 6});
    a.set_requires_grad(true);
    Tape tape;
    Tensor loss = ofa_loss(a, b);
    tape.backward(loss);
    auto ana = a.grad();
    const float h = 1e-3f;
    auto am = a.mutable_data();
    for (std::size_t i = 0; i < am.size(); i += 3) {
        const float keep = am[i];
        am[i] = keep + h;
        const double lp = ofa_loss(a, b).item();
        am[i] = keep - h;
        const double lm = ofa_loss(a, b).item();
        am[i] = keep;
        const double num = (lp - lm) / (2.0 * h);
        EXPECT_NEAR(ana[i], num, 1e-4 * std::max({1.0, std::abs(num), static_cast<double>(std::abs(ana[i]))}));
    }
}

TEST(Flow, GroundTruthConsistencyOnSyntheticClips) {
    DatasetConfig cfg;
    cfg.calib_clips = 4;
    cfg.eval_clips = 1;
    Rng root(cfg.seed);
    double worst = 0;
    for (int i = 0; i < cfg.calib_clips; ++i) {
        Rng r = root.fork(mix_seed(fnv1a64("calib"), static_cast<std::uint64_t>(i)));
        ClipSpec spec = sample_clip_spec(r, 8, 64, 64, cfg, static_cast<std::uint32_t>(i));
        ClipData c = render_clip(spec);
        for (int t = 1; t < c.frames; ++t) {
            Tensor warped = warp_bilinear(clip_alpha(c, t - 1), clip_flow(c, t));
            const double err = ofa_loss(clip_alpha(c, t), warped).item();
            worst = std::max(worst, err);
        }
    }
    EXPECT_LE(worst, 0.02);
}

TEST(Lk, IdenticalFramesGiveZeroFlow) {
    Rng rng(11);
    std::vector<float> tex = smooth_texture(rng, 32, 32);
    Tensor f = Tensor::from_data({1, 1, 32, 32}, tex);
    Tensor flow = estimate_flow_lk(f, f);
    for (float v : flow.data()) EXPECT_NEAR(v, 0.0f, 1e-4f);
}

TEST(Lk, FlatFramesAreDegenerateAndZero) {
    Tensor a = Tensor::full({1, 3, 32, 32}, 0.5f);
    Tensor b = Tensor::full({1, 3, 32, 32}, 0.5f);
    Tensor flow = estimate_flow_lk(a, b);
    for (float v : flow.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Lk, TranslatedTextureRecoveredWithinHalfPixel) {
    Rng rng(13);
    const int H = 48, W = 48;
    std::vector<float> big = smooth_texture(rng, H, W + 8);
    // cur(y,x) = prev(y, x-2): texture moves +2 px in x.
    std::vector<float> prev(static_cast<std::size_t>(H) * W), cur(prev.size());
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            prev[static_cast<std::size_t>(y) * W + x] = big[static_cast<std::size_t>(y) * (W + 8) + x + 4];
            cur[static_cast<std::size_t>(y) * W + x] = big[static_cast<std::size_t>(y) * (W + 8) + x + 2];
        }
    }
    Tensor flow = estimate_flow_lk(Tensor::from_data({1, 1, H, W}, prev),
                                   Tensor::from_data({1, 1, H, W}, cur));
    auto fv = flow.data();
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    double epe = 0;
    int cnt = 0;
    for (int y = 8; y < H - 8; ++y) {
        for (int x = 8; x < W - 8; ++x) {
            const std::size_t pi = static_cast<std::size_t>(y) * W + x;
            const double ex = fv[pi] - 2.0, ey = fv[plane + pi];
            epe += std::sqrt(ex * ex + ey * ey);
            ++cnt;
        }
    }
    EXPECT_LE(epe / cnt, 0.5);
}

TEST(FlowCache, GroundTruthCacheIsBitEqualToClipPlanes) {
    DatasetConfig cfg;
    Rng root(42);
    ClipSpec spec = random_clip_spec(root, 6, 32, 32, cfg, 5);
    ClipData c = render_clip(spec);
    c.clip_id = 5;
    FlowCache cache = build_flow_cache({c}, FlowSource::GroundTruth);
    const auto& e = cache.entries.at(5);
    EXPECT_EQ(e.fields, 5);
    for (int t = 1; t < c.frames; ++t) {
        Tensor cached = cache.flow(5, t);
        Tensor direct = clip_flow(c, t);
        auto a = cached.data(), b = direct.data();
        for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
    }
    EXPECT_EQ(cache.hits, c.frames - 1);
}

TEST(FlowCache, FileRoundTripPreservesEverything) {
    DatasetConfig cfg;
    Rng root(43);
    ClipSpec spec = random_clip_spec(root, 4, 32, 32, cfg, 7);
    ClipData c = render_clip(spec);
    c.clip_id = 7;
    FlowCache cache = build_flow_cache({c}, FlowSource::GroundTruth);
    const std::string dir = "flow_cache_test";
    save_flow_cache(dir, cache);
    FlowCache loaded = load_flow_cache(dir, {7});
    EXPECT_EQ(loaded.source, FlowSource::GroundTruth);
    EXPECT_EQ(loaded.entries.at(7).data, cache.entries.at(7).data);
    EXPECT_EQ(loaded.hits, 0);
    EXPECT_THROW(load_flow_cache(dir, {9}), std::runtime_error);
    std::filesystem::remove_all(dir);
}

TEST(FlowCache, LkSourceProducesPlausibleSpriteMotion) {
    DatasetConfig cfg;
    Rng root(44);
    ClipSpec spec = random_clip_spec(root, 3, 48, 48, cfg, 1);
    ClipData c = render_clip(spec);
    c.clip_id = 1;
    FlowCache cache = build_flow_cache({c}, FlowSource::Lk);
    EXPECT_EQ(cache.source, FlowSource::Lk);
    // The estimate need not match ground truth pointwise, but it must put
    // nonzero motion somewhere on a moving-sprite clip.
    double mass = 0;
    for (float v : cache.entries.at(1).data) mass += std::abs(v);
    EXPECT_GT(mass, 1.0);
}
