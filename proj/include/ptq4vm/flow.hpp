// Optical-flow support for calibration: backward bilinear warping, the
// temporal alignment loss, a pyramidal Lucas-Kanade estimator, and a
// write-once flow cache with its file format.
//
// Flow convention everywhere: a field F stores the forward motion in pixels
// at each destination pixel, so warping samples the previous frame at
// (x - dx, y - dy). No gradient ever flows into F; it is a fixed prior.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ptq4vm/common.hpp"
#include "ptq4vm/io.hpp"
#include "ptq4vm/synthvid.hpp"
#include "ptq4vm/tensor.hpp"

namespace ptq4vm {

// Backward warp with border clamp. Differentiable w.r.t. src only; the value
// at each output pixel is a convex combination of src values, so any input
// range is preserved.
inline Tensor warp_bilinear(const Tensor& src, const Tensor& flow) {
    const Shape& ss = src.shape();
    const Shape& fs = flow.shape();
    require(ss.size() == 4 && fs.size() == 4, "warp expects 4-D tensors");
    require(fs[1] == 2, "flow must have 2 channels, got ", fs[1]);
    require(ss[0] == fs[0] && ss[2] == fs[2] && ss[3] == fs[3], "warp shape mismatch: src ",
            shape_str(ss), " vs flow ", shape_str(fs));
    const int N = ss[0], C = ss[1], H = ss[2], W = ss[3];
    const auto sv = src.data();
    const auto fv = flow.data();
    const std::size_t plane = static_cast<std::size_t>(H) * W;

    // Per-pixel taps: 4 corner indices + weights, reused by the backward pass.
    struct Tap {
        int i00, i01, i10, i11;
        float w00, w01, w10, w11;
    };
    std::vector<Tap> taps(static_cast<std::size_t>(N) * plane);
    for (int n = 0; n < N; ++n) {
        const float* fx = fv.data() + static_cast<std::size_t>(n) * 2 * plane;
        const float* fy = fx + plane;
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                const std::size_t pi = static_cast<std::size_t>(y) * W + x;
                float sx = static_cast<float>(x) - fx[pi];
                float sy = static_cast<float>(y) - fy[pi];
                sx = std::clamp(sx, 0.0f, static_cast<float>(W - 1));
                sy = std::clamp(sy, 0.0f, static_cast<float>(H - 1));
                const int x0 = static_cast<int>(sx);
                const int y0 = static_cast<int>(sy);
                const int x1 = std::min(x0 + 1, W - 1);
                const int y1 = std::min(y0 + 1, H - 1);
                const float wx = sx - static_cast<float>(x0);
                const float wy = sy - static_cast<float>(y0);
                Tap& t = taps[static_cast<std::size_t>(n) * plane + pi];
                t.i00 = y0 * W + x0;
                t.i01 = y0 * W + x1;
                t.i10 = y1 * W + x0;
                t.i11 = y1 * W + x1;
                t.w00 = (1 - wy) * (1 - wx);
                t.w01 = (1 - wy) * wx;
                t.w10 = wy * (1 - wx);
                t.w11 = wy * wx;
            }
        }
    }

    std::vector<float> out(sv.size());
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const float* sp = sv.data() + (static_cast<std::size_t>(n) * C + c) * plane;
            float* op = out.data() + (static_cast<std::size_t>(n) * C + c) * plane;
            const Tap* tp = taps.data() + static_cast<std::size_t>(n) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                const Tap& t = tp[i];
                op[i] = t.w00 * sp[t.i00] + t.w01 * sp[t.i01] + t.w10 * sp[t.i10] +
                        t.w11 * sp[t.i11];
            }
        }
    }

    // flow is deliberately not a graph input: it is a constant prior, and the
    // taps above already hold everything the backward pass needs.
    auto src_node = src.node();
    return detail::make_op(ss, std::move(out), {src},
                           [src_node, taps = std::move(taps), N, C, plane](Node& self) {
                               if (!src_node->grad_path) return;
                               src_node->ensure_grad();
                               auto& sg = src_node->grad;
                               const auto& g = self.grad;
                               for (int n = 0; n < N; ++n) {
                                   for (int c = 0; c < C; ++c) {
                                       const std::size_t base =
                                           (static_cast<std::size_t>(n) * C + c) * plane;
                                       const Tap* tp = taps.data() +
                                                       static_cast<std::size_t>(n) * plane;
                                       for (std::size_t i = 0; i < plane; ++i) {
                                           const Tap& t = tp[i];
                                           const float gv = g[base + i];
                                           if (gv == 0.0f) continue;
                                           sg[base + t.i00] += t.w00 * gv;
                                           sg[base + t.i01] += t.w01 * gv;
                                           sg[base + t.i10] += t.w10 * gv;
                                           sg[base + t.i11] += t.w11 * gv;
                                       }
                                   }
                               }
                           });
}

// Temporal alignment loss: per-pixel mean absolute difference between the
// current prediction and the motion-compensated previous one.
inline Tensor ofa_loss(const Tensor& alpha_t, const Tensor& warped) {
    return l1_loss(alpha_t, warped);
}

// ---- pyramidal Lucas-Kanade ----

namespace lk_detail {

inline std::vector<float> to_gray(const Tensor& frame) {
    const Shape& s = frame.shape();
    require(s.size() == 4 && s[0] == 1 && (s[1] == 1 || s[1] == 3),
            "flow estimation expects {1,1|3,H,W}, got ", shape_str(s));
    const std::size_t plane = static_cast<std::size_t>(s[2]) * s[3];
    const auto v = frame.data();
    std::vector<float> g(plane);
    if (s[1] == 1) {
        std::copy(v.begin(), v.end(), g.begin());
    } else {
        for (std::size_t i = 0; i < plane; ++i)
            g[i] = (v[i] + v[plane + i] + v[2 * plane + i]) / 3.0f;
    }
    return g;
}

inline std::vector<float> downsample2(const std::vector<float>& src, int h, int w, int& oh,
                                      int& ow) {
    oh = h / 2;
    ow = w / 2;
    std::vector<float> out(static_cast<std::size_t>(oh) * ow);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x)
            out[static_cast<std::size_t>(y) * ow + x] =
                0.25f * (src[static_cast<std::size_t>(2 * y) * w + 2 * x] +
                         src[static_cast<std::size_t>(2 * y) * w + 2 * x + 1] +
                         src[static_cast<std::size_t>(2 * y + 1) * w + 2 * x] +
                         src[static_cast<std::size_t>(2 * y + 1) * w + 2 * x + 1]);
    return out;
}

inline float sample_clamped(const std::vector<float>& img, int h, int w, float x, float y) {
    x = std::clamp(x, 0.0f, static_cast<float>(w - 1));
    y = std::clamp(y, 0.0f, static_cast<float>(h - 1));
    const int x0 = static_cast<int>(x), y0 = static_cast<int>(y);
    const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
    const float wx = x - static_cast<float>(x0), wy = y - static_cast<float>(y0);
    const float a = img[static_cast<std::size_t>(y0) * w + x0];
    const float b = img[static_cast<std::size_t>(y0) * w + x1];
    const float c = img[static_cast<std::size_t>(y1) * w + x0];
    const float d = img[static_cast<std::size_t>(y1) * w + x1];
    return (1 - wy) * ((1 - wx) * a + wx * b) + wy * ((1 - wx) * c + wx * d);
}

}  // namespace lk_detail

// Dense pyramidal Lucas-Kanade. Estimates the forward motion between
// frame_prev and frame_cur and returns it in the warp convention above
// (source = p - F). Local systems whose minimum eigenvalue falls below the
// degeneracy threshold produce zero flow at that pixel.
inline Tensor estimate_flow_lk(const Tensor& frame_prev, const Tensor& frame_cur, int window = 7,
                               int pyramid = 3) {
    using namespace lk_detail;
    require(window >= 3 && window % 2 == 1, "window must be odd and >= 3, got ", window);
    require(pyramid >= 1 && pyramid <= 6, "pyramid levels must be in [1,6], got ", pyramid);
    require(frame_prev.shape() == frame_cur.shape(), "frame shape mismatch");
    const int H = frame_prev.shape()[2], W = frame_prev.shape()[3];
    require(H >= (1 << (pyramid - 1)) * 4 && W >= (1 << (pyramid - 1)) * 4,
            "frames too small for ", pyramid, " pyramid levels");

    constexpr int kItersPerLevel = 5;
    constexpr float kMinEig = 1e-6f;  // normalized by window area

    std::vector<std::vector<float>> pa, pb;  // a = cur (reference), b = prev (search)
    std::vector<int> hs{H}, ws{W};
    pa.push_back(to_gray(frame_cur));
    pb.push_back(to_gray(frame_prev));
    for (int l = 1; l < pyramid; ++l) {
        int oh = 0, ow = 0;
        pa.push_back(downsample2(pa[l - 1], hs[l - 1], ws[l - 1], oh, ow));
        pb.push_back(downsample2(pb[l - 1], hs[l - 1], ws[l - 1], oh, ow));
        hs.push_back(oh);
        ws.push_back(ow);
    }

    const int r = window / 2;
    std::vector<float> u, v;  // displacement d: source = p + d in prev frame
    for (int l = pyramid - 1; l >= 0; --l) {
        const int h = hs[l], w = ws[l];
        const std::size_t plane = static_cast<std::size_t>(h) * w;
        const auto& A = pa[l];
        const auto& B = pb[l];

        // Upsample the coarser estimate (nearest neighbor, doubled).
        std::vector<float> nu(plane, 0.0f), nv(plane, 0.0f);
        if (!u.empty()) {
            const int ch = hs[l + 1], cw = ws[l + 1];
            for (int y = 0; y < h; ++y) {
                const int cy = std::min(y / 2, ch - 1);
                for (int x = 0; x < w; ++x) {
                    const int cx = std::min(x / 2, cw - 1);
                    nu[static_cast<std::size_t>(y) * w + x] =
                        2.0f * u[static_cast<std::size_t>(cy) * cw + cx];
                    nv[static_cast<std::size_t>(y) * w + x] =
                        2.0f * v[static_cast<std::size_t>(cy) * cw + cx];
                }
            }
        }

        // Reference gradients (central differences, replicated borders).
        std::vector<float> ix(plane), iy(plane);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const int xm = std::max(x - 1, 0), xp = std::min(x + 1, w - 1);
                const int ym = std::max(y - 1, 0), yp = std::min(y + 1, h - 1);
                ix[static_cast<std::size_t>(y) * w + x] =
                    0.5f * (A[static_cast<std::size_t>(y) * w + xp] -
                            A[static_cast<std::size_t>(y) * w + xm]);
                iy[static_cast<std::size_t>(y) * w + x] =
                    0.5f * (A[static_cast<std::size_t>(yp) * w + x] -
                            A[static_cast<std::size_t>(ym) * w + x]);
            }
        }

        // Structure tensor per pixel, its inverse, and the degeneracy flag.
        std::vector<float> gi00(plane), gi01(plane), gi11(plane);
        std::vector<std::uint8_t> ok(plane);
        const float area = static_cast<float>(window) * window;
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                double gxx = 0, gxy = 0, gyy = 0;
                for (int dy = -r; dy <= r; ++dy) {
                    const int qy = std::clamp(y + dy, 0, h - 1);
                    for (int dx = -r; dx <= r; ++dx) {
                        const int qx = std::clamp(x + dx, 0, w - 1);
                        const float gx = ix[static_cast<std::size_t>(qy) * w + qx];
                        const float gy = iy[static_cast<std::size_t>(qy) * w + qx];
                        gxx += gx * gx;
                        gxy += gx * gy;
                        gyy += gy * gy;
                    }
                }
                const double tr = gxx + gyy;
                const double det = gxx * gyy - gxy * gxy;
                const double disc = std::sqrt(std::max(0.0, tr * tr - 4 * det));
                const double lmin = 0.5 * (tr - disc);
                const std::size_t pi = static_cast<std::size_t>(y) * w + x;
                if (lmin / area < kMinEig) {
                    ok[pi] = 0;
                    continue;
                }
                ok[pi] = 1;
                const double inv_det = 1.0 / det;
                gi00[pi] = static_cast<float>(gyy * inv_det);
                gi01[pi] = static_cast<float>(-gxy * inv_det);
                gi11[pi] = static_cast<float>(gxx * inv_det);
            }
        }

        u.assign(plane, 0.0f);
        v.assign(plane, 0.0f);
        const float max_disp = static_cast<float>(std::max(h, w));
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const std::size_t pi = static_cast<std::size_t>(y) * w + x;
                if (!ok[pi]) continue;  // degenerate: flow stays zero
                float du = nu[pi], dv = nv[pi];
                for (int it = 0; it < kItersPerLevel; ++it) {
                    double bx = 0, by = 0;
                    for (int dy = -r; dy <= r; ++dy) {
                        const int qy = std::clamp(y + dy, 0, h - 1);
                        for (int dx = -r; dx <= r; ++dx) {
                            const int qx = std::clamp(x + dx, 0, w - 1);
                            const std::size_t qi = static_cast<std::size_t>(qy) * w + qx;
                            const float e =
                                A[qi] - sample_clamped(B, h, w, static_cast<float>(qx) + du,
                                                       static_cast<float>(qy) + dv);
                            bx += ix[qi] * e;
                            by += iy[qi] * e;
                        }
                    }
                    du += gi00[pi] * static_cast<float>(bx) + gi01[pi] * static_cast<float>(by);
                    dv += gi01[pi] * static_cast<float>(bx) + gi11[pi] * static_cast<float>(by);
                }
                u[pi] = std::clamp(du, -max_disp, max_disp);
                v[pi] = std::clamp(dv, -max_disp, max_disp);
            }
        }
    }

    // d points from the current pixel into the previous frame; the stored
    // field is forward motion, F = -d.
    std::vector<float> field(2 * static_cast<std::size_t>(H) * W);
    for (std::size_t i = 0; i < static_cast<std::size_t>(H) * W; ++i) {
        field[i] = -u[i];
        field[static_cast<std::size_t>(H) * W + i] = -v[i];
    }
    return Tensor::from_data({1, 2, H, W}, field);
}

// ---- flow cache ----

enum class FlowSource : std::uint8_t { GroundTruth = 0, Lk = 1 };

inline const char* flow_source_name(FlowSource s) {
    return s == FlowSource::GroundTruth ? "ground-truth" : "lk";
}

// Write-once store of per-clip flow fields (frames 1..T-1). Reads are counted
// so calibration can prove it never recomputes flow.
struct FlowCache {
    FlowSource source = FlowSource::GroundTruth;

    struct Entry {
        int fields = 0;  // T-1
        int height = 0;
        int width = 0;
        std::vector<float> data;  // fields * 2 * H * W
    };
    std::map<std::uint32_t, Entry> entries;
    mutable std::int64_t hits = 0;

    bool has(std::uint32_t clip_id) const { return entries.count(clip_id) != 0; }

    // Flow F_{t-1 -> t} for frame t >= 1 of a cached clip.
    Tensor flow(std::uint32_t clip_id, int t) const {
        auto it = entries.find(clip_id);
        require(it != entries.end(), "clip ", clip_id, " not in flow cache");
        const Entry& e = it->second;
        require(t >= 1 && t <= e.fields, "frame ", t, " outside cached range [1,", e.fields, "]");
        const std::size_t plane2 = 2ull * e.height * e.width;
        auto b = e.data.begin() + static_cast<std::ptrdiff_t>((t - 1) * plane2);
        ++hits;
        return Tensor::from_data({1, 2, e.height, e.width},
                                 std::vector<float>(b, b + static_cast<std::ptrdiff_t>(plane2)));
    }
};

namespace flow_detail {

inline void validate_fields(const std::vector<float>& data, int h, int w, std::uint32_t clip_id) {
    const float bound = static_cast<float>(std::max(h, w));
    for (float f : data)
        check(std::isfinite(f) && std::abs(f) <= bound, "implausible flow value ", f, " in clip ",
              clip_id);
}

}  // namespace flow_detail

inline FlowCache build_flow_cache(const std::vector<ClipData>& clips, FlowSource source) {
    FlowCache cache;
    cache.source = source;
    for (const auto& c : clips) {
        require(c.frames >= 2, "clip ", c.clip_id, " too short for flow");
        FlowCache::Entry e;
        e.fields = c.frames - 1;
        e.height = c.height;
        e.width = c.width;
        const std::size_t plane2 = 2ull * c.height * c.width;
        if (source == FlowSource::GroundTruth) {
            e.data.assign(c.flows.begin() + static_cast<std::ptrdiff_t>(c.flow_offset(1)),
                          c.flows.end());
        } else {
            e.data.reserve(static_cast<std::size_t>(e.fields) * plane2);
            for (int t = 1; t < c.frames; ++t) {
                Tensor f = estimate_flow_lk(clip_frame(c, t - 1), clip_frame(c, t));
                auto fv = f.data();
                e.data.insert(e.data.end(), fv.begin(), fv.end());
            }
        }
        flow_detail::validate_fields(e.data, e.height, e.width, c.clip_id);
        cache.entries[c.clip_id] = std::move(e);
    }
    return cache;
}

// ---- flow cache file format ----
// Per clip: magic "PTQ4VMFL", version u16, clip id u32, T-1 u32, H u32,
// W u32, then raw little-endian f32 flow planes, then one provenance byte.

inline constexpr const char* kFlowMagic = "PTQ4VMFL";
inline constexpr std::uint16_t kFlowVersion = 1;

inline std::string flow_cache_path(const std::string& dir, std::uint32_t clip_id) {
    return cat(dir, "/flow_", clip_id / 1000 % 10, clip_id / 100 % 10, clip_id / 10 % 10,
               clip_id % 10, ".flow");
}

inline void save_flow_cache(const std::string& dir, const FlowCache& cache) {
    std::filesystem::create_directories(dir);
    for (const auto& [clip_id, e] : cache.entries) {
        auto os = io::open_out(flow_cache_path(dir, clip_id));
        io::write_magic(os, kFlowMagic);
        io::write_pod(os, kFlowVersion);
        io::write_u32(os, clip_id);
        io::write_u32(os, static_cast<std::uint32_t>(e.fields));
        io::write_u32(os, static_cast<std::uint32_t>(e.height));
        io::write_u32(os, static_cast<std::uint32_t>(e.width));
        io::write_bytes(os, e.data.data(), e.data.size() * sizeof(float));
        io::write_pod(os, static_cast<std::uint8_t>(cache.source));
        check(os.good(), "failed writing flow cache for clip ", clip_id);
    }
}

inline FlowCache load_flow_cache(const std::string& dir, const std::vector<std::uint32_t>& ids) {
    FlowCache cache;
    bool first = true;
    for (std::uint32_t clip_id : ids) {
        auto is = io::open_in(flow_cache_path(dir, clip_id));
        io::expect_magic(is, kFlowMagic, "flow cache");
        const auto ver = io::read_pod<std::uint16_t>(is);
        check(ver == kFlowVersion, "unsupported flow cache version ", ver);
        const std::uint32_t file_id = io::read_u32(is);
        check(file_id == clip_id, "flow cache id mismatch: file says ", file_id, ", expected ",
              clip_id);
        FlowCache::Entry e;
        e.fields = static_cast<int>(io::read_u32(is));
        e.height = static_cast<int>(io::read_u32(is));
        e.width = static_cast<int>(io::read_u32(is));
        check(e.fields >= 1 && e.fields <= 10000 && e.height >= 1 && e.height <= 4096 &&
                  e.width >= 1 && e.width <= 4096,
              "implausible flow cache geometry for clip ", clip_id);
        e.data.resize(static_cast<std::size_t>(e.fields) * 2 * e.height * e.width);
        io::read_bytes(is, e.data.data(), e.data.size() * sizeof(float));
        const auto prov = io::read_pod<std::uint8_t>(is);
        check(prov <= 1, "unknown flow provenance ", static_cast<int>(prov));
        const auto src = static_cast<FlowSource>(prov);
        check(first || src == cache.source, "mixed flow provenance in ", dir);
        cache.source = src;
        first = false;
        flow_detail::validate_fields(e.data, e.height, e.width, clip_id);
        cache.entries[clip_id] = std::move(e);
    }
    return cache;
}

}  // namespace ptq4vm
