#pragma once

// Neural-net ops on top of the tensor core: direct 2-D convolution (dense and
// depthwise), bilinear upsampling (align_corners=false), and Adam.

#include <cmath>
#include <memory>
#include <vector>

#include "ptq4vm/tensor.hpp"

namespace ptq4vm {

namespace detail {

inline int ceil_div_pos(int a, int b) {  // b > 0, any a
    return a > 0 ? (a + b - 1) / b : a / b;
}

// [plane][pos] -> [pos][plane] for a contiguous block of `planes` rows of
// `len` values each.
inline void transpose_to(const float* src, float* dst, int planes, int len) {
    for (int p = 0; p < planes; ++p) {
        const float* row = src + static_cast<int64_t>(p) * len;
        for (int i = 0; i < len; ++i)
            dst[static_cast<int64_t>(i) * planes + p] = row[i];
    }
}

inline int floor_div_pos(int a, int b) {  // b > 0, any a
    return a >= 0 ? a / b : -((-a + b - 1) / b);
}

// Output index range [o0, o1) for which i = o*stride + k - pad lies in
// [0, in_limit).
struct OutRange {
    int lo, hi;
};

inline OutRange conv_out_range(int in_limit, int k, int pad, int stride,
                               int out_limit) {
    int lo = std::max(0, ceil_div_pos(pad - k, stride));
    int hi = std::min(out_limit, floor_div_pos(in_limit - 1 - k + pad, stride) + 1);
    if (hi < lo) hi = lo;
    return {lo, hi};
}

// w[oc][ic][ky][kx] -> wT[(ic,ky,kx)][oc].
inline void transpose_weights(const float* w, float* wT, int co, int taps) {
    for (int oc = 0; oc < co; ++oc)
        for (int t = 0; t < taps; ++t)
            wT[static_cast<int64_t>(t) * co + oc] =
                w[static_cast<int64_t>(oc) * taps + t];
}

inline std::vector<float>& kernel_scratch(int which, size_t n) {
    thread_local std::vector<float> bufs[3];
    auto& b = bufs[which];
    if (b.size() < n) b.resize(n);
    return b;
}

// Feature planes this small make the row loops below degenerate; these
// variants keep output channels innermost instead.
constexpr int kSmallPlaneWidth = 16;

// y[oc] += sum_ic w[oc,ic,:,:] * x[ic,:,:], accumulating into a
// bias-initialized output. All planes row-major contiguous.
inline void conv2d_forward_kernel(const float* x, const float* w,
                                  const float* bias, float* y, int n, int ci,
                                  int h, int wdt, int co, int kh, int kw,
                                  int stride, int pad, int ho, int wo) {
    const int64_t in_plane = static_cast<int64_t>(h) * wdt;
    const int64_t out_plane = static_cast<int64_t>(ho) * wo;
    if (wo < kSmallPlaneWidth && co >= 8) {
        // Transposed path: yT[pos][oc] accumulates oc-contiguous updates.
        const int taps = ci * kh * kw;
        float* wT = kernel_scratch(0, static_cast<size_t>(taps) * co).data();
        transpose_weights(w, wT, co, taps);
        float* yT = kernel_scratch(1, static_cast<size_t>(out_plane) * co).data();
        for (int img = 0; img < n; ++img) {
            for (int64_t pos = 0; pos < out_plane; ++pos)
                for (int oc = 0; oc < co; ++oc)
                    yT[pos * co + oc] = bias ? bias[oc] : 0.0f;
            for (int ic = 0; ic < ci; ++ic) {
                const float* xp =
                    x + (static_cast<int64_t>(img) * ci + ic) * in_plane;
                for (int ky = 0; ky < kh; ++ky) {
                    OutRange ry = conv_out_range(h, ky, pad, stride, ho);
                    for (int kx = 0; kx < kw; ++kx) {
                        OutRange rx = conv_out_range(wdt, kx, pad, stride, wo);
                        int len = rx.hi - rx.lo;
                        const float* wrow =
                            wT + (static_cast<int64_t>(ic) * kh * kw +
                                  ky * kw + kx) * co;
                        for (int oy = ry.lo; oy < ry.hi; ++oy) {
                            const float* xrow = xp +
                                static_cast<int64_t>(oy * stride + ky - pad) * wdt +
                                (rx.lo * stride + kx - pad);
                            float* yrow =
                                yT + (static_cast<int64_t>(oy) * wo + rx.lo) * co;
                            for (int i = 0; i < len; ++i) {
                                float xv = xrow[static_cast<int64_t>(i) * stride];
                                float* yq = yrow + static_cast<int64_t>(i) * co;
#pragma omp simd
                                for (int oc = 0; oc < co; ++oc)
                                    yq[oc] += xv * wrow[oc];
                            }
                        }
                    }
                }
            }
            float* yp = y + static_cast<int64_t>(img) * co * out_plane;
            for (int64_t pos = 0; pos < out_plane; ++pos)
                for (int oc = 0; oc < co; ++oc)
                    yp[static_cast<int64_t>(oc) * out_plane + pos] =
                        yT[pos * co + oc];
        }
        return;
    }
    for (int img = 0; img < n; ++img) {
        for (int oc = 0; oc < co; ++oc) {
            float* yp = y + (static_cast<int64_t>(img) * co + oc) * out_plane;
            float bv = bias ? bias[oc] : 0.0f;
            for (int64_t i = 0; i < out_plane; ++i) yp[i] = bv;
            for (int ic = 0; ic < ci; ++ic) {
                const float* xp =
                    x + (static_cast<int64_t>(img) * ci + ic) * in_plane;
                const float* wp =
                    w + ((static_cast<int64_t>(oc) * ci + ic) * kh) * kw;
                for (int ky = 0; ky < kh; ++ky) {
                    OutRange ry = conv_out_range(h, ky, pad, stride, ho);
                    for (int kx = 0; kx < kw; ++kx) {
                        float wv = wp[ky * kw + kx];
                        if (wv == 0.0f) continue;
                        OutRange rx = conv_out_range(wdt, kx, pad, stride, wo);
                        int len = rx.hi - rx.lo;
                        for (int oy = ry.lo; oy < ry.hi; ++oy) {
                            const float* xrow = xp +
                                static_cast<int64_t>(oy * stride + ky - pad) * wdt +
                                (rx.lo * stride + kx - pad);
                            float* yrow = yp + static_cast<int64_t>(oy) * wo + rx.lo;
                            if (stride == 1) {
                                for (int i = 0; i < len; ++i)
                                    yrow[i] += wv * xrow[i];
                            } else {
                                for (int i = 0; i < len; ++i)
                                    yrow[i] += wv * xrow[static_cast<int64_t>(i) * stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

// dx += conv-transpose of dy with w.
inline void conv2d_backward_input_kernel(const float* dy, const float* w,
                                         float* dx, int n, int ci, int h,
                                         int wdt, int co, int kh, int kw,
                                         int stride, int pad, int ho, int wo) {
    const int64_t in_plane = static_cast<int64_t>(h) * wdt;
    const int64_t out_plane = static_cast<int64_t>(ho) * wo;
    if (wo < kSmallPlaneWidth && co >= 8) {
        const int taps = ci * kh * kw;
        float* wT = kernel_scratch(0, static_cast<size_t>(taps) * co).data();
        transpose_weights(w, wT, co, taps);
        float* dyT = kernel_scratch(1, static_cast<size_t>(out_plane) * co).data();
        for (int img = 0; img < n; ++img) {
            transpose_to(dy + static_cast<int64_t>(img) * co * out_plane, dyT,
                         co, static_cast<int>(out_plane));
            for (int ic = 0; ic < ci; ++ic) {
                float* dxp =
                    dx + (static_cast<int64_t>(img) * ci + ic) * in_plane;
                for (int ky = 0; ky < kh; ++ky) {
                    OutRange ry = conv_out_range(h, ky, pad, stride, ho);
                    for (int kx = 0; kx < kw; ++kx) {
                        OutRange rx = conv_out_range(wdt, kx, pad, stride, wo);
                        int len = rx.hi - rx.lo;
                        const float* wrow =
                            wT + (static_cast<int64_t>(ic) * kh * kw +
                                  ky * kw + kx) * co;
                        for (int oy = ry.lo; oy < ry.hi; ++oy) {
                            float* dxrow = dxp +
                                static_cast<int64_t>(oy * stride + ky - pad) * wdt +
                                (rx.lo * stride + kx - pad);
                            const float* grow =
                                dyT + (static_cast<int64_t>(oy) * wo + rx.lo) * co;
                            for (int i = 0; i < len; ++i) {
                                const float* gq = grow + static_cast<int64_t>(i) * co;
                                float acc = 0.0f;
#pragma omp simd reduction(+ : acc)
                                for (int oc = 0; oc < co; ++oc)
                                    acc += wrow[oc] * gq[oc];
                                dxrow[static_cast<int64_t>(i) * stride] += acc;
                            }
                        }
                    }
                }
            }
        }
        return;
    }
    for (int img = 0; img < n; ++img) {
        for (int oc = 0; oc < co; ++oc) {
            const float* gp =
                dy + (static_cast<int64_t>(img) * co + oc) * out_plane;
            for (int ic = 0; ic < ci; ++ic) {
                float* dxp =
                    dx + (static_cast<int64_t>(img) * ci + ic) * in_plane;
                const float* wp =
                    w + ((static_cast<int64_t>(oc) * ci + ic) * kh) * kw;
                for (int ky = 0; ky < kh; ++ky) {
                    OutRange ry = conv_out_range(h, ky, pad, stride, ho);
                    for (int kx = 0; kx < kw; ++kx) {
                        float wv = wp[ky * kw + kx];
                        if (wv == 0.0f) continue;
                        OutRange rx = conv_out_range(wdt, kx, pad, stride, wo);
                        int len = rx.hi - rx.lo;
                        for (int oy = ry.lo; oy < ry.hi; ++oy) {
                            float* dxrow = dxp +
                                static_cast<int64_t>(oy * stride + ky - pad) * wdt +
                                (rx.lo * stride + kx - pad);
                            const float* grow =
                                gp + static_cast<int64_t>(oy) * wo + rx.lo;
                            if (stride == 1) {
                                for (int i = 0; i < len; ++i)
                                    dxrow[i] += wv * grow[i];
                            } else {
                                for (int i = 0; i < len; ++i)
                                    dxrow[static_cast<int64_t>(i) * stride] += wv * grow[i];
                            }
                        }
                    }
                }
            }
        }
    }
}

// dw += x (*) dy ; db += sum(dy). Transposed layout throughout: per tap the
// inner loop is an oc-contiguous multiply-accumulate, with four rotating
// accumulator rows to break the dependency chain.
inline void conv2d_backward_weight_kernel(const float* x, const float* dy,
                                          float* dw, float* db, int n, int ci,
                                          int h, int wdt, int co, int kh,
                                          int kw, int stride, int pad, int ho,
                                          int wo) {
    const int64_t in_plane = static_cast<int64_t>(h) * wdt;
    const int64_t out_plane = static_cast<int64_t>(ho) * wo;
    float* dyT = kernel_scratch(1, static_cast<size_t>(out_plane) * co).data();
    float* acc4 = kernel_scratch(2, static_cast<size_t>(co) * 4).data();
    for (int img = 0; img < n; ++img) {
        transpose_to(dy + static_cast<int64_t>(img) * co * out_plane, dyT, co,
                     static_cast<int>(out_plane));
        if (db) {
            for (int oc = 0; oc < co * 4; ++oc) acc4[oc] = 0.0f;
            for (int64_t pos = 0; pos < out_plane; ++pos) {
                const float* gq = dyT + pos * co;
                float* acc = acc4 + (pos & 3) * co;
#pragma omp simd
                for (int oc = 0; oc < co; ++oc) acc[oc] += gq[oc];
            }
            for (int oc = 0; oc < co; ++oc)
                db[oc] += acc4[oc] + acc4[co + oc] + acc4[2 * co + oc] +
                          acc4[3 * co + oc];
        }
        for (int ic = 0; ic < ci; ++ic) {
            const float* xp =
                x + (static_cast<int64_t>(img) * ci + ic) * in_plane;
            for (int ky = 0; ky < kh; ++ky) {
                OutRange ry = conv_out_range(h, ky, pad, stride, ho);
                for (int kx = 0; kx < kw; ++kx) {
                    OutRange rx = conv_out_range(wdt, kx, pad, stride, wo);
                    int len = rx.hi - rx.lo;
                    for (int oc = 0; oc < co * 4; ++oc) acc4[oc] = 0.0f;
                    for (int oy = ry.lo; oy < ry.hi; ++oy) {
                        const float* xrow = xp +
                            static_cast<int64_t>(oy * stride + ky - pad) * wdt +
                            (rx.lo * stride + kx - pad);
                        const float* grow =
                            dyT + (static_cast<int64_t>(oy) * wo + rx.lo) * co;
                        for (int i = 0; i < len; ++i) {
                            float xv = xrow[static_cast<int64_t>(i) * stride];
                            const float* gq = grow + static_cast<int64_t>(i) * co;
                            float* acc = acc4 + (i & 3) * co;
#pragma omp simd
                            for (int oc = 0; oc < co; ++oc)
                                acc[oc] += xv * gq[oc];
                        }
                    }
                    for (int oc = 0; oc < co; ++oc)
                        dw[((static_cast<int64_t>(oc) * ci + ic) * kh + ky) * kw +
                           kx] += acc4[oc] + acc4[co + oc] +
                                  acc4[2 * co + oc] + acc4[3 * co + oc];
                }
            }
        }
    }
}

struct ConvDims {
    int n, ci, h, w, co, kh, kw, ho, wo;
};

inline ConvDims conv_dims(const Tensor& x, const Tensor& w, const Tensor& b,
                          int stride, int pad, int groups_c) {
    require(x.shape().size() == 4, "conv2d input must be NCHW, got ",
            shape_str(x.shape()));
    require(w.shape().size() == 4, "conv2d weight must be 4-D, got ",
            shape_str(w.shape()));
    require(stride >= 1, "conv2d stride must be >= 1, got ", stride);
    require(pad >= 0, "conv2d pad must be >= 0, got ", pad);
    ConvDims d{};
    d.n = x.dim(0);
    d.ci = x.dim(1);
    d.h = x.dim(2);
    d.w = x.dim(3);
    d.co = w.dim(0);
    d.kh = w.dim(2);
    d.kw = w.dim(3);
    if (groups_c == 0) {  // dense
        require(w.dim(1) == d.ci, "conv2d weight expects ", w.dim(1),
                " input channels, input has ", d.ci);
    } else {  // depthwise
        require(w.dim(1) == 1 && d.co == d.ci,
                "depthwise conv weight must be [C,1,kh,kw] with C matching "
                "input, got ",
                shape_str(w.shape()), " for input ", shape_str(x.shape()));
    }
    require(b.shape() == Shape{d.co}, "conv2d bias must be [", d.co,
            "], got ", shape_str(b.shape()));
    int hp = d.h + 2 * pad, wp = d.w + 2 * pad;
    require(hp >= d.kh && wp >= d.kw, "conv2d kernel ", d.kh, "x", d.kw,
            " larger than padded input ", hp, "x", wp);
    d.ho = (hp - d.kh) / stride + 1;
    d.wo = (wp - d.kw) / stride + 1;
    return d;
}

}  // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
                     int stride = 1, int pad = 0) {
    auto d = detail::conv_dims(x, w, b, stride, pad, 0);
    std::vector<float> out(
        static_cast<size_t>(static_cast<int64_t>(d.n) * d.co * d.ho * d.wo));
    detail::conv2d_forward_kernel(x.data().data(), w.data().data(),
                                  b.data().data(), out.data(), d.n, d.ci, d.h,
                                  d.w, d.co, d.kh, d.kw, stride, pad, d.ho,
                                  d.wo);
    return detail::make_op(
        Shape{d.n, d.co, d.ho, d.wo}, std::move(out), {x, w, b},
        [d, stride, pad](Node& node) {
            Node& x = *node.parents[0];
            Node& w = *node.parents[1];
            Node& b = *node.parents[2];
            const float* g = node.grad.data();
            if (x.grad_path) {
                x.ensure_grad();
                detail::conv2d_backward_input_kernel(
                    g, w.value.data(), x.grad.data(), d.n, d.ci, d.h, d.w,
                    d.co, d.kh, d.kw, stride, pad, d.ho, d.wo);
            }
            if (w.grad_path || b.grad_path) {
                w.ensure_grad();
                b.ensure_grad();
                detail::conv2d_backward_weight_kernel(
                    x.value.data(), g, w.grad.data(),
                    b.grad_path ? b.grad.data() : nullptr, d.n, d.ci, d.h,
                    d.w, d.co, d.kh, d.kw, stride, pad, d.ho, d.wo);
            }
        });
}

// Depthwise conv: weight [C,1,kh,kw], one filter per channel.
inline Tensor depthwise_conv2d(const Tensor& x, const Tensor& w,
                               const Tensor& b, int stride = 1, int pad = 0) {
    auto d = detail::conv_dims(x, w, b, stride, pad, 1);
    const int64_t in_plane = static_cast<int64_t>(d.h) * d.w;
    const int64_t out_plane = static_cast<int64_t>(d.ho) * d.wo;
    const int64_t ksz = static_cast<int64_t>(d.kh) * d.kw;
    std::vector<float> out(
        static_cast<size_t>(static_cast<int64_t>(d.n) * d.co * out_plane));
    // Per (img, channel) this is a 1-in/1-out dense conv.
    for (int img = 0; img < d.n; ++img)
        for (int c = 0; c < d.ci; ++c)
            detail::conv2d_forward_kernel(
                x.data().data() + (static_cast<int64_t>(img) * d.ci + c) * in_plane,
                w.data().data() + c * ksz, b.data().data() + c,
                out.data() + (static_cast<int64_t>(img) * d.co + c) * out_plane,
                1, 1, d.h, d.w, 1, d.kh, d.kw, stride, pad, d.ho, d.wo);
    return detail::make_op(
        Shape{d.n, d.co, d.ho, d.wo}, std::move(out), {x, w, b},
        [d, stride, pad, in_plane, out_plane, ksz](Node& node) {
            Node& x = *node.parents[0];
            Node& w = *node.parents[1];
            Node& b = *node.parents[2];
            const float* g = node.grad.data();
            if (x.grad_path) x.ensure_grad();
            if (w.grad_path || b.grad_path) {
                w.ensure_grad();
                b.ensure_grad();
            }
            for (int img = 0; img < d.n; ++img) {
                for (int c = 0; c < d.ci; ++c) {
                    const float* gp =
                        g + (static_cast<int64_t>(img) * d.co + c) * out_plane;
                    if (x.grad_path)
                        detail::conv2d_backward_input_kernel(
                            gp, w.value.data() + c * ksz,
                            x.grad.data() +
                                (static_cast<int64_t>(img) * d.ci + c) * in_plane,
                            1, 1, d.h, d.w, 1, d.kh, d.kw, stride, pad, d.ho,
                            d.wo);
                    if (w.grad_path || b.grad_path)
                        detail::conv2d_backward_weight_kernel(
                            x.value.data() +
                                (static_cast<int64_t>(img) * d.ci + c) * in_plane,
                            gp, w.grad.data() + c * ksz,
                            b.grad_path ? b.grad.data() + c : nullptr, 1, 1,
                            d.h, d.w, 1, d.kh, d.kw, stride, pad, d.ho, d.wo);
                }
            }
        });
}

namespace detail {

// Source taps for one output axis position under align_corners=false:
// src = (dst + 0.5) / factor - 0.5, two clamped neighbor indices + weight.
struct LerpTap {
    int i0, i1;
    float w1;  // weight of i1; i0 gets 1 - w1
};

inline std::vector<LerpTap> upsample_taps(int in_size, int factor) {
    std::vector<LerpTap> taps(static_cast<size_t>(in_size) * factor);
    for (int o = 0; o < in_size * factor; ++o) {
        double src = (o + 0.5) / factor - 0.5;
        int i0 = static_cast<int>(std::floor(src));
        float w1 = static_cast<float>(src - i0);
        int i1 = i0 + 1;
        if (i0 < 0) i0 = 0;
        if (i1 > in_size - 1) i1 = in_size - 1;
        if (i0 > in_size - 1) i0 = in_size - 1;
        taps[static_cast<size_t>(o)] = {i0, i1, w1};
    }
    return taps;
}

}  // namespace detail

// Integer-factor bilinear upsampling, align_corners=false, edge-clamped.
inline Tensor bilinear_upsample(const Tensor& x, int factor) {
    require(x.shape().size() == 4, "bilinear_upsample expects NCHW, got ",
            shape_str(x.shape()));
    require(factor >= 2, "bilinear_upsample factor must be >= 2, got ",
            factor);
    int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    int ho = h * factor, wo = w * factor;
    auto ytaps = detail::upsample_taps(h, factor);
    auto xtaps = detail::upsample_taps(w, factor);
    std::vector<float> out(
        static_cast<size_t>(static_cast<int64_t>(n) * c * ho * wo));
    const float* src = x.data().data();
    for (int p = 0; p < n * c; ++p) {
        const float* sp = src + static_cast<int64_t>(p) * h * w;
        float* dp = out.data() + static_cast<int64_t>(p) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
            const auto& ty = ytaps[static_cast<size_t>(oy)];
            const float* r0 = sp + static_cast<int64_t>(ty.i0) * w;
            const float* r1 = sp + static_cast<int64_t>(ty.i1) * w;
            float wy = ty.w1;
            float* drow = dp + static_cast<int64_t>(oy) * wo;
            for (int ox = 0; ox < wo; ++ox) {
                const auto& tx = xtaps[static_cast<size_t>(ox)];
                float top = r0[tx.i0] * (1.0f - tx.w1) + r0[tx.i1] * tx.w1;
                float bot = r1[tx.i0] * (1.0f - tx.w1) + r1[tx.i1] * tx.w1;
                drow[ox] = top * (1.0f - wy) + bot * wy;
            }
        }
    }
    return detail::make_op(
        Shape{n, c, ho, wo}, std::move(out), {x},
        [n, c, h, w, ho, wo, ytaps, xtaps](Node& node) {
            Node& x = *node.parents[0];
            if (!x.grad_path) return;
            x.ensure_grad();
            const float* g = node.grad.data();
            for (int p = 0; p < n * c; ++p) {
                float* dxp = x.grad.data() + static_cast<int64_t>(p) * h * w;
                const float* gp = g + static_cast<int64_t>(p) * ho * wo;
                for (int oy = 0; oy < ho; ++oy) {
                    const auto& ty = ytaps[static_cast<size_t>(oy)];
                    float* r0 = dxp + static_cast<int64_t>(ty.i0) * w;
                    float* r1 = dxp + static_cast<int64_t>(ty.i1) * w;
                    float wy = ty.w1;
                    const float* grow = gp + static_cast<int64_t>(oy) * wo;
                    for (int ox = 0; ox < wo; ++ox) {
                        const auto& tx = xtaps[static_cast<size_t>(ox)];
                        float gv = grow[ox];
                        r0[tx.i0] += gv * (1.0f - wy) * (1.0f - tx.w1);
                        r0[tx.i1] += gv * (1.0f - wy) * tx.w1;
                        r1[tx.i0] += gv * wy * (1.0f - tx.w1);
                        r1[tx.i1] += gv * wy * tx.w1;
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    int64_t step = 0;
    std::vector<std::vector<float>> m;
    std::vector<std::vector<float>> v;

    void init(const std::vector<Tensor>& params) {
        m.clear();
        v.clear();
        step = 0;
        for (const auto& p : params) {
            m.emplace_back(static_cast<size_t>(p.numel()), 0.0f);
            v.emplace_back(static_cast<size_t>(p.numel()), 0.0f);
        }
    }
};

// One Adam update over a parameter group. grads[i] pairs with params[i];
// state slots must match parameter sizes (init once per group).
inline void adam_step(std::vector<Tensor>& params,
                      const std::vector<std::span<const float>>& grads,
                      AdamState& state, float lr) {
    require(params.size() == grads.size(), "adam_step: ", params.size(),
            " params vs ", grads.size(), " grads");
    check(state.m.size() == params.size(),
          "adam_step: state not initialized for this parameter group");
    state.step += 1;
    double bc1 = 1.0 - std::pow(static_cast<double>(state.beta1),
                                static_cast<double>(state.step));
    double bc2 = 1.0 - std::pow(static_cast<double>(state.beta2),
                                static_cast<double>(state.step));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto pv = params[pi].mutable_data();
        auto gv = grads[pi];
        require(gv.size() == pv.size(), "adam_step: grad size ", gv.size(),
                " vs param size ", pv.size());
        float* m = state.m[pi].data();
        float* v = state.v[pi].data();
        check(state.m[pi].size() == pv.size(),
              "adam_step: state slot size mismatch");
        for (size_t i = 0; i < pv.size(); ++i) {
            float g = gv[i];
            m[i] = state.beta1 * m[i] + (1.0f - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0f - state.beta2) * g * g;
            double mhat = m[i] / bc1;
            double vhat = v[i] / bc2;
            pv[i] -= static_cast<float>(lr * mhat /
                                        (std::sqrt(vhat) + state.eps));
        }
    }
}

// Convenience: pull gradients from the tensors' own grad buffers.
inline void adam_step(std::vector<Tensor>& params, AdamState& state,
                      float lr) {
    std::vector<std::span<const float>> grads;
    grads.reserve(params.size());
    for (auto& p : params) grads.push_back(p.grad());
    adam_step(params, grads, state, lr);
}

}  // namespace ptq4vm
